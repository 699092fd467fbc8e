import csv
import hashlib
import json
import time

import numpy as np
import pytest

from lrxvec import cli, model
from lrxvec.errors import CorruptionError

TINY = """input_dim=40
embed_dim=8
layer1.context=-2,-1,0,1,2
layer1.dim=16
layer2.context=-2,0,2
layer2.dim=16
layer3.context=-3,0,3
layer3.dim=16
layer4.context=0
layer4.dim=16
layer5.context=0
layer5.dim=24
"""
FAST = ["--batch-size", "6", "--chunk-frames", "60", "--no-early-stop"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Corpus, trials, config and a trained tiny model shared by the CLI tests."""
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-data", "--speakers", "3", "--utts", "4", "--duration", "1", "--seed", "5",
                     "--out", str(d / "data"), "--trials", str(d / "trials.txt")]) == 0
    (d / "tiny.cfg").write_text(TINY)
    assert cli.main(["train", "--config", str(d / "tiny.cfg"), "--data", str(d / "data"), "--out", str(d / "m.lrxw"),
                     "--epochs", "3", "--seed", "1", *FAST]) == 0
    return d


def test_gen_data_counts_and_digest(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-data", "--speakers", 2, "--utts", 3, "--duration", 0.5, "--out", tmp_path / "a")
    assert code == 0 and "wrote 6 utterances" in out
    assert len((tmp_path / "a" / "manifest.txt").read_text().splitlines()) == 6
    run(capsys, "gen-data", "--speakers", 2, "--utts", 3, "--duration", 0.5, "--out", tmp_path / "b", "--augment4x")
    assert len((tmp_path / "b" / "manifest.txt").read_text().splitlines()) == 24
    run(capsys, "gen-data", "--speakers", 2, "--utts", 3, "--duration", 0.5, "--out", tmp_path / "c")
    assert digest(tmp_path / "a" / "manifest.txt") == digest(tmp_path / "c" / "manifest.txt")
    wav = "wav/spk001-utt002.wav"
    assert digest(tmp_path / "a" / wav) == digest(tmp_path / "c" / wav)


def test_one_speaker_is_a_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["gen-data", "--speakers", "1", "--utts", "2", "--out", str(tmp_path)])
    assert exc.value.code == 2
    assert ">= 2" in capsys.readouterr().err


def test_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    code, _, err = run(capsys, "gen-data", "--speakers", 2, "--utts", 1, "--duration", 0.1, "--out", blocker / "x")
    assert code == 1 and err.startswith("io: ")


def test_train_writes_model_and_curve(work, tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--config", work / "tiny.cfg", "--data", work / "data", "--out",
                       tmp_path / "m.lrxw", "--loss-csv", tmp_path / "loss.csv", "--epochs", 3, "--seed", 1, *FAST)
    assert code == 0 and "3 epochs" in out
    assert digest(tmp_path / "m.lrxw") == digest(work / "m.lrxw")
    rows = list(csv.reader((tmp_path / "loss.csv").open()))
    assert rows[0] == ["epoch", "mean_loss", "lr", "gcs_open_fraction"] and len(rows) == 4
    assert model.load_weights(tmp_path / "m.lrxw").config.num_speakers == 3


def test_zero_epochs_writes_initialized_model(work, tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--config", work / "tiny.cfg", "--data", work / "data", "--out",
                     tmp_path / "z.lrxw", "--loss-csv", tmp_path / "z.csv", "--epochs", 0)
    assert code == 0
    w = model.load_weights(tmp_path / "z.lrxw")
    assert w.num_params() == model.count_params(w.config)["total"]
    assert (tmp_path / "z.csv").read_text().splitlines() == ["epoch,mean_loss,lr,gcs_open_fraction"]


def test_bad_config_key_is_named(work, tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text(TINY + "layer9.dim=4\n")
    code, _, err = run(capsys, "train", "--config", tmp_path / "bad.cfg", "--data", work / "data", "--out",
                       tmp_path / "x.lrxw", "--epochs", 0)
    assert code == 1 and err.startswith("config: ") and "layer9.dim" in err


def test_corrupt_model_is_reported(work, tmp_path, capsys):
    bad = tmp_path / "bad.lrxw"
    bad.write_bytes(work.joinpath("m.lrxw").read_bytes()[:-7])
    code, _, err = run(capsys, "evaluate", "--model", bad, "--data", work / "data", "--trials", work / "trials.txt")
    assert code == 1 and err.startswith(f"{CorruptionError.category}: ")


def test_lrx_threads_must_be_positive(work, monkeypatch, capsys):
    monkeypatch.setenv("LRX_THREADS", "zero")
    code, _, err = run(capsys, "evaluate", "--model", work / "m.lrxw", "--data", work / "data",
                       "--trials", work / "trials.txt")
    assert code == 2 and err.startswith("config: LRX_THREADS")


def test_distill_gcs_reports_gate(work, tmp_path, capsys):
    code, out, _ = run(capsys, "distill", "--teacher", work / "m.lrxw", "--data", work / "data", "--student-init",
                       "teacher", "--kd", "kld", "--gcs", "--out", tmp_path / "s.lrxw", "--loss-csv",
                       tmp_path / "s.csv", "--epochs", 2, *FAST)
    assert code == 0
    assert "gcs-kld: KD target = logits" in out
    assert "step 1 gate" in out
    rows = list(csv.DictReader((tmp_path / "s.csv").open()))
    assert len(rows) == 2 and all(0.0 <= float(r["gcs_open_fraction"]) <= 1.0 for r in rows)


def test_gate_opens_when_student_shares_teacher_init(work, tmp_path, capsys):
    # same config and seed as the teacher run: the student starts from the teacher's initial weights
    code, out, _ = run(capsys, "distill", "--teacher", work / "m.lrxw", "--data", work / "data", "--student-config",
                       work / "tiny.cfg", "--seed", 1, "--kd", "mse", "--gcs", "--out", tmp_path / "s.lrxw",
                       "--loss-csv", tmp_path / "s.csv", "--epochs", 2, *FAST)
    assert code == 0 and "step 1 gate open" in out
    rows = list(csv.DictReader((tmp_path / "s.csv").open()))
    assert all(0.0 < float(r["gcs_open_fraction"]) <= 1.0 for r in rows)


def test_distill_mse_targets_embeddings(work, tmp_path, capsys):
    code, out, _ = run(capsys, "distill", "--teacher", work / "m.lrxw", "--data", work / "data", "--student-init",
                       "svd", "--student-ranks", "l2=4,l3=4,l4=8,l5=8", "--out", tmp_path / "s.lrxw",
                       "--epochs", 1, *FAST)
    assert code == 0 and "kd-mse: KD target = embeddings" in out
    student = model.load_weights(tmp_path / "s.lrxw")
    assert student.config.layers[1].rank == 4 and student.config.layers[4].rank == 8


def test_alpha_zero_matches_baseline_training(work, tmp_path, capsys):
    common = ["--data", work / "data", "--epochs", 2, "--lr-initial", 0.05, "--seed", 3, *FAST]
    run(capsys, "train", "--config", work / "tiny.cfg", "--out", tmp_path / "base.lrxw", *common)
    run(capsys, "distill", "--teacher", work / "m.lrxw", "--student-config", work / "tiny.cfg", "--alpha", 0,
        "--out", tmp_path / "kd.lrxw", *common)
    assert digest(tmp_path / "base.lrxw") == digest(tmp_path / "kd.lrxw")


def test_distill_rejects_feature_mismatch(work, tmp_path, capsys):
    (tmp_path / "wide.cfg").write_text(TINY.replace("input_dim=40", "input_dim=30"))
    code, _, err = run(capsys, "distill", "--teacher", work / "m.lrxw", "--data", work / "data", "--student-config",
                       tmp_path / "wide.cfg", "--out", tmp_path / "s.lrxw", "--epochs", 0)
    assert code == 1 and err.startswith("config: ") and "feature dim" in err


def test_factorize_full_rank_keeps_metrics(work, tmp_path, capsys):
    code, out, _ = run(capsys, "factorize", "--model", work / "m.lrxw", "--ranks", "l2=16,l3=16,l4=16,l5=16",
                       "--out", tmp_path / "full.lrxw", "--spectrum", tmp_path / "spec.csv")
    assert code == 0 and "parameters:" in out
    rows = (tmp_path / "spec.csv").read_text().splitlines()
    assert len(rows) - 1 == 16 + 16 + 16 + 16
    for name in ("m", "full"):
        src = work / "m.lrxw" if name == "m" else tmp_path / "full.lrxw"
        run(capsys, "evaluate", "--model", src, "--data", work / "data", "--trials", work / "trials.txt",
            "--json", tmp_path / f"{name}.json")
    a, b = (json.loads((tmp_path / f"{n}.json").read_text()) for n in ("m", "full"))
    assert abs(a["eer"] - b["eer"]) <= 1e-6 and abs(a["min_dcf"] - b["min_dcf"]) <= 1e-6
    assert b["num_params"] > a["num_params"]


def test_factorize_default_ratios_report_reduction(work, tmp_path, capsys):
    code, out, _ = run(capsys, "factorize", "--model", work / "m.lrxw", "--out", tmp_path / "lr.lrxw",
                       "--finetune-epochs", 1, "--data", work / "data")
    assert code == 0
    before, after = (int(v) for v in out.split("parameters: ")[1].split(" (")[0].split(" -> "))
    assert after < before
    assert model.load_weights(tmp_path / "lr.lrxw").num_params() == after


def test_factorize_rank_out_of_range(work, tmp_path, capsys):
    code, _, err = run(capsys, "factorize", "--model", work / "m.lrxw", "--ranks", "l2=1", "--out", tmp_path / "x")
    assert code == 1 and "layer2 rank 1" in err
    code, _, _ = run(capsys, "factorize", "--model", work / "m.lrxw", "--ranks", "l2=1", "--allow-rank1",
                     "--out", tmp_path / "x")
    assert code == 0


def test_evaluate_is_deterministic_and_counts(work, tmp_path, capsys):
    for name in ("a", "b"):
        code, _, _ = run(capsys, "evaluate", "--model", work / "m.lrxw", "--data", work / "data", "--trials",
                         work / "trials.txt", "--json", tmp_path / f"{name}.json", "--roc", tmp_path / f"{name}.csv")
        assert code == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    res = json.loads((tmp_path / "a.json").read_text())
    w = model.load_weights(work / "m.lrxw")
    assert res["num_params"] == model.count_params(w.config)["total"]
    assert res["num_trials"] == 66


def test_self_trials_give_zero_eer(work, tmp_path, capsys):
    ids = [line.split()[0] for line in (work / "data" / "manifest.txt").read_text().splitlines()]
    lines = [f"{u} {u} target" for u in ids] + [f"{ids[0]} {ids[-1]} nontarget"]
    (tmp_path / "self.txt").write_text("\n".join(lines) + "\n")
    run(capsys, "evaluate", "--model", work / "m.lrxw", "--data", work / "data", "--trials", tmp_path / "self.txt",
        "--json", tmp_path / "self.json")
    assert json.loads((tmp_path / "self.json").read_text())["eer"] == 0.0


def test_unknown_trial_id(work, tmp_path, capsys):
    (tmp_path / "t.txt").write_text("ghost spk000-utt000 target\n")
    code, _, err = run(capsys, "evaluate", "--model", work / "m.lrxw", "--data", work / "data",
                       "--trials", tmp_path / "t.txt")
    assert code == 1 and err.startswith("ingest: ") and "ghost" in err


def test_report_sorted_by_size(work, tmp_path, capsys):
    run(capsys, "factorize", "--model", work / "m.lrxw", "--ranks", "l2=2,l3=2,l4=2,l5=2", "--out",
        tmp_path / "small.lrxw")
    code, _, _ = run(capsys, "report", "--models", work / "m.lrxw", tmp_path / "small.lrxw", "--data",
                     work / "data", "--trials", work / "trials.txt", "--csv", tmp_path / "f.csv")
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "f.csv").open()))
    assert [r["model"] for r in rows] == ["small.lrxw", "m.lrxw"]
    sizes = [int(r["num_params"]) for r in rows]
    assert sizes == sorted(sizes)
    assert all(0.0 <= float(r["eer"]) <= 1.0 for r in rows)
    run(capsys, "report", "--models", work / "m.lrxw", "--data", work / "data", "--trials", work / "trials.txt",
        "--csv", tmp_path / "one.csv")
    assert len((tmp_path / "one.csv").read_text().splitlines()) == 2


def test_smoke_profile_is_fast(tmp_path, capsys):
    t0 = time.time()
    run(capsys, "gen-data", "--speakers", 8, "--utts", 4, "--duration", 2, "--out", tmp_path / "d")
    code, _, _ = run(capsys, "train", "--width-factor", 0.125, "--data", tmp_path / "d", "--out", tmp_path / "m.lrxw",
                     "--epochs", 3, "--batch-size", 16, "--chunk-frames", 150)
    assert code == 0
    assert time.time() - t0 < 300
    assert model.load_weights(tmp_path / "m.lrxw").config.width_factor == 0.125
    assert np.isfinite(model.load_weights(tmp_path / "m.lrxw")["output.w"]).all()
