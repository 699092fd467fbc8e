"""``lrx`` command-line entry point."""

import argparse
import csv
import logging
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import factorize, features, losses, model, scoring, synthdata, trainer
from .errors import ConfigurationError, IngestionError, LrxError

log = logging.getLogger("lrxvec")


def _at_least(lo, kind=int):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {kind.__name__}, got {text!r}")
        if v < lo:
            raise argparse.ArgumentTypeError(f"must be >= {lo}, got {v}")
        return v

    return parse


# --- data helpers ------------------------------------------------------------------


def load_dataset(data_dir):
    """Features per utterance id, speaker ids, and integer labels (sorted speaker order)."""
    corpus = synthdata.read_corpus(data_dir)
    if len(corpus) == 0:
        raise IngestionError(f"{data_dir}: empty manifest")
    feats = [features.extract(w) for w in corpus.waveforms]
    return corpus.utt_ids, feats, corpus.labels()


def _train_config(args, mode, **extra):
    return trainer.TrainConfig(
        mode=mode,
        epochs=args.epochs,
        lr_initial=args.lr_initial,
        lr_final=args.lr_final,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        chunk_frames=args.chunk_frames,
        seed=args.seed,
        ams_scale=args.ams_scale,
        ams_margin=args.ams_margin,
        schedule=args.schedule,
        early_stop=not args.no_early_stop,
        **extra,
    )


def _check_speakers(config, labels, what):
    n = int(labels.max()) + 1
    if config.num_speakers != n:
        raise ConfigurationError(f"{what} has num_speakers={config.num_speakers} but the data has {n} speakers")


def _finish_training(args, result):
    model.save_weights(args.out, result.weights)
    if args.loss_csv:
        trainer.write_loss_csv(args.loss_csv, result.history)
    counts = model.count_params(result.weights.config)
    print(f"wrote {args.out} ({counts['total']} parameters, {len(result.history)} epochs)")


# --- subcommands -----------------------------------------------------------------


def cmd_gen_data(args):
    corpus = synthdata.gen_corpus(args.speakers, args.utts, args.duration, args.seed, args.speaker_offset)
    clean = corpus
    if args.augment4x:
        corpus = synthdata.expand_4x(corpus, args.seed)
    manifest = synthdata.write_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} utterances to {manifest}")
    if args.trials:
        from .experiment import all_pair_trials

        trials = all_pair_trials(clean.utt_ids, clean.speakers)
        scoring.write_trials(args.trials, trials)
        print(f"wrote {len(trials)} trials to {args.trials}")


def cmd_train(args):
    _, feats, labels = load_dataset(args.data)
    num_speakers = int(labels.max()) + 1
    initial = None
    if args.initial:
        initial = model.load_weights(args.initial)
        config = initial.config
        mode = "finetune"
    elif args.config:
        config = model.load_config(args.config, num_speakers=num_speakers)
        mode = "baseline-ams"
    else:
        config = model.scale_config(model.default_config(num_speakers), args.width_factor)
        mode = "baseline-ams"
    _check_speakers(config, labels, "model config")
    tc = _train_config(args, mode, init=args.init)
    result = trainer.train(config, feats, labels, tc, initial=initial)
    _finish_training(args, result)


def cmd_distill(args):
    teacher = model.load_weights(args.teacher)
    _, feats, labels = load_dataset(args.data)
    _check_speakers(teacher.config, labels, "teacher")
    initial = None
    if args.student_init == "teacher":
        if args.student_config:
            raise ConfigurationError("--student-init teacher copies the teacher; drop --student-config")
        initial = teacher.copy()
        config = teacher.config
    elif args.student_config:
        config = model.load_config(args.student_config, num_speakers=teacher.config.num_speakers)
    else:
        ranks = factorize.parse_ranks(args.student_ranks)
        if args.student_init == "svd":
            initial = factorize.factorize_model(teacher, ranks)
            config = initial.config
        else:
            config = model.with_ranks(teacher.config, factorize.check_ranks(teacher.config, ranks))
    if args.student_init == "svd" and initial is None:
        raise ConfigurationError("--student-init svd needs --student-ranks, not --student-config")
    if config.input_dim != teacher.config.input_dim:
        raise ConfigurationError(
            f"teacher feature dim {teacher.config.input_dim} != student feature dim {config.input_dim}"
        )
    mode = f"{'gcs' if args.gcs else 'kd'}-{args.kd}"
    tc = _train_config(args, mode, alpha=args.alpha, kd_target=args.kd_target, kd_temperature=args.temperature)
    print(f"distilling with {mode}: KD target = {tc.target}, alpha = {tc.alpha}")
    result = trainer.train(config, feats, labels, tc, teacher=teacher, initial=initial)
    if args.gcs and result.gates:
        is_open, cosine = result.gates[0]
        print(f"step 1 gate {'open' if is_open else 'closed'} (cosine {cosine:.4f})")
    if args.gcs:
        fractions = [e.gcs_open_fraction for e in result.history]
        if fractions:
            print(f"gcs_open_fraction: first epoch {fractions[0]:.3f}, last epoch {fractions[-1]:.3f}")
    _finish_training(args, result)


def cmd_factorize(args):
    weights = model.load_weights(args.model)
    ranks = factorize.parse_ranks(args.ranks)
    if args.spectrum:
        spectra = factorize.singular_spectrum(weights)
        factorize.write_spectrum_csv(args.spectrum, spectra)
        print(f"wrote spectrum of {len(spectra)} layers to {args.spectrum}")
    low = factorize.factorize_model(weights, ranks, strict=not args.allow_rank1)
    if args.finetune_epochs:
        if not args.data:
            raise ConfigurationError("--finetune-epochs needs --data")
        _, feats, labels = load_dataset(args.data)
        tc = trainer.TrainConfig(seed=args.seed, epochs=args.finetune_epochs)
        low = factorize.svd_finetune(low, feats, labels, tc)
    model.save_weights(args.out, low)
    before = model.count_params(weights.config)["total"]
    after = model.count_params(low.config)["total"]
    print(f"parameters: {before} -> {after} ({after / before:.1%})")
    print(f"wrote {args.out}")


def _evaluate(path, utterances, trials, args):
    weights = model.load_weights(path)
    return scoring.evaluate_model(
        weights, utterances, trials, args.p_target, args.c_miss, args.c_fa
    )


def cmd_evaluate(args):
    ids, feats, _ = load_dataset(args.data)
    trials = scoring.read_trials(args.trials)
    results, scores = _evaluate(args.model, dict(zip(ids, feats)), trials, args)
    if args.json:
        scoring.write_results_json(args.json, results)
    if args.roc:
        scoring.write_roc_csv(args.roc, scores, np.array([t.target for t in trials]))
    print(f"EER {results['eer']:.4%}  minDCF {results['min_dcf']:.4f}  params {results['num_params']}")


def cmd_report(args):
    ids, feats, _ = load_dataset(args.data)
    utterances = dict(zip(ids, feats))
    trials = scoring.read_trials(args.trials)
    rows = []
    for path in args.models:
        results, _ = _evaluate(path, utterances, trials, args)
        rows.append((results["num_params"], results["eer"], results["min_dcf"], path))
    rows.sort(key=lambda r: (r[0], r[3]))
    with open(args.csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["num_params", "eer", "min_dcf", "model"])
        for n, e, d, path in rows:
            writer.writerow([n, repr(e), repr(d), os.path.basename(path)])
    for n, e, d, path in rows:
        print(f"{n:>10}  EER {e:.4%}  minDCF {d:.4f}  {path}")


# --- parser ------------------------------------------------------------------


def _add_training_args(p, epochs=30):
    p.add_argument("--data", required=True, help="corpus directory with manifest.txt")
    p.add_argument("--out", required=True, help="output weight file")
    p.add_argument("--loss-csv", help="per-epoch loss curve")
    p.add_argument("--epochs", type=_at_least(0), default=epochs)
    p.add_argument("--batch-size", type=_at_least(1), default=32)
    p.add_argument("--chunk-frames", type=_at_least(1), default=200)
    p.add_argument("--lr-initial", type=float, help="default 0.1, or 0.01 for fine-tuning and KD")
    p.add_argument("--lr-final", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=1e-6)
    p.add_argument("--schedule", choices=("exponential", "linear"), default="exponential")
    p.add_argument("--ams-scale", type=float, default=losses.AMS_SCALE)
    p.add_argument("--ams-margin", type=float, default=losses.AMS_MARGIN)
    p.add_argument("--no-early-stop", action="store_true", help="always run every epoch")
    p.add_argument("--seed", type=int, default=0)


def _add_metric_args(p):
    p.add_argument("--data", required=True)
    p.add_argument("--trials", required=True, help="'<enroll> <test> target|nontarget' per line")
    p.add_argument("--p-target", type=float, default=scoring.P_TARGET)
    p.add_argument("--c-miss", type=float, default=scoring.C_MISS)
    p.add_argument("--c-fa", type=float, default=scoring.C_FA)


def build_parser():
    parser = argparse.ArgumentParser(prog="lrx", description="Low-rank x-vector toolkit.")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic corpus")
    p.add_argument("--speakers", type=_at_least(2), required=True)
    p.add_argument("--utts", type=_at_least(1), required=True)
    p.add_argument("--duration", type=float, default=3.0, help="seconds per utterance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--speaker-offset", type=_at_least(0), default=0, help="first speaker id (held-out sets)")
    p.add_argument("--out", required=True)
    p.add_argument("--augment4x", action="store_true")
    p.add_argument("--trials", help="also write all-pairs trials over the clean utterances")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a network with AM-softmax")
    p.add_argument("--config", help="key=value model config (num_speakers taken from the data)")
    p.add_argument("--width-factor", type=float, default=1.0, help="scale the default topology")
    p.add_argument("--initial", help="continue from a weight file (fine-tuning)")
    p.add_argument("--init", choices=("he", "orthogonal"), default="he")
    p.add_argument("--mode", choices=("baseline-ams",), default="baseline-ams")
    _add_training_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="train a student against a frozen teacher")
    p.add_argument("--teacher", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--student-config")
    group.add_argument("--student-ranks", default="l2=0.5,l3=0.5,l4=0.75,l5=0.75")
    p.add_argument("--student-init", choices=("random", "svd", "teacher"), default="random")
    p.add_argument("--kd", choices=("kld", "mse", "cos"), default="mse")
    p.add_argument("--kd-target", choices=("logits", "embeddings"))
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--gcs", action="store_true", help="gate KD by gradient cosine similarity")
    p.add_argument("--alpha", type=float, default=losses.GCS_ALPHA)
    _add_training_args(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("factorize", help="truncated-SVD compression")
    p.add_argument("--model", required=True)
    p.add_argument("--ranks", default="l2=0.5,l3=0.5,l4=0.75,l5=0.75")
    p.add_argument("--allow-rank1", action="store_true")
    p.add_argument("--spectrum", help="singular-value CSV of layers 2-5")
    p.add_argument("--out", required=True)
    p.add_argument("--finetune-epochs", type=_at_least(0), default=0)
    p.add_argument("--data", help="corpus for fine-tuning")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_factorize)

    p = sub.add_parser("evaluate", help="EER and minDCF on a trial list")
    p.add_argument("--model", required=True)
    _add_metric_args(p)
    p.add_argument("--json")
    p.add_argument("--roc", help="ROC points CSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="size vs accuracy frontier")
    p.add_argument("--models", nargs="+", required=True)
    _add_metric_args(p)
    p.add_argument("--csv", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("LRX_THREADS", "1")
    try:
        threads = int(threads)
        if threads < 1:
            raise ValueError
    except ValueError:
        print(f"config: LRX_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
        return 2
    try:
        with threadpool_limits(limits=threads):
            args.func(args)
    except LrxError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
