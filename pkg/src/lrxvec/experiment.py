"""Desk-scale compression experiment: teacher, SVD students and a distilled student."""

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import factorize, features, model, scoring, synthdata, trainer

log = logging.getLogger(__name__)

HELD_OUT_OFFSET = 1000


@dataclass(frozen=True)
class ExperimentConfig:
    """Teacher is the wide full-rank network; the SVD students come from a
    narrower full-rank network of the student width, and the distilled
    student shares their low-rank topology."""

    seed: int = 0
    num_speakers: int = 32
    utts_per_speaker: int = 6
    duration_s: float = 3.0
    eval_speakers: int = 16
    eval_utts: int = 4
    teacher_width: float = 0.5
    student_width: float = 0.25
    ranks: dict = field(default_factory=factorize.default_ranks)
    epochs: int = 20
    finetune_epochs: int = 8
    chunk_frames: int = 100
    student_init: str = "svd"  # or "random"


@dataclass
class Dataset:
    features: list
    labels: np.ndarray
    eval_features: dict
    trials: list


def all_pair_trials(utt_ids, speakers):
    """Every unordered pair of utterances, labelled by speaker identity."""
    out = []
    for i in range(len(utt_ids)):
        for j in range(i + 1, len(utt_ids)):
            out.append(scoring.Trial(utt_ids[i], utt_ids[j], speakers[i] == speakers[j]))
    return out


def prepare(cfg):
    train_corpus = synthdata.expand_4x(
        synthdata.gen_corpus(cfg.num_speakers, cfg.utts_per_speaker, cfg.duration_s, cfg.seed), cfg.seed
    )
    held_out = synthdata.gen_corpus(
        cfg.eval_speakers, cfg.eval_utts, cfg.duration_s, cfg.seed, speaker_offset=HELD_OUT_OFFSET
    )
    feats = [features.extract(w) for w in train_corpus.waveforms]
    eval_feats = {u: features.extract(w) for u, w in zip(held_out.utt_ids, held_out.waveforms)}
    trials = all_pair_trials(held_out.utt_ids, held_out.speakers)
    return Dataset(feats, train_corpus.labels(), eval_feats, trials)


def run(cfg, data=None):
    """Train every system for one seed; returns ``{name: results dict}``."""
    t0 = time.time()
    data = data or prepare(cfg)
    base_config = model.default_config(cfg.num_speakers)
    tc = trainer.TrainConfig(seed=cfg.seed, early_stop=False, chunk_frames=cfg.chunk_frames, epochs=cfg.epochs)
    short = replace(tc, epochs=cfg.finetune_epochs)

    teacher = trainer.train(model.scale_config(base_config, cfg.teacher_width), data.features, data.labels, tc).weights
    small = trainer.train(model.scale_config(base_config, cfg.student_width), data.features, data.labels, tc).weights
    svd0 = factorize.factorize_model(small, cfg.ranks)
    svdf = factorize.svd_finetune(svd0, data.features, data.labels, short)
    if cfg.student_init == "svd":
        kd_tc, initial = replace(short, mode="kd-mse"), svd0
    else:
        kd_tc, initial = replace(tc, mode="kd-mse"), None
    student = trainer.train(svd0.config, data.features, data.labels, kd_tc, teacher=teacher, initial=initial).weights

    systems = (("teacher", teacher), ("full_small", small), ("svd0", svd0), ("svd_f", svdf), ("kd_mse", student))
    out = {}
    for name, w in systems:
        out[name], _ = scoring.evaluate_model(w, data.eval_features, data.trials)
    log.info("seed %d done in %.0fs: %s", cfg.seed, time.time() - t0, {k: round(v["eer"], 4) for k, v in out.items()})
    return out


def median_eers(results):
    names = results[0].keys()
    return {n: float(np.median([r[n]["eer"] for r in results])) for n in names}
