"""Verification scoring: cosine trials, EER, minDCF, model evaluation."""

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, IngestionError, NumericalError
from .model import count_params, forward

P_TARGET = 0.01
C_MISS = 1.0
C_FA = 1.0


@dataclass(frozen=True)
class Trial:
    enroll: str
    test: str
    target: bool


def read_trials(path):
    trials = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
                raise IngestionError(f"{path}:{lineno}: expected '<enroll> <test> target|nontarget'")
            trials.append(Trial(parts[0], parts[1], parts[2] == "target"))
    return trials


def write_trials(path, trials):
    with open(path, "w") as f:
        for t in trials:
            f.write(f"{t.enroll} {t.test} {'target' if t.target else 'nontarget'}\n")


def score(a, b):
    """Cosine similarity of two embeddings."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise NumericalError("cannot score a zero-norm embedding")
    return float(a @ b / (na * nb))


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ConfigurationError("scores and labels must be 1-D arrays of equal length")
    if not np.all(np.isfinite(scores)):
        raise NumericalError("scores must be finite")
    if labels.all() or not labels.any():
        raise ConfigurationError("need at least one target and one nontarget trial")
    return scores, labels


def operating_points(scores, labels):
    """Miss and false-alarm rates at every distinct threshold.

    Thresholds sit below all scores, between consecutive distinct scores,
    and above all scores; a trial is accepted when its score exceeds the
    threshold. Returns ``(thresholds, p_miss, p_fa)`` ordered by threshold.
    """
    scores, labels = _split(scores, labels)
    uniq, inverse = np.unique(scores, return_inverse=True)
    n_tar = labels.sum()
    n_non = labels.size - n_tar
    tar_at = np.bincount(inverse, weights=labels, minlength=uniq.size)
    non_at = np.bincount(inverse, weights=~labels, minlength=uniq.size)
    # rejected count at threshold j = all trials with score <= uniq[j-1]
    miss = np.concatenate([[0.0], np.cumsum(tar_at)])
    fa = n_non - np.concatenate([[0.0], np.cumsum(non_at)])
    mids = (uniq[:-1] + uniq[1:]) / 2.0
    thresholds = np.concatenate([[uniq[0] - 1.0], mids, [uniq[-1] + 1.0]])
    return thresholds, miss / n_tar, fa / n_non


def eer_from_points(p_miss, p_fa):
    """Linear interpolation at the first crossing of the miss and false-alarm curves."""
    diff = p_miss - p_fa
    j = int(np.argmax(diff >= 0.0))
    if diff[j] == 0.0 or j == 0:
        return float(p_miss[j])
    t = -diff[j - 1] / (diff[j] - diff[j - 1])
    return float(p_miss[j - 1] + t * (p_miss[j] - p_miss[j - 1]))


def eer(scores, labels):
    _, p_miss, p_fa = operating_points(scores, labels)
    return eer_from_points(p_miss, p_fa)


def min_dcf(scores, labels, p_target=P_TARGET, c_miss=C_MISS, c_fa=C_FA):
    """Minimum normalized detection cost over all thresholds."""
    _, p_miss, p_fa = operating_points(scores, labels)
    cost = c_miss * p_target * p_miss + c_fa * (1.0 - p_target) * p_fa
    return float(np.min(cost) / min(c_miss * p_target, c_fa * (1.0 - p_target)))


def embed_all(weights, utterances, ids=None):
    """Embeddings for ``ids`` (default: all) of an ``{id: features}`` mapping."""
    ids = list(utterances) if ids is None else ids
    out = {}
    for uid in ids:
        if uid not in out:
            out[uid] = forward(weights, utterances[uid])
    return out


def score_trials(weights, utterances, trials, enrollments=None):
    """Cosine score per trial.

    ``enrollments`` optionally maps an enrollment id to several utterance
    ids whose embeddings are averaged.
    """
    enrollments = enrollments or {}
    needed = set()
    for t in trials:
        needed.update(enrollments.get(t.enroll, [t.enroll]))
        needed.add(t.test)
    missing = sorted(u for u in needed if u not in utterances)
    if missing:
        raise IngestionError(f"unknown utterance id(s) in trials: {', '.join(missing[:5])}")
    cache = embed_all(weights, utterances, sorted(needed))
    scores = np.empty(len(trials))
    for k, t in enumerate(trials):
        if t.enroll in enrollments:
            e = np.mean([cache[u] for u in enrollments[t.enroll]], axis=0)
        else:
            e = cache[t.enroll]
        scores[k] = score(e, cache[t.test])
    return scores


def evaluate_model(weights, utterances, trials, p_target=P_TARGET, c_miss=C_MISS, c_fa=C_FA, enrollments=None):
    scores = score_trials(weights, utterances, trials, enrollments)
    labels = np.array([t.target for t in trials])
    return {
        "eer": eer(scores, labels),
        "min_dcf": min_dcf(scores, labels, p_target, c_miss, c_fa),
        "num_params": count_params(weights.config)["total"],
        "num_trials": len(trials),
        "config_digest": weights.config.digest(),
    }, scores


def write_results_json(path, results):
    with open(path, "w") as f:
        json.dump(results, f, indent=2, sort_keys=True)
        f.write("\n")


def write_roc_csv(path, scores, labels):
    thresholds, p_miss, p_fa = operating_points(scores, labels)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "p_miss", "p_fa"])
        for row in zip(thresholds, p_miss, p_fa):
            writer.writerow([repr(float(v)) for v in row])
