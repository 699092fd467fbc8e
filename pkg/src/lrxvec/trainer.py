"""Backpropagation, plain SGD with weight decay, and the training/distillation driver."""

import csv
import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .errors import ConfigurationError, NumericalError, ShapeError
from .model import BN_MOMENTUM, STD_FLOOR, WeightSet, forward, init_weights
from .rng import substream

log = logging.getLogger(__name__)

MODES = ("baseline-ams", "kd-kld", "kd-mse", "kd-cos", "gcs-kld", "gcs-mse", "gcs-cos", "finetune")
# default distillation target per KD loss; "logits" = scaled cosine output layer
KD_TARGETS = {"kld": "logits", "mse": "embeddings", "cos": "embeddings"}
CONVERGENCE_REL = 1e-3
CONVERGENCE_PATIENCE = 3


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "baseline-ams"
    epochs: int = 30
    lr_initial: float | None = None  # None -> 0.1 from scratch, 0.01 for KD / fine-tuning
    lr_final: float = 1e-4
    weight_decay: float = 1e-6
    batch_size: int = 32
    chunk_frames: int = 200
    seed: int = 0
    alpha: float = 0.5
    ams_scale: float = losses.AMS_SCALE
    ams_margin: float = losses.AMS_MARGIN
    kd_target: str | None = None
    kd_temperature: float = 1.0
    schedule: str = "exponential"
    early_stop: bool = True
    init: str = "he"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown training mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.lr_initial is not None and not self.lr_initial >= self.lr_final:
            raise ConfigurationError(f"lr_initial {self.lr_initial} must be >= lr_final {self.lr_final}")
        if self.lr_final <= 0 and not (self.lr_initial == 0 and self.lr_final == 0):
            raise ConfigurationError(f"lr_final must be positive, got {self.lr_final}")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha {self.alpha} outside [0, 1]")
        if self.kd_target not in (None, "logits", "embeddings"):
            raise ConfigurationError(f"kd_target must be logits or embeddings, got {self.kd_target!r}")
        if self.schedule not in ("exponential", "linear"):
            raise ConfigurationError(f"unknown lr schedule {self.schedule!r}")

    @property
    def kd_loss(self):
        return self.mode.split("-")[1] if self.mode.startswith(("kd-", "gcs-")) else None

    @property
    def uses_teacher(self):
        return self.kd_loss is not None

    @property
    def gated(self):
        return self.mode.startswith("gcs-")

    @property
    def target(self):
        return self.kd_target or KD_TARGETS.get(self.kd_loss)

    @property
    def initial_lr(self):
        if self.lr_initial is not None:
            return self.lr_initial
        return 0.01 if self.mode == "finetune" or self.uses_teacher else 0.1

    @property
    def ams(self):
        return losses.AmsParams(self.ams_scale, self.ams_margin)


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    lr: float
    gcs_open_fraction: float | None = None


@dataclass
class TrainResult:
    weights: WeightSet
    history: list = field(default_factory=list)
    steps: int = 0
    gates: list = field(default_factory=list)  # (open, cosine) per step in GCS modes

    def losses(self):
        return [e.mean_loss for e in self.history]


# --- gradients -----------------------------------------------------------------


def backprop(weights, cache, d_emb, d_out=None):
    """Parameter gradients from an upstream gradient on the embeddings.

    ``d_out`` is added as the direct gradient of the output (class weight)
    matrix, which the network forward does not touch.
    """
    config = weights.config
    grads = OrderedDict((name, None) for name in weights.names())
    grads["segment.w"] = cache["pooled"].T @ d_emb
    grads["output.w"] = np.zeros_like(weights["output.w"]) if d_out is None else d_out

    d_pooled = d_emb @ weights["segment.w"].T
    d = d_pooled.shape[1] // 2
    d_mean, d_std = d_pooled[:, :d], d_pooled[:, d:]
    centered = cache["centered"]
    t = centered.shape[1]
    # std below the floor is a constant: no gradient through it
    live = cache["raw_std"] > STD_FLOOR
    std_coef = np.where(live, d_std / cache["std"], 0.0) / t
    d_h = d_mean[:, None, :] / t + std_coef[:, None, :] * centered

    for i in range(len(config.layers), 0, -1):
        spec = config.layers[i - 1]
        xs = cache["spliced"][i - 1]
        if config.batchnorm:
            _, _, inv = cache["bn"][i - 1]
            if cache["train"]:
                xhat = cache["acts"][i]
                d_h = inv * (
                    d_h - d_h.mean(axis=(0, 1)) - xhat * (d_h * xhat).mean(axis=(0, 1))
                )
            else:
                d_h = d_h * inv
        d_a = d_h * (cache["pre"][i - 1] > 0.0)
        d_a2 = d_a.reshape(-1, d_a.shape[-1])
        xs2 = xs.reshape(-1, xs.shape[-1])
        if spec.low_rank:
            w_a, w_b = weights.layer(i)
            z = cache["mids"][i - 1]
            grads[f"layer{i}.w_b"] = z.reshape(-1, z.shape[-1]).T @ d_a2
            d_z = d_a @ w_b.T
            grads[f"layer{i}.w_a"] = xs2.T @ d_z.reshape(-1, d_z.shape[-1])
            if i > 1:
                d_xs = d_z @ w_a.T
        else:
            w = weights.layer(i)
            grads[f"layer{i}.w"] = xs2.T @ d_a2
            if i > 1:
                d_xs = d_a @ w.T
        if i == 1:
            break
        d_h = _unsplice(d_xs, spec.context, spec.in_dim, cache["acts"][i - 1].shape[1])
    return grads


def _unsplice(d_xs, context, n, t_in):
    if len(context) == 1:
        return d_xs
    lo = context[0]
    t_out = d_xs.shape[1]
    d_x = np.zeros((d_xs.shape[0], t_in, n))
    for j, o in enumerate(context):
        d_x[:, o - lo : o - lo + t_out] += d_xs[..., j * n : (j + 1) * n]
    return d_x


def flatten(grads):
    return np.concatenate([g.ravel() for g in grads.values()])


def _axpy(a, x, b, y):
    return OrderedDict((k, a * x[k] + b * y[k]) for k in x)


@dataclass
class StepOutput:
    loss: float
    grads: OrderedDict
    gate_open: bool | None = None
    cosine: float | None = None
    kd_loss: float | None = None
    ams_loss: float | None = None
    correct: int = 0
    bn_batch: list = field(default_factory=list)


def teacher_targets(teacher, x, tc):
    """Teacher embeddings and logits for a batch (constants, no gradient)."""
    emb = forward(teacher, x)
    logits = losses.cosine_logits(emb, teacher["output.w"], tc.ams_scale)
    return emb, logits


def backward(weights, x, labels, tc, teacher_out=None):
    """Loss and exact parameter gradients for one batch under ``tc.mode``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    labels = np.asarray(labels)
    emb, cache = forward(weights, x, cache=True, train=True)
    bn_batch = [(mu, var) for mu, var, _ in cache["bn"]]
    w_out = weights["output.w"]
    ams = losses.ams_loss(emb, w_out, labels, tc.ams)
    correct = int(np.sum(np.argmax(losses.cosine_logits(emb, w_out, 1.0), axis=1) == labels))
    g_ams = backprop(weights, cache, ams.grads["embeddings"], ams.grads["class_weights"])
    if not tc.uses_teacher:
        return StepOutput(ams.value, g_ams, ams_loss=ams.value, correct=correct, bn_batch=bn_batch)
    if teacher_out is None:
        raise ConfigurationError(f"mode {tc.mode} needs teacher outputs")

    t_emb, t_logits = teacher_out
    if tc.target == "logits":
        s_logits = losses.cosine_logits(emb, w_out, tc.ams_scale)
        if s_logits.shape != t_logits.shape:
            raise ShapeError(f"student logits {s_logits.shape} vs teacher {t_logits.shape}")
        kd = _kd_value(tc, s_logits, t_logits)
        d_e, d_w = losses.cosine_logits_backward(emb, w_out, kd.grads["student"], tc.ams_scale)
        g_kd = backprop(weights, cache, d_e, d_w)
    else:
        if emb.shape != t_emb.shape:
            raise ShapeError(f"student embeddings {emb.shape} vs teacher {t_emb.shape}")
        kd = _kd_value(tc, emb, t_emb)
        g_kd = backprop(weights, cache, kd.grads["student"])

    alpha = tc.alpha
    if tc.gated:
        gate = losses.gcs_gate(flatten(g_kd), flatten(g_ams), alpha)
        if gate.open:
            grads = _axpy(alpha, g_kd, 1.0 - alpha, g_ams)
            value = alpha * kd.value + (1.0 - alpha) * ams.value
        else:
            grads, value = g_ams, ams.value
        return StepOutput(value, grads, gate.open, gate.cosine, kd.value, ams.value, correct, bn_batch)
    grads = _axpy(alpha, g_kd, 1.0 - alpha, g_ams)
    value = alpha * kd.value + (1.0 - alpha) * ams.value
    return StepOutput(value, grads, None, None, kd.value, ams.value, correct, bn_batch)


def _kd_value(tc, student, teacher):
    if tc.kd_loss == "kld":
        return losses.kd_kld(student, teacher, tc.kd_temperature)
    return losses.KD_LOSSES[tc.kd_loss](student, teacher)


def loss_value(weights, x, labels, tc, teacher_out=None):
    """Scalar objective only (used by finite-difference checks)."""
    return backward(weights, x, labels, tc, teacher_out).loss


# --- optimizer -----------------------------------------------------------------


def sgd_step(weights, grads, lr, weight_decay=0.0):
    """``w <- w - lr * (g + weight_decay * w)``, returning a new WeightSet."""
    params = OrderedDict()
    for name, w in weights.params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} vs weight {w.shape}")
        params[name] = w - lr * (g + weight_decay * w)
    buffers = OrderedDict((k, v.copy()) for k, v in weights.buffers.items())
    return WeightSet(weights.config, params, buffers)


def update_running_stats(weights, bn_batch, momentum=BN_MOMENTUM):
    """Exponential moving average of batch-norm statistics, in place."""
    for i, (mu, var) in enumerate(bn_batch, start=1):
        for key, value in ((f"layer{i}.bn_mean", mu), (f"layer{i}.bn_var", var)):
            weights.buffers[key] = (1.0 - momentum) * weights.buffers[key] + momentum * value


def lr_schedule(step, total_steps, lr_initial, lr_final, kind="exponential"):
    if total_steps <= 0:
        return lr_initial
    frac = min(max(step / total_steps, 0.0), 1.0)
    if kind == "linear":
        return lr_initial + (lr_final - lr_initial) * frac
    if lr_initial == 0.0:
        return 0.0
    return lr_initial * (lr_final / lr_initial) ** frac


# --- driver ----------------------------------------------------------------------


def chunk_batches(features, labels, tc, epoch):
    """Shuffled fixed-length chunks for one epoch: yields ``(x, y)`` arrays.

    One random ``chunk_frames`` window per utterance (the whole utterance,
    cropped to the shortest, if they are shorter).
    """
    rng = substream(tc.seed, "batches", epoch)
    chunk = min(tc.chunk_frames, min(f.shape[0] for f in features))
    order = rng.permutation(len(features))
    starts = [int(rng.integers(0, features[i].shape[0] - chunk + 1)) for i in order]
    for b in range(0, len(order), tc.batch_size):
        idx = order[b : b + tc.batch_size]
        x = np.stack([features[i][s : s + chunk] for i, s in zip(idx, starts[b : b + tc.batch_size])])
        yield x, np.asarray(labels)[idx]


def train(model_config, features, labels, tc, teacher=None, initial=None, callback=None):
    """Train a network on pre-extracted features.

    ``initial`` continues from given weights (required for ``finetune``);
    otherwise weights are drawn from the ``init`` substream of ``tc.seed``.
    KD/GCS modes need a frozen ``teacher``. Stops early once the epoch
    loss improves by less than 0.1% for three epochs in a row.
    """
    if tc.uses_teacher and teacher is None:
        raise ConfigurationError(f"mode {tc.mode} requires a teacher model")
    if tc.mode == "finetune" and initial is None:
        raise ConfigurationError("finetune mode requires initial weights")
    if len(features) == 0:
        raise ConfigurationError("empty training corpus")
    labels = np.asarray(labels)
    if labels.max() >= model_config.num_speakers:
        raise ConfigurationError(
            f"label {labels.max()} out of range for num_speakers={model_config.num_speakers}"
        )
    if teacher is not None and tc.uses_teacher:
        if teacher.config.input_dim != model_config.input_dim:
            raise ShapeError(
                f"teacher feature dim {teacher.config.input_dim} != student {model_config.input_dim}"
            )
    if initial is not None:
        weights = initial.copy()
        if weights.config != model_config:
            raise ConfigurationError("initial weights do not match the model config")
    else:
        weights = init_weights(model_config, substream(tc.seed, "init"), tc.init)

    steps_per_epoch = -(-len(features) // tc.batch_size)
    total_steps = steps_per_epoch * tc.epochs
    lr0 = tc.initial_lr
    lr_end = tc.lr_final if lr0 > 0 else 0.0
    result = TrainResult(weights)
    step = 0
    stale = 0
    for epoch in range(tc.epochs):
        total, count, opened, gated = 0.0, 0, 0, 0
        for x, y in chunk_batches(features, labels, tc, epoch):
            lr = lr_schedule(step, total_steps, lr0, lr_end, tc.schedule)
            t_out = teacher_targets(teacher, x, tc) if tc.uses_teacher else None
            out = backward(weights, x, y, tc, t_out)
            weights = sgd_step(weights, out.grads, lr, tc.weight_decay)
            update_running_stats(weights, out.bn_batch)
            total += out.loss * len(y)
            count += len(y)
            if out.gate_open is not None:
                result.gates.append((out.gate_open, out.cosine))
                gated += 1
                opened += int(out.gate_open)
            step += 1
        stats = EpochStats(
            epoch + 1,
            total / count,
            lr_schedule(step, total_steps, lr0, lr_end, tc.schedule),
            opened / gated if gated else None,
        )
        if not np.isfinite(stats.mean_loss):
            raise NumericalError(f"training diverged at epoch {epoch + 1}")
        log.info("epoch %d loss %.5f lr %.2e", stats.epoch, stats.mean_loss, stats.lr)
        if result.history:
            prev = result.history[-1].mean_loss
            stale = stale + 1 if prev - stats.mean_loss < CONVERGENCE_REL * abs(prev) else 0
        result.history.append(stats)
        if callback is not None:
            callback(stats, weights)
        if tc.early_stop and stale >= CONVERGENCE_PATIENCE:
            break
    result.weights = weights
    result.steps = step
    return result


def accuracy(weights, features, labels):
    """Closed-set identification accuracy of cosine scoring against the output layer."""
    w = weights["output.w"] / np.linalg.norm(weights["output.w"], axis=0)
    hits = 0
    for f, y in zip(features, labels):
        hits += int(np.argmax(forward(weights, f) @ w) == y)
    return hits / len(features)


def write_loss_csv(path, history):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "mean_loss", "lr", "gcs_open_fraction"])
        for e in history:
            writer.writerow(
                [e.epoch, repr(e.mean_loss), repr(e.lr), "" if e.gcs_open_fraction is None else repr(e.gcs_open_fraction)]
            )

