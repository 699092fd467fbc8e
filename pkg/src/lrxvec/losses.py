"""Training objectives with analytic gradients.

Every loss returns a :class:`LossOutput` whose ``grads`` dict maps the name
of each differentiable input to a gradient of the same shape. Teacher
inputs are constants and get no gradient.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericalError, ShapeError

AMS_SCALE = 30.0
AMS_MARGIN = 0.2
GCS_ALPHA = 0.5


@dataclass(frozen=True)
class LossOutput:
    value: float
    grads: dict = field(default_factory=dict)


@dataclass(frozen=True)
class AmsParams:
    scale: float = AMS_SCALE
    margin: float = AMS_MARGIN

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigurationError(f"AM-softmax scale must be positive, got {self.scale}")
        if self.margin < 0:
            raise ConfigurationError(f"AM-softmax margin must be >= 0, got {self.margin}")


def _unit(x, axis, what, allow_zero=False):
    norm = np.linalg.norm(x, axis=axis, keepdims=True)
    if np.any(norm == 0.0):
        if not allow_zero:
            raise NumericalError(f"{what} has a zero-norm vector")
        # zero vectors have no direction: cosine 0 and, like ReLU at 0, a zero subgradient
        norm = np.where(norm == 0.0, np.inf, norm)
    return x / norm, norm


def _unit_backward(g, unit, norm, axis):
    """Gradient through ``x -> x / |x|`` given the upstream ``g``."""
    return (g - np.sum(g * unit, axis=axis, keepdims=True) * unit) / norm


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cosine_logits(embeddings, class_weights, scale=AMS_SCALE):
    """``scale * cos(e_i, w_j)`` for unit-normalized rows of E and columns of W."""
    e_hat, _ = _unit(embeddings, 1, "embeddings", allow_zero=True)
    w_hat, _ = _unit(class_weights, 0, "class weights", allow_zero=True)
    return scale * (e_hat @ w_hat)


def cosine_logits_backward(embeddings, class_weights, d_logits, scale=AMS_SCALE):
    """Map a gradient on :func:`cosine_logits` back to ``(d_embeddings, d_class_weights)``."""
    e_hat, e_norm = _unit(embeddings, 1, "embeddings", allow_zero=True)
    w_hat, w_norm = _unit(class_weights, 0, "class weights", allow_zero=True)
    d_cos = scale * d_logits
    d_e = _unit_backward(d_cos @ w_hat.T, e_hat, e_norm, 1)
    d_w = _unit_backward(e_hat.T @ d_cos, w_hat, w_norm, 0)
    return d_e, d_w


def ams_loss(embeddings, class_weights, labels, params=AmsParams()):
    """Additive-margin softmax: cross-entropy on ``s * (cos - m * onehot)``."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    class_weights = np.asarray(class_weights, dtype=np.float64)
    labels = np.asarray(labels)
    b, n_classes = embeddings.shape[0], class_weights.shape[1]
    if embeddings.shape[1] != class_weights.shape[0]:
        raise ShapeError(f"embedding dim {embeddings.shape[1]} vs class weights {class_weights.shape}")
    if labels.shape != (b,) or np.any(labels < 0) or np.any(labels >= n_classes):
        raise ConfigurationError(f"labels must be {b} integers in [0, {n_classes})")
    onehot = np.zeros((b, n_classes))
    onehot[np.arange(b), labels] = 1.0
    z = cosine_logits(embeddings, class_weights, params.scale) - params.scale * params.margin * onehot
    logp = _log_softmax(z)
    value = float(-logp[np.arange(b), labels].mean())
    d_z = (np.exp(logp) - onehot) / b
    d_e, d_w = cosine_logits_backward(embeddings, class_weights, d_z, params.scale)
    return LossOutput(value, {"embeddings": d_e, "class_weights": d_w})


def _check_pair(student, teacher):
    student = np.asarray(student, dtype=np.float64)
    teacher = np.asarray(teacher, dtype=np.float64)
    if student.shape != teacher.shape:
        raise ShapeError(f"student {student.shape} and teacher {teacher.shape} shapes differ")
    return student, teacher


def kd_kld(student_logits, teacher_logits, temperature=1.0):
    """Mean over the batch of KL(softmax(teacher) || softmax(student))."""
    s, t = _check_pair(student_logits, teacher_logits)
    log_ps = _log_softmax(s / temperature)
    log_pt = _log_softmax(t / temperature)
    pt = np.exp(log_pt)
    b = s.shape[0]
    value = float(np.sum(pt * (log_pt - log_ps)) / b)
    grad = (np.exp(log_ps) - pt) / (b * temperature)
    return LossOutput(max(value, 0.0), {"student": grad})


def kd_mse(student, teacher):
    """Mean over batch and dimensions of the squared difference."""
    s, t = _check_pair(student, teacher)
    diff = s - t
    return LossOutput(float(np.mean(diff**2)), {"student": 2.0 * diff / diff.size})


def kd_cos(student, teacher):
    """Mean over the batch of ``1 - cos(student_i, teacher_i)``."""
    s, t = _check_pair(student, teacher)
    s_hat, s_norm = _unit(s, 1, "student")
    t_hat, _ = _unit(t, 1, "teacher")
    cos = np.sum(s_hat * t_hat, axis=1)
    b = s.shape[0]
    grad = _unit_backward(-t_hat / b, s_hat, s_norm, 1)
    return LossOutput(float(np.mean(1.0 - cos)), {"student": grad})


KD_LOSSES = {"kld": kd_kld, "mse": kd_mse, "cos": kd_cos}


def combined_loss(l_kd, l_ams, alpha):
    """``alpha * L_KD + (1 - alpha) * L_AMS``; gradients with the same key add, others scale."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha {alpha} outside [0, 1]")
    grads = {}
    for key in dict.fromkeys(list(l_kd.grads) + list(l_ams.grads)):
        parts = []
        if key in l_kd.grads:
            parts.append(alpha * l_kd.grads[key])
        if key in l_ams.grads:
            parts.append((1.0 - alpha) * l_ams.grads[key])
        if len(parts) == 2 and parts[0].shape != parts[1].shape:
            raise ShapeError(f"gradient {key!r}: shapes {parts[0].shape} and {parts[1].shape}")
        grads[key] = parts[0] + parts[1] if len(parts) == 2 else parts[0]
    return LossOutput(alpha * l_kd.value + (1.0 - alpha) * l_ams.value, grads)


@dataclass(frozen=True)
class GateDecision:
    open: bool
    cosine: float
    grad: np.ndarray


def gradient_cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def gcs_gate(grad_kd, grad_ams, alpha=GCS_ALPHA):
    """Use the distillation gradient only when it points along the task gradient.

    Open (cosine strictly positive): ``alpha * g_kd + (1 - alpha) * g_ams``.
    Closed (cosine <= 0, or a zero gradient): ``g_ams`` unchanged.
    """
    grad_kd = np.asarray(grad_kd, dtype=np.float64).ravel()
    grad_ams = np.asarray(grad_ams, dtype=np.float64).ravel()
    if grad_kd.shape != grad_ams.shape:
        raise ShapeError(f"gradient lengths differ: {grad_kd.size} vs {grad_ams.size}")
    cos = gradient_cosine(grad_kd, grad_ams)
    if cos > 0.0:
        return GateDecision(True, cos, alpha * grad_kd + (1.0 - alpha) * grad_ams)
    return GateDecision(False, cos, grad_ams)
