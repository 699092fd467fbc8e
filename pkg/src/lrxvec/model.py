"""x-vector / lrx-vector network: topology, forward pass, parameter accounting, weight files.

A network is five TDNN layers (ReLU, no bias), statistics pooling, and an
affine Segment layer whose pre-activation output is the speaker embedding.
The Output layer holds the per-speaker class weights used by the
AM-softmax objective during training only.

With ``batchnorm`` enabled (the default), each TDNN ReLU output is
standardized per dimension without any affine parameters: batch statistics
while training, running statistics otherwise. The running statistics are
buffers, not weights, and do not enter parameter counts.

Layer weights are stored in ``(c * n) x m`` orientation so a spliced frame
row vector ``x_t`` maps to ``x_t @ W``. A low-rank layer stores the pair
``W_a`` ``(c * n) x k`` and ``W_b`` ``k x m``.
"""

import hashlib
import struct
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, CorruptionError, ShapeError

STD_FLOOR = 1e-10
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
WEIGHT_MAGIC = b"LRXW"
WEIGHT_VERSION = 1

TABLE1_CONTEXTS = ((-2, -1, 0, 1, 2), (-2, 0, 2), (-2, 0, 2), (0,), (0,))
# k2 = k3 = 0.5 n, k4 = k5 = 0.75 n
DEFAULT_RANK_RATIOS = {2: 0.5, 3: 0.5, 4: 0.75, 5: 0.75}


@dataclass(frozen=True)
class LayerSpec:
    context: tuple
    in_dim: int
    out_dim: int
    rank: int | None = None

    def __post_init__(self):
        ctx = tuple(int(c) for c in self.context)
        object.__setattr__(self, "context", ctx)
        if not ctx or any(b <= a for a, b in zip(ctx, ctx[1:])):
            raise ConfigurationError(f"context offsets must be strictly increasing, got {ctx}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigurationError(f"layer dims must be positive, got {self.in_dim}x{self.out_dim}")
        if self.rank is not None and not 1 <= self.rank <= min(self.fan_in, self.out_dim):
            raise ConfigurationError(
                f"rank {self.rank} outside [1, {min(self.fan_in, self.out_dim)}] "
                f"for a ({self.fan_in} x {self.out_dim}) layer"
            )

    @property
    def width(self):
        return len(self.context)

    @property
    def span(self):
        return self.context[-1] - self.context[0]

    @property
    def fan_in(self):
        return self.width * self.in_dim

    @property
    def low_rank(self):
        return self.rank is not None

    def num_params(self):
        if self.rank is None:
            return self.fan_in * self.out_dim
        return self.fan_in * self.rank + self.rank * self.out_dim


@dataclass(frozen=True)
class ModelConfig:
    layers: tuple
    num_speakers: int
    embed_dim: int = 256
    width_factor: float = 1.0
    batchnorm: bool = True

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if len(layers) != 5:
            raise ConfigurationError(f"expected 5 TDNN layers, got {len(layers)}")
        if layers[0].low_rank:
            raise ConfigurationError("layer1 must be full-rank")
        for i, (prev, cur) in enumerate(zip(layers, layers[1:]), start=2):
            if cur.in_dim != prev.out_dim:
                raise ConfigurationError(
                    f"layer{i} in_dim {cur.in_dim} does not match layer{i - 1} out_dim {prev.out_dim}"
                )
        if self.num_speakers < 1:
            raise ConfigurationError("num_speakers must be >= 1")
        if self.embed_dim < 1:
            raise ConfigurationError("embed_dim must be >= 1")
        if not 0.0 < self.width_factor <= 1.0:
            raise ConfigurationError(f"width_factor {self.width_factor} outside (0, 1]")

    @property
    def input_dim(self):
        return self.layers[0].in_dim

    @property
    def pooled_dim(self):
        return 2 * self.layers[-1].out_dim

    @property
    def min_frames(self):
        # every context must fit and pooling needs two frames
        return sum(layer.span for layer in self.layers) + 2

    def digest(self):
        return hashlib.sha256(config_to_text(self).encode()).hexdigest()[:16]


def default_config(num_speakers, input_dim=40, hidden_dim=512, embed_dim=256, ranks=None, batchnorm=True):
    """Table-1 topology; ``ranks`` maps layer number (2-5) to an absolute rank."""
    ranks = ranks or {}
    layers = []
    n = input_dim
    for i, ctx in enumerate(TABLE1_CONTEXTS, start=1):
        layers.append(LayerSpec(ctx, n, hidden_dim, ranks.get(i)))
        n = hidden_dim
    return ModelConfig(tuple(layers), num_speakers=num_speakers, embed_dim=embed_dim, batchnorm=batchnorm)


def resolve_ranks(config, ranks):
    """Turn ``{layer: k}`` with int (absolute) or float < 1 (ratio of n) values into ints."""
    out = {}
    for i, k in ranks.items():
        if not 2 <= i <= 5:
            raise ConfigurationError(f"layer{i} cannot be low-rank; only layers 2-5")
        n = config.layers[i - 1].in_dim
        if isinstance(k, float) and k <= 1.0:
            k = int(round(k * n))
        out[i] = int(k)
    return out


def with_ranks(config, ranks):
    """Copy of ``config`` with the given layers made low-rank."""
    ranks = resolve_ranks(config, ranks)
    layers = [replace(layer, rank=ranks.get(i, layer.rank)) for i, layer in enumerate(config.layers, start=1)]
    return replace(config, layers=tuple(layers))


def full_rank(config):
    return replace(config, layers=tuple(replace(layer, rank=None) for layer in config.layers))


def _round8(x):
    return int(8 * round(x / 8.0))


def scale_config(config, factor):
    """Scale every TDNN output dim by ``factor`` (rounded to a multiple of 8).

    Ranks keep their ratio to the layer input dim; embed_dim is unchanged.
    """
    if not 0.0 < factor <= 1.0:
        raise ConfigurationError(f"scale factor {factor} outside (0, 1]")
    if factor == 1.0:
        return config
    layers = []
    n = config.input_dim
    for i, layer in enumerate(config.layers, start=1):
        m = _round8(layer.out_dim * factor)
        if m < 8:
            raise ConfigurationError(f"layer{i} dim {layer.out_dim} x {factor} rounds below 8")
        rank = None
        if layer.rank is not None:
            rank = max(2, int(round(layer.rank / layer.in_dim * n)))
            rank = min(rank, len(layer.context) * n, m)
        layers.append(LayerSpec(layer.context, n, m, rank))
        n = m
    return replace(config, layers=tuple(layers), width_factor=config.width_factor * factor)


def factor_for_budget(config, target, tol=1e-3):
    """Largest scale factor whose ``count_params`` total does not exceed ``target``."""
    lo, hi = 1e-3, 1.0
    if count_params(config)["total"] <= target:
        return 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        try:
            total = count_params(scale_config(config, mid))["total"]
        except ConfigurationError:
            lo = mid
            continue
        if total > target:
            hi = mid
        else:
            lo = mid
        if hi - lo < tol:
            break
    return lo


def count_params(config):
    """Per-layer weight counts (no biases anywhere) plus ``total``."""
    counts = OrderedDict()
    for i, layer in enumerate(config.layers, start=1):
        counts[f"layer{i}"] = layer.num_params()
    counts["segment"] = config.pooled_dim * config.embed_dim
    counts["output"] = config.embed_dim * config.num_speakers
    counts["total"] = sum(counts.values())
    return counts


def param_shapes(config):
    shapes = OrderedDict()
    for i, layer in enumerate(config.layers, start=1):
        if layer.low_rank:
            shapes[f"layer{i}.w_a"] = (layer.fan_in, layer.rank)
            shapes[f"layer{i}.w_b"] = (layer.rank, layer.out_dim)
        else:
            shapes[f"layer{i}.w"] = (layer.fan_in, layer.out_dim)
    shapes["segment.w"] = (config.pooled_dim, config.embed_dim)
    shapes["output.w"] = (config.embed_dim, config.num_speakers)
    return shapes


def buffer_shapes(config):
    shapes = OrderedDict()
    if config.batchnorm:
        for i, layer in enumerate(config.layers, start=1):
            shapes[f"layer{i}.bn_mean"] = (layer.out_dim,)
            shapes[f"layer{i}.bn_var"] = (layer.out_dim,)
    return shapes


def _default_buffers(config):
    return OrderedDict(
        (name, np.zeros(shape) if name.endswith("mean") else np.ones(shape))
        for name, shape in buffer_shapes(config).items()
    )


def _check_arrays(arrays, expected, kind):
    if list(arrays) != list(expected):
        raise ShapeError(f"{kind} names {list(arrays)} do not match config {list(expected)}")
    for name, shape in expected.items():
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != shape:
            raise ShapeError(f"{name}: shape {arr.shape}, config requires {shape}")
        arrays[name] = arr


@dataclass
class WeightSet:
    """All trainable matrices of one network, keyed in declaration order,
    plus the batch-norm running statistics in ``buffers``."""

    config: ModelConfig
    params: OrderedDict = field(default_factory=OrderedDict)
    buffers: OrderedDict | None = None

    def __post_init__(self):
        _check_arrays(self.params, param_shapes(self.config), "parameter")
        if self.buffers is None:
            self.buffers = _default_buffers(self.config)
        _check_arrays(self.buffers, buffer_shapes(self.config), "buffer")

    def __getitem__(self, name):
        return self.params[name]

    def names(self):
        return list(self.params)

    def copy(self):
        return WeightSet(
            self.config,
            OrderedDict((k, v.copy()) for k, v in self.params.items()),
            OrderedDict((k, v.copy()) for k, v in self.buffers.items()),
        )

    def bn_stats(self, i):
        return self.buffers[f"layer{i}.bn_mean"], self.buffers[f"layer{i}.bn_var"]

    def layer(self, i):
        """Weights of TDNN layer ``i`` (1-based): an array or a ``(w_a, w_b)`` pair."""
        if self.config.layers[i - 1].low_rank:
            return self.params[f"layer{i}.w_a"], self.params[f"layer{i}.w_b"]
        return self.params[f"layer{i}.w"]

    def num_params(self):
        return sum(v.size for v in self.params.values())


def init_weights(config, rng, scheme="he"):
    """Random initialization.

    ``he``: N(0, 2/fan_in) for ReLU layers; low-rank pairs get W_a ~ N(0, 2/fan_in)
    and W_b ~ N(0, 1/k) so the product keeps the same variance.
    ``orthogonal``: orthonormal rows/columns (flat singular spectrum).
    """
    params = OrderedDict()
    for name, (rows, cols) in param_shapes(config).items():
        if scheme == "orthogonal":
            q, r = np.linalg.qr(rng.standard_normal((max(rows, cols), min(rows, cols))))
            q = q * np.sign(np.diag(r))
            w = q if rows >= cols else q.T
        elif scheme == "he":
            if name.endswith("w_b"):
                std = np.sqrt(1.0 / rows)
            elif name.startswith("layer"):
                std = np.sqrt(2.0 / rows)
            else:
                std = np.sqrt(1.0 / rows)
            w = rng.standard_normal((rows, cols)) * std
        else:
            raise ConfigurationError(f"unknown init scheme {scheme!r}")
        params[name] = w
    return WeightSet(config, params)


def splice(x, context):
    """Concatenate context frames: ``(B, T, n)`` -> ``(B, T - span, c * n)``."""
    lo, hi = context[0], context[-1]
    t_out = x.shape[1] - (hi - lo)
    if len(context) == 1:
        return x
    return np.concatenate([x[:, o - lo : o - lo + t_out] for o in context], axis=-1)


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 2 else (x, False)


def forward_tdnn(spec, w, x):
    """One TDNN layer: ReLU(splice(x) @ W), or ReLU(splice(x) @ W_a @ W_b) for a pair.

    Accepts ``(T, n)`` or ``(B, T, n)`` input.
    """
    x, single = _batched(x)
    if x.shape[1] < spec.span + 1:
        raise ShapeError(f"TDNN layer needs at least {spec.span + 1} frames, got {x.shape[1]}")
    if x.shape[2] != spec.in_dim:
        raise ShapeError(f"TDNN layer expects {spec.in_dim}-dim frames, got {x.shape[2]}")
    xs = splice(x, spec.context)
    if isinstance(w, tuple):
        h = (xs @ w[0]) @ w[1]
    else:
        h = xs @ w
    y = np.maximum(h, 0.0)
    return y[0] if single else y


def stats_pool(seq):
    """Concatenated per-dimension mean and population std (floored)."""
    seq, single = _batched(seq)
    if seq.shape[1] < 2:
        raise ShapeError(f"stats pooling needs at least 2 frames, got {seq.shape[1]}")
    mean = seq.mean(axis=1)
    std = np.maximum(np.sqrt(((seq - mean[:, None]) ** 2).mean(axis=1)), STD_FLOOR)
    out = np.concatenate([mean, std], axis=-1)
    return out[0] if single else out


def batch_norm(h, mean, var):
    inv = 1.0 / np.sqrt(var + BN_EPS)
    return (h - mean) * inv, inv


def forward(weights, x, cache=False, train=False):
    """Batched forward to the embedding. Returns ``embeddings`` or ``(embeddings, cache)``.

    ``train`` normalizes with batch statistics (recorded in the cache as
    ``bn_batch``); otherwise the running statistics in ``weights.buffers``
    are used. The cache records every intermediate needed for
    backpropagation.
    """
    config = weights.config
    x, single = _batched(x)
    if x.shape[1] < config.min_frames:
        raise ShapeError(f"utterance has {x.shape[1]} frames; this topology needs at least {config.min_frames}")
    if x.shape[2] != config.input_dim:
        raise ShapeError(f"expected {config.input_dim}-dim features, got {x.shape[2]}")
    acts = [x]
    spliced, mids, pre, bn = [], [], [], []
    h = x
    for i, spec in enumerate(config.layers, start=1):
        xs = splice(h, spec.context)
        w = weights.layer(i)
        if spec.low_rank:
            z = xs @ w[0]
            a = z @ w[1]
        else:
            z = None
            a = xs @ w
        h = np.maximum(a, 0.0)
        if config.batchnorm:
            if train:
                mu = h.mean(axis=(0, 1))
                var = ((h - mu) ** 2).mean(axis=(0, 1))
            else:
                mu, var = weights.bn_stats(i)
            h, inv = batch_norm(h, mu, var)
            bn.append((mu, var, inv))
        spliced.append(xs)
        mids.append(z)
        pre.append(a)
        acts.append(h)
    mean = h.mean(axis=1)
    centered = h - mean[:, None]
    raw_std = np.sqrt((centered**2).mean(axis=1))
    std = np.maximum(raw_std, STD_FLOOR)
    pooled = np.concatenate([mean, std], axis=-1)
    emb = pooled @ weights["segment.w"]
    if single:
        emb = emb[0]
    if not cache:
        return emb
    return emb, {
        "acts": acts,
        "spliced": spliced,
        "mids": mids,
        "pre": pre,
        "centered": centered,
        "raw_std": raw_std,
        "std": std,
        "pooled": pooled,
        "bn": bn,
        "train": train,
    }


def embed(weights, features):
    """Speaker embedding of one whole utterance ``(T, input_dim)``."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeError(f"features must be (T, d), got shape {features.shape}")
    return forward(weights, features)


# --- text config -----------------------------------------------------------

_TOP_KEYS = ("input_dim", "num_speakers", "embed_dim", "width_factor", "batchnorm")


def config_to_text(config):
    lines = [
        f"input_dim={config.input_dim}",
        f"num_speakers={config.num_speakers}",
        f"embed_dim={config.embed_dim}",
        f"width_factor={config.width_factor!r}",
        f"batchnorm={int(config.batchnorm)}",
    ]
    for i, layer in enumerate(config.layers, start=1):
        lines.append(f"layer{i}.context={','.join(str(c) for c in layer.context)}")
        lines.append(f"layer{i}.dim={layer.out_dim}")
        if layer.rank is not None:
            lines.append(f"layer{i}.rank={layer.rank}")
    return "\n".join(lines) + "\n"


def parse_key_values(text, source="config"):
    values = OrderedDict()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def config_from_text(text, source="config", **overrides):
    """Parse the flat ``key=value`` model config format.

    Layers default to the Table-1 contexts and 512 dims; unknown keys are
    rejected by name.
    """
    values = parse_key_values(text, source)
    values.update({k: str(v) for k, v in overrides.items() if v is not None})
    allowed = set(_TOP_KEYS)
    for i in range(1, 6):
        allowed |= {f"layer{i}.context", f"layer{i}.dim", f"layer{i}.rank"}
    unknown = [k for k in values if k not in allowed]
    if unknown:
        raise ConfigurationError(f"{source}: unknown config keys: {', '.join(unknown)}")
    try:
        n = int(values.get("input_dim", 40))
        layers = []
        for i in range(1, 6):
            ctx = values.get(f"layer{i}.context")
            ctx = tuple(int(c) for c in ctx.split(",")) if ctx else TABLE1_CONTEXTS[i - 1]
            m = int(values.get(f"layer{i}.dim", 512))
            rank = values.get(f"layer{i}.rank")
            layers.append(LayerSpec(ctx, n, m, int(rank) if rank else None))
            n = m
        if "num_speakers" not in values:
            raise ConfigurationError(f"{source}: num_speakers is required")
        return ModelConfig(
            tuple(layers),
            num_speakers=int(values["num_speakers"]),
            embed_dim=int(values.get("embed_dim", 256)),
            width_factor=float(values.get("width_factor", 1.0)),
            batchnorm=_parse_bool(values.get("batchnorm", "1"), "batchnorm"),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"{source}: {exc}") from exc


def _parse_bool(value, key):
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"{key}: expected a boolean, got {value!r}")


def load_config(path, **overrides):
    with open(path) as f:
        return config_from_text(f.read(), source=str(path), **overrides)


# --- weight files ------------------------------------------------------------


def save_weights(path, weights):
    """Write ``LRXW`` header and embedded config text, then float64 LE blobs:
    parameters in declaration order followed by batch-norm buffers."""
    text = config_to_text(weights.config).encode()
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        f.write(struct.pack("<II", WEIGHT_VERSION, len(text)))
        f.write(text)
        for arr in list(weights.params.values()) + list(weights.buffers.values()):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_weights(path, config=None):
    """Read a weight file; if ``config`` is given the file must match its shapes."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != WEIGHT_MAGIC:
        raise CorruptionError(f"{path}: not an LRXW weight file")
    version, text_len = struct.unpack("<II", data[4:12])
    if version != WEIGHT_VERSION:
        raise CorruptionError(f"{path}: unsupported weight file version {version}")
    if len(data) < 12 + text_len:
        raise CorruptionError(f"{path}: truncated config header")
    try:
        header = data[12 : 12 + text_len].decode()
    except UnicodeDecodeError as exc:
        raise CorruptionError(f"{path}: unreadable config header") from exc
    stored = config_from_text(header, source=f"{path}[header]")
    shapes = param_shapes(stored)
    buffers = buffer_shapes(stored)
    offset = 12 + text_len
    need = offset + 8 * sum(int(np.prod(sh)) for sh in list(shapes.values()) + list(buffers.values()))
    if len(data) != need:
        raise CorruptionError(f"{path}: expected {need} bytes, found {len(data)} (truncated or padded)")
    if config is not None:
        want = param_shapes(config)
        for name in list(want) + [n for n in shapes if n not in want]:
            if shapes.get(name) != want.get(name):
                raise ShapeError(
                    f"{path}: {name.split('.')[0]} ({name}) has shape {shapes.get(name)}, "
                    f"expected {want.get(name)}"
                )
    arrays = []
    for sh in list(shapes.values()) + list(buffers.values()):
        size = 8 * int(np.prod(sh))
        arrays.append(np.frombuffer(data[offset : offset + size], dtype="<f8").reshape(sh).astype(np.float64))
        offset += size
    params = OrderedDict(zip(shapes, arrays[: len(shapes)]))
    bufs = OrderedDict(zip(buffers, arrays[len(shapes) :]))
    return WeightSet(stored, params, bufs)
