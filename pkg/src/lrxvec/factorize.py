"""SVD compression of trained networks and singular-spectrum reporting."""

import csv
import re
from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np

from . import linalg
from .errors import ConfigurationError
from .model import WeightSet, resolve_ranks, with_ranks
from .trainer import TrainConfig, train

LOW_RANK_LAYERS = (2, 3, 4, 5)


def default_ranks():
    return {2: 0.5, 3: 0.5, 4: 0.75, 5: 0.75}


def parse_ranks(text):
    """``"l2=0.5,l3=256"`` -> ``{2: 0.5, 3: 256}``; values <= 1 with a dot are ratios of n."""
    ranks = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        try:
            key, value = (s.strip() for s in item.split("="))
            layer = int(re.fullmatch(r"(?:l|layer)?(\d+)", key.lower()).group(1))
            ranks[layer] = float(value) if "." in value else int(value)
        except (ValueError, AttributeError) as exc:
            raise ConfigurationError(f"bad rank item {item!r}; expected e.g. l2=0.5 or l4=384") from exc
    return ranks


def check_ranks(config, ranks, strict=True):
    """Validate resolved ranks for layers 2-5.

    ``strict`` applies the compression bound 1 < k <= min(c*n, m); otherwise
    any 1 <= k <= min(c*n, m) is accepted (rank-1 analysis).
    """
    ranks = resolve_ranks(config, ranks)
    for i, k in ranks.items():
        layer = config.layers[i - 1]
        upper = min(layer.fan_in, layer.out_dim)
        lower = 2 if strict else 1
        if not lower <= k <= upper:
            raise ConfigurationError(f"layer{i} rank {k} outside [{lower}, {upper}]")
    return ranks


def factorize_model(weights, ranks, strict=True, backend=None):
    """Replace each targeted full-rank layer by its truncated-SVD pair.

    Singular values are absorbed into ``W_a``. Layer 1, Segment and Output
    are copied unchanged.
    """
    config = weights.config
    ranks = check_ranks(config, ranks, strict)
    for i in ranks:
        if config.layers[i - 1].low_rank:
            raise ConfigurationError(f"layer{i} is already low-rank")
    new_config = with_ranks(config, ranks)
    params = OrderedDict()
    for name, arr in weights.params.items():
        layer = name.split(".")[0]
        i = int(layer[5:]) if layer.startswith("layer") else None
        if i in ranks:
            w_a, w_b = linalg.truncate(linalg.svd(arr, backend=backend), ranks[i])
            params[f"layer{i}.w_a"] = w_a
            params[f"layer{i}.w_b"] = w_b
        else:
            params[name] = arr.copy()
    buffers = OrderedDict((k, v.copy()) for k, v in weights.buffers.items())
    return WeightSet(new_config, params, buffers)


@dataclass(frozen=True)
class LayerSpectrum:
    name: str
    sigma: np.ndarray

    @property
    def cumulative_energy(self):
        energy = np.cumsum(self.sigma**2)
        return energy / energy[-1] if energy[-1] > 0 else np.zeros_like(energy)


def singular_spectrum(weights, layers=LOW_RANK_LAYERS, backend=None):
    """Descending singular values of each full-rank TDNN matrix in ``layers``."""
    out = []
    for i in layers:
        w = weights.layer(i)
        if isinstance(w, tuple):
            raise ConfigurationError(f"layer{i} is low-rank; spectrum needs a full-rank model")
        out.append(LayerSpectrum(f"layer{i}", linalg.svd(w, backend=backend).sigma))
    return out


def write_spectrum_csv(path, spectra):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["layer_name", "index", "sigma", "cumulative_energy_fraction"])
        for s in spectra:
            for idx, (sig, cum) in enumerate(zip(s.sigma, s.cumulative_energy)):
                writer.writerow([s.name, idx, repr(float(sig)), repr(float(cum))])


def svd_finetune(factorized, features, labels, tc=None):
    """Fine-tune a factorized network with the plain AM-softmax objective (both factors train)."""
    tc = replace(tc or TrainConfig(), mode="finetune")
    if tc.epochs == 0:
        return factorized.copy()
    return train(factorized.config, features, labels, tc, initial=factorized).weights
