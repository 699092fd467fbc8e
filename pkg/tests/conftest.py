import numpy as np
import pytest

from lrxvec import model
from lrxvec.rng import substream

TINY_CONTEXTS = ((-1, 0, 1), (-1, 1), (0,), (0,), (0,))


def tiny_config(num_speakers=3, dims=(6, 5, 4, 6, 4), ranks=None, batchnorm=True, input_dim=3, embed_dim=5):
    ranks = ranks or {}
    layers = []
    n = input_dim
    for i, (ctx, m) in enumerate(zip(TINY_CONTEXTS, dims), start=1):
        layers.append(model.LayerSpec(ctx, n, m, ranks.get(i)))
        n = m
    return model.ModelConfig(tuple(layers), num_speakers=num_speakers, embed_dim=embed_dim, batchnorm=batchnorm)


def tiny_weights(config, seed=0, random_buffers=False):
    w = model.init_weights(config, substream(seed, "tiny"))
    if random_buffers:
        rng = substream(seed, "buffers")
        for name, arr in w.buffers.items():
            w.buffers[name] = rng.uniform(0.5, 1.5, arr.shape) if name.endswith("var") else rng.normal(0, 0.3, arr.shape)
    return w


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = []


@pytest.fixture
def criterion(capsys):
    """``criterion(n, ok, detail)`` records one acceptance line and fails the test if not ``ok``."""

    def record(n, ok, detail):
        line = f"acceptance {n}: {'PASS' if ok else 'FAIL'} - {detail}"
        _ACCEPTANCE.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
