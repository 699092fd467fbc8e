import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrxvec import linalg
from lrxvec.errors import ConfigurationError, NumericalError

BACKENDS = linalg.available_backends()


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def residuals(a, s):
    recon = np.linalg.norm(s.reconstruct() - a) / max(1.0, np.linalg.norm(a))
    ortho_u = np.linalg.norm(s.u.T @ s.u - np.eye(s.rank))
    ortho_v = np.linalg.norm(s.vt @ s.vt.T - np.eye(s.rank))
    return recon, ortho_u, ortho_v


def test_matmul_identity(rng):
    a = rng.standard_normal((3, 4))
    assert np.array_equal(linalg.matmul(np.eye(3), a), a)


def test_matmul_hand_example():
    out = linalg.matmul([[1, 2], [3, 4]], [[0], [1]])
    assert out.tolist() == [[2.0], [4.0]]


def test_matmul_against_triple_loop(rng):
    a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
    assert np.max(np.abs(linalg.matmul(a, b) - naive_matmul(a, b))) <= 1e-12


def test_matmul_hundred_random_pairs(rng):
    for _ in range(100):
        m, k, n = rng.integers(1, 9, size=3)
        a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
        assert np.max(np.abs(linalg.matmul(a, b) - naive_matmul(a, b))) <= 1e-12


def test_matmul_dimension_mismatch():
    with pytest.raises(ConfigurationError, match="mismatch"):
        linalg.matmul(np.ones((2, 3)), np.ones((2, 3)))


@pytest.mark.parametrize("backend", BACKENDS)
def test_svd_identity(backend):
    s = linalg.svd(np.eye(4), backend=backend)
    assert np.allclose(s.sigma, 1.0, atol=1e-14)


@pytest.mark.parametrize("backend", BACKENDS)
def test_svd_diagonal(backend):
    s = linalg.svd(np.diag([3.0, 2.0, 1.0]), backend=backend)
    assert np.allclose(s.sigma, [3, 2, 1], atol=1e-14)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("shape", [(6, 4), (4, 6), (5, 5), (1, 7), (7, 1), (300, 40)])
def test_svd_residuals(backend, shape, rng):
    a = rng.standard_normal(shape)
    s = linalg.svd(a, backend=backend)
    assert s.rank == min(shape)
    assert np.all(np.diff(s.sigma) <= 0) and s.sigma[-1] >= 0
    for r in residuals(a, s):
        assert r <= 1e-10


@pytest.mark.parametrize("backend", BACKENDS)
def test_svd_rank_deficient(backend, rng):
    a = np.outer(rng.standard_normal(9), rng.standard_normal(5))
    s = linalg.svd(a, backend=backend)
    assert s.sigma[1] / s.sigma[0] < 1e-10
    for r in residuals(a, s):
        assert r <= 1e-10


@pytest.mark.parametrize("backend", BACKENDS)
def test_svd_zero_matrix(backend):
    s = linalg.svd(np.zeros((4, 3)), backend=backend)
    assert np.all(s.sigma == 0)
    assert np.allclose(s.u.T @ s.u, np.eye(3), atol=1e-12)


def test_svd_sign_convention(rng):
    s = linalg.svd(rng.standard_normal((8, 5)))
    idx = np.argmax(np.abs(s.u), axis=0)
    assert np.all(s.u[idx, np.arange(5)] >= 0)


def test_svd_backends_agree(rng):
    if len(BACKENDS) < 2:
        pytest.skip("compiled kernel not built")
    a = rng.standard_normal((60, 25))
    s1, s2 = (linalg.svd(a, backend=b) for b in BACKENDS)
    assert np.allclose(s1.sigma, s2.sigma, atol=1e-12)
    assert np.allclose(np.abs(s1.u.T @ s2.u), np.eye(25), atol=1e-8)


def test_svd_transpose_has_same_values(rng):
    a = rng.standard_normal((9, 4))
    assert np.allclose(linalg.svd(a).sigma, linalg.svd(a.T).sigma, atol=1e-10)


def test_svd_is_read_only(rng):
    s = linalg.svd(rng.standard_normal((3, 3)))
    with pytest.raises(ValueError):
        s.sigma[0] = 0.0


def test_svd_rejects_nonfinite():
    with pytest.raises(NumericalError):
        linalg.svd(np.array([[1.0, np.nan]]))


def test_svd_rejects_empty():
    with pytest.raises(ConfigurationError):
        linalg.svd(np.zeros((0, 3)))


def test_svd_iteration_cap(monkeypatch, rng):
    monkeypatch.setattr(linalg, "MAX_SWEEPS", 0)
    with pytest.raises(NumericalError, match="0 sweeps"):
        linalg.svd(rng.standard_normal((5, 5)))


def test_truncate_full_rank_reconstructs(rng):
    a = rng.standard_normal((7, 4))
    w_a, w_b = linalg.truncate(linalg.svd(a), 4)
    assert np.linalg.norm(w_a @ w_b - a) <= 1e-10


@pytest.mark.parametrize("k,expected", [(1, np.sqrt(5.0)), (2, 1.0)])
def test_truncate_diagonal_error(k, expected):
    a = np.diag([3.0, 2.0, 1.0])
    w_a, w_b = linalg.truncate(linalg.svd(a), k)
    assert w_a.shape == (3, k) and w_b.shape == (k, 3)
    assert np.linalg.norm(a - w_a @ w_b) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("k", [0, 4, 2.0])
def test_truncate_out_of_range(k):
    with pytest.raises(ConfigurationError):
        linalg.truncate(linalg.svd(np.eye(3)), k)


@settings(max_examples=30, deadline=None)
@given(m=st.integers(1, 12), n=st.integers(1, 12), seed=st.integers(0, 2**16))
def test_truncation_error_matches_discarded_values(m, n, seed):
    a = np.random.default_rng(seed).standard_normal((m, n))
    s = linalg.svd(a)
    previous = np.inf
    for k in range(1, s.rank + 1):
        w_a, w_b = linalg.truncate(s, k)
        err = np.linalg.norm(a - w_a @ w_b)
        tail = np.sqrt(np.sum(s.sigma[k:] ** 2))
        if k < s.rank:
            assert abs(err - tail) <= 1e-8 * tail
        else:
            assert err <= 1e-10 * np.linalg.norm(a)
        assert err <= previous + 1e-12
        previous = err


@settings(max_examples=25, deadline=None)
@given(m=st.integers(1, 10), n=st.integers(1, 10), seed=st.integers(0, 2**16))
def test_transpose_invariance_property(m, n, seed):
    a = np.random.default_rng(seed).standard_normal((m, n))
    assert np.allclose(linalg.svd(a).sigma, linalg.svd(a.T).sigma, atol=1e-10)
