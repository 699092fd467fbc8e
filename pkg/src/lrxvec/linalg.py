"""Dense matrix kernels and a one-sided Jacobi SVD.

Matrices are plain float64 numpy arrays. The Jacobi rotation loop comes
from the compiled ``_jacobi`` extension when it is importable; otherwise
(or when ``LRX_PURE_PYTHON=1``) the vectorized numpy kernel is used.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import _jacobi_py
from .errors import ConfigurationError, NumericalError

_KERNELS = {"python": _jacobi_py.jacobi_sweeps}
if os.environ.get("LRX_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _jacobi

        _KERNELS["compiled"] = _jacobi.jacobi_sweeps
    except ImportError:  # extension not built
        pass

BACKEND = "compiled" if "compiled" in _KERNELS else "python"
MAX_SWEEPS = 100
OFF_DIAGONAL_TOL = 1e-12


def available_backends():
    return sorted(_KERNELS)


def as_matrix(a, name="matrix"):
    """Validate and convert to a C-contiguous float64 2-D array."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ConfigurationError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains non-finite entries")
    return arr


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ConfigurationError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``a = u @ diag(sigma) @ vt`` with ``sigma`` non-increasing."""

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray

    @property
    def rank(self):
        return self.sigma.shape[0]

    def reconstruct(self, k=None):
        k = self.rank if k is None else k
        return (self.u[:, :k] * self.sigma[:k]) @ self.vt[:k]


def _complete_basis(u, good):
    """Replace columns of ``u`` not flagged in ``good`` with an orthonormal completion."""
    m = u.shape[0]
    basis = [u[:, j] for j in np.flatnonzero(good)]
    fill = []
    candidate = 0
    for _ in range(int((~good).sum())):
        while True:
            e = np.zeros(m)
            e[candidate] = 1.0
            candidate += 1
            for _ in range(2):
                for b in basis:
                    e -= (b @ e) * b
            norm = np.linalg.norm(e)
            if norm > 0.5:
                e /= norm
                basis.append(e)
                fill.append(e)
                break
    u[:, ~good] = np.array(fill).T
    return u


def _fix_signs(u, vt):
    idx = np.argmax(np.abs(u), axis=0)
    flip = u[idx, np.arange(u.shape[1])] < 0
    u[:, flip] *= -1.0
    vt[flip] *= -1.0


def svd(a, backend=None):
    """Thin SVD by one-sided Jacobi rotations.

    Tall inputs are first reduced by a QR factorization so the rotations run
    on the square triangular factor. Columns of ``u`` are sign-normalized so
    that their largest-magnitude entry is non-negative.
    """
    a = as_matrix(a)
    kernel = _KERNELS[backend or BACKEND]
    transposed = a.shape[0] < a.shape[1]
    work = a.T if transposed else a
    m, n = work.shape
    q = None
    if m > n:
        q, work = np.linalg.qr(work)
    g = np.ascontiguousarray(work.T)
    vt = np.eye(n)
    tol = min(OFF_DIAGONAL_TOL, max(g.shape[1], 1) * np.finfo(np.float64).eps)
    sweeps = kernel(g, vt, tol, MAX_SWEEPS)
    if sweeps < 0:
        raise NumericalError(f"Jacobi SVD did not converge after {MAX_SWEEPS} sweeps")

    sigma = np.sqrt(np.einsum("ij,ij->i", g, g))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    g = g[order]
    vt = vt[order]
    good = sigma > (sigma[0] * n * np.finfo(np.float64).eps if sigma[0] > 0 else 0.0)
    u = np.zeros((g.shape[1], n))
    u[:, good] = (g[good] / sigma[good, None]).T
    if not good.all():
        u = _complete_basis(u, good)
    if q is not None:
        u = q @ u

    if transposed:
        u, vt = vt.T.copy(), u.T.copy()
    _fix_signs(u, vt)
    for arr in (u, sigma, vt):
        arr.setflags(write=False)
    return SvdResult(u=u, sigma=sigma, vt=vt)


def truncate(s, k):
    """Rank-``k`` factor pair ``(u_k * sigma_k, vt_k)`` of an SVD."""
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= s.rank:
        raise ConfigurationError(f"rank k={k} outside [1, {s.rank}]")
    w_a = s.u[:, :k] * s.sigma[:k]
    w_b = s.vt[:k].copy()
    return w_a, w_b
