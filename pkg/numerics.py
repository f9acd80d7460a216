#!/usr/bin/env python3
"""
Compensated Inference - dense numerics
Matrix products, SVD with a fixed sign convention, truncated low-rank factors
and Frobenius norms. A DenseMatrix is a 2-D numpy array; float64 is used for
calibration math and float32 for stored model weights.
"""

import logging
from dataclasses import dataclass

import numpy as np

from errors import ConfigError, NumericError, RangeError, ShapeError

logger = logging.getLogger(__name__)

DenseMatrix = np.ndarray

PRECISIONS = {
    'float64': np.float64,
    'float32': np.float32,
}

# Magnitude below which a singular-vector entry does not decide the sign
SIGN_TOLERANCE = 1e-12


def as_matrix(data, precision='float64'):
    """Coerce data to a finite 2-D array of the requested precision"""
    if precision not in PRECISIONS:
        raise ConfigError(f"Unsupported precision {precision!r}; use one of {sorted(PRECISIONS)}")
    m = np.asarray(data, dtype=PRECISIONS[precision])
    if m.ndim != 2:
        raise ShapeError(f"Expected a 2-D matrix, got shape {m.shape}")
    _check_finite(m, 'matrix')
    return m


def _check_finite(m, what):
    if not np.all(np.isfinite(m)):
        raise NumericError(f"Non-finite entries in {what}")


def matmul(a, b):
    """Standard matrix product with shape and finiteness checks"""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"Cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    _check_finite(out, 'matmul result')
    return out


@dataclass(frozen=True)
class SVDResult:
    """Thin SVD: U (d x n), sigma (n, non-increasing), Vt (n x k), n = min(d, k)"""
    U: np.ndarray
    sigma: np.ndarray
    Vt: np.ndarray

    @property
    def n(self):
        return self.sigma.shape[0]

    def reconstruct(self):
        return (self.U * self.sigma) @ self.Vt


def svd(m, matrix_id=None):
    """
    Thin SVD in float64 via LAPACK.
    Sign convention: the first entry of each U column with magnitude above
    SIGN_TOLERANCE is non-negative; the matching Vt row flips with it.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ShapeError(f"SVD needs a non-empty 2-D matrix, got shape {m.shape}")
    _check_finite(m, f"SVD input {matrix_id or ''}".strip())

    try:
        U, sigma, Vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as err:
        raise NumericError(f"SVD did not converge for {matrix_id or 'matrix'}: {err}") from err

    significant = np.abs(U) > SIGN_TOLERANCE
    first = np.argmax(significant, axis=0)
    signs = np.sign(U[first, np.arange(U.shape[1])])
    signs[(signs == 0) | ~significant.any(axis=0)] = 1.0

    U = np.ascontiguousarray(U * signs)
    Vt = np.ascontiguousarray(Vt * signs[:, None])
    sigma = np.maximum(sigma, 0.0)
    return SVDResult(U=U, sigma=sigma, Vt=Vt)


def truncated_factors(s, r):
    """
    Rank-r factors with A absorbing the singular values:
    A = U[:, :r] * sigma[:r] (d x r), B = Vt[:r, :] (r x k).
    r = 0 yields empty factors whose product is the zero matrix.
    """
    if not 0 <= r <= s.n:
        raise RangeError(f"Rank {r} outside [0, {s.n}]")
    A = np.ascontiguousarray(s.U[:, :r] * s.sigma[:r])
    B = np.ascontiguousarray(s.Vt[:r, :])
    return A, B


def frobenius_norm(m):
    return float(np.linalg.norm(np.asarray(m, dtype=np.float64), 'fro'))


def softmax(logits, floor=0.0):
    """
    Row-wise softmax over the last axis. With floor > 0 every probability is
    raised to at least floor and the row renormalized.
    """
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    if floor > 0:
        p = np.maximum(p, floor)
        p /= p.sum(axis=-1, keepdims=True)
    return p
