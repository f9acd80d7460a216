#!/usr/bin/env python3
"""
Compensated Inference - residual spectra and low-rank compensation factors

A residual's spectrum is split at the largest second-order difference of its
normalized singular values into a salient head and a residual tail; the ratio
of their means (phi) measures how recoverable the matrix is at low rank.
"""

import logging
from dataclasses import dataclass
from typing import Hashable, Optional

import numpy as np

from errors import ConfigError, NumericError, RangeError, ShapeError
from numerics import svd, truncated_factors

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.01
# Relative floor on the residual-set mean so phi stays finite on rank-deficient residuals
PHI_FLOOR = 1e-12


@dataclass(frozen=True)
class ResidualSpectrum:
    matrix_id: Hashable
    sigma_raw: np.ndarray
    sigma_hat: np.ndarray
    salient_cut: Optional[int]
    phi: float

    @property
    def n(self):
        return self.sigma_raw.shape[0]

    @property
    def salient_size(self):
        return self.salient_cut or 0

    @property
    def residual_size(self):
        return self.n - self.salient_size


def second_differences(sigma_hat):
    """k_j = s[j-1] - 2 s[j] + s[j+1] for interior j (0-based 1..n-2)"""
    return sigma_hat[:-2] - 2.0 * sigma_hat[1:-1] + sigma_hat[2:]


def spectrum_from_sigma(sigma, tau=DEFAULT_TAU, matrix_id=None):
    """Salient split and salience ratio for an already computed singular-value vector"""
    sigma = np.asarray(sigma, dtype=np.float64)
    n = sigma.shape[0]
    if n and sigma[0] > 0:
        sigma_hat = sigma / sigma[0]
    else:
        sigma_hat = np.zeros_like(sigma)

    if n < 3:
        logger.debug(f"Spectrum of {matrix_id} too short ({n} values); no salient split")
        return ResidualSpectrum(matrix_id, sigma, sigma_hat, None, 1.0)

    k = second_differences(sigma_hat)
    best = int(np.argmax(k))  # first occurrence wins ties
    if not k[best] > tau:
        return ResidualSpectrum(matrix_id, sigma, sigma_hat, None, 1.0)

    cut = best + 2  # 1-based index of the interior point
    salient_mean = sigma[:cut].mean()
    residual_mean = max(sigma[cut:].mean(), PHI_FLOOR * sigma[0])
    phi = float(salient_mean / residual_mean)
    if phi < 1.0:
        logger.error(f"Salience ratio {phi:.6f} < 1 for {matrix_id} (cut {cut})")
        raise NumericError(f"Spectrum analysis produced phi < 1 for {matrix_id}")
    return ResidualSpectrum(matrix_id, sigma, sigma_hat, cut, phi)


def analyze_spectrum(delta_w, tau=DEFAULT_TAU, matrix_id=None):
    """SVD the residual and split its spectrum (see spectrum_from_sigma)"""
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    delta_w = np.asarray(delta_w, dtype=np.float64)
    if delta_w.size == 0:
        raise ShapeError(f"Empty residual for {matrix_id}")
    return spectrum_from_sigma(svd(delta_w, matrix_id).sigma, tau, matrix_id)


def salience_scores(window_spectra):
    """V_i = phi_i / sum of phi over the window"""
    if not window_spectra:
        raise ConfigError("Cannot score an empty compensation window")
    total = sum(s.phi for s in window_spectra)
    return {s.matrix_id: s.phi / total for s in window_spectra}


@dataclass(frozen=True)
class CompensationFactors:
    matrix_id: Hashable
    rank: int
    A: np.ndarray  # d x r
    B: np.ndarray  # r x k

    @property
    def shape(self):
        return self.A.shape[0], self.B.shape[1]

    def truncated(self, r):
        """Leading r components, sliced from these factors"""
        if not 0 <= r <= self.rank:
            raise RangeError(f"Rank {r} outside [0, {self.rank}] for {self.matrix_id}")
        if r == self.rank:
            return self
        return CompensationFactors(self.matrix_id, r, self.A[:, :r], self.B[:r, :])


def build_factors(delta_w, r, matrix_id=None):
    """Rank-r truncated-SVD factors of the residual (Eckart-Young optimal)"""
    delta_w = np.asarray(delta_w, dtype=np.float64)
    n = min(delta_w.shape)
    if not 0 <= r <= n:
        raise RangeError(f"Rank {r} outside [0, {n}] for {matrix_id}")
    A, B = truncated_factors(svd(delta_w, matrix_id), r)
    return CompensationFactors(matrix_id, r, A, B)


def apply(x, f):
    """Delta Y = (X A) B, never forming A B"""
    x = np.asarray(x, dtype=np.float64)
    d, k = f.shape
    if x.ndim != 2 or x.shape[1] != d:
        raise ShapeError(f"Activation {x.shape} does not match factors of {f.matrix_id} ({d} x {k})")
    if f.rank == 0:
        return np.zeros((x.shape[0], k))
    return (x @ f.A) @ f.B


def build_factor_pool(residuals, max_rank=None):
    """Factors for every residual at min(max_rank, d, k); plans slice from these"""
    pool = {}
    for matrix_id, delta_w in residuals.items():
        n = min(np.shape(delta_w))
        rank = n if max_rank is None else min(max_rank, n)
        pool[matrix_id] = build_factors(delta_w, rank, matrix_id)
    logger.info(f"Built factor pool for {len(pool)} matrices")
    return pool


def select_factors(pool, ranks):
    """Rank-r slices of the pool for every nonzero planned rank"""
    selected = {}
    for mid, r in ranks.items():
        if r <= 0:
            continue
        if mid not in pool:
            raise ConfigError(f"No compensation factors for {mid}")
        selected[mid] = pool[mid].truncated(r)
    return selected
