#!/usr/bin/env python3
"""
Compensated Inference - round-to-nearest weight quantization
Symmetric, group-wise RTN producing integer codes, per-group scales and the
quantization residual that the low-rank compensator works on.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4
    group_size: Optional[int] = None  # None = one group per row
    symmetric: bool = True

    @property
    def qmax(self):
        return 2 ** (self.bits - 1) - 1

    @property
    def qmin(self):
        return -(2 ** (self.bits - 1))

    def group_width(self, cols):
        return cols if self.group_size is None else self.group_size

    def validate(self, shape):
        """Raise ConfigError unless this config can quantize a matrix of this shape"""
        if not 2 <= self.bits <= 8:
            raise ConfigError(f"bits must be in [2, 8], got {self.bits}")
        if not self.symmetric:
            raise ConfigError("Only symmetric quantization is supported")
        if len(shape) != 2:
            raise ConfigError(f"Quantization needs a 2-D matrix, got shape {shape}")
        cols = shape[1]
        width = self.group_width(cols)
        if width <= 0 or cols % width != 0:
            raise ConfigError(f"group_size {self.group_size} does not divide row length {cols}")
        return self


@dataclass(frozen=True)
class QuantizedWeight:
    codes: np.ndarray     # int8, source shape
    scales: np.ndarray    # float64, (rows, groups)
    bits: int
    group_size: int
    shape: tuple


def round_half_away(x):
    """Round to nearest, ties away from zero (numpy's rint rounds ties to even)"""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(w, cfg):
    """Symmetric per-group RTN: scale = max|group| / qmax, all-zero groups get scale 1"""
    w = np.asarray(w, dtype=np.float64)
    cfg.validate(w.shape)
    rows, cols = w.shape
    width = cfg.group_width(cols)

    grouped = w.reshape(rows, cols // width, width)
    peak = np.abs(grouped).max(axis=-1)
    scales = np.where(peak > 0, peak / cfg.qmax, 1.0)

    codes = round_half_away(grouped / scales[..., None])
    codes = np.clip(codes, cfg.qmin, cfg.qmax).astype(np.int8).reshape(rows, cols)
    return QuantizedWeight(codes=codes, scales=scales, bits=cfg.bits, group_size=width, shape=(rows, cols))


def dequantize(q):
    rows, cols = q.shape
    grouped = q.codes.astype(np.float64).reshape(rows, cols // q.group_size, q.group_size)
    return (grouped * q.scales[..., None]).reshape(rows, cols)


def residual(w, q):
    """Quantization error W - dequantize(Q)"""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != tuple(q.shape):
        raise ShapeError(f"Weight shape {w.shape} does not match quantized shape {tuple(q.shape)}")
    return w - dequantize(q)


def expand_scales(q):
    """Per-entry scale matrix, handy for half-step bound checks"""
    rows, cols = q.shape
    return np.repeat(q.scales, q.group_size, axis=1).reshape(rows, cols)
