"""Uniform per-row quantization grids.

A grid is fit once on the original weights and then frozen. Codes are
``clamp(round(w / scale + zero_point), qmin, qmax)`` with round-half-to-even,
and the dequantized value is ``scale * (code - zero_point)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFinite

SCHEMES = ("symmetric", "asymmetric")


@dataclass(frozen=True)
class QuantGrid:
    bits: int
    scheme: str
    scales: np.ndarray
    zero_points: np.ndarray
    qmin: int
    qmax: int
    granularity: str = "row"

    @property
    def n_rows(self) -> int:
        return self.scales.shape[0]

    def to_dict(self) -> dict:
        return {
            "bits": self.bits,
            "scheme": self.scheme,
            "granularity": self.granularity,
            "qmin": self.qmin,
            "qmax": self.qmax,
            "scales": self.scales.tolist(),
            "zero_points": self.zero_points.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantGrid":
        return cls(
            int(d["bits"]),
            d["scheme"],
            np.asarray(d["scales"], dtype=np.float64),
            np.asarray(d["zero_points"], dtype=np.int64),
            int(d["qmin"]),
            int(d["qmax"]),
            d.get("granularity", "row"),
        )


def code_range(bits: int, scheme: str) -> tuple[int, int]:
    if not 2 <= bits <= 8:
        raise ValueError(f"bits must be in 2..8, got {bits}")
    if scheme == "symmetric":
        q = 2 ** (bits - 1) - 1
        return -q, q
    if scheme == "asymmetric":
        return 0, 2**bits - 1
    raise ValueError(f"unknown scheme {scheme!r}")


def normalize_scheme(scheme: str) -> str:
    return {"sym": "symmetric", "asym": "asymmetric"}.get(scheme, scheme)


def fit_grid(W, bits: int = 4, scheme: str = "symmetric", granularity: str = "row") -> QuantGrid:
    """Min-max fit of one grid per output row (or one shared grid).

    Symmetric rows get ``scale = max|w| / qmax``. Asymmetric rows get
    ``scale = (max - min) / (2**bits - 1)`` and ``zero_point = round(-min /
    scale)``; a row with zero range falls back to a symmetric grid centred
    in the asymmetric code range. All-zero rows get ``scale = 1``.
    """
    scheme = normalize_scheme(scheme)
    W = np.asarray(W, dtype=np.float64)
    if W.ndim == 1:
        W = W[None, :]
    if not np.all(np.isfinite(W)):
        raise NonFinite("weights contain NaN or Inf")
    qmin, qmax = code_range(bits, scheme)
    if granularity == "tensor":
        rows = W.reshape(1, -1)
    elif granularity == "row":
        rows = W
    else:
        raise ValueError(f"unknown granularity {granularity!r}")

    tiny = np.finfo(np.float64).tiny  # subnormal rows would otherwise underflow to scale 0
    sym_q = 2 ** (bits - 1) - 1
    absmax = np.max(np.abs(rows), axis=1)
    sym_scale = np.where(absmax > 0, np.maximum(absmax / sym_q, tiny), 1.0)

    if scheme == "symmetric":
        scales = sym_scale
        zps = np.zeros(rows.shape[0], dtype=np.int64)
    else:
        lo, hi = rows.min(axis=1), rows.max(axis=1)
        flat = hi <= lo
        levels = qmax - qmin
        scales = np.where(flat, sym_scale, np.maximum(hi / levels - lo / levels, tiny))
        with np.errstate(over="ignore"):
            zps = np.where(flat, 2 ** (bits - 1), np.round(-lo / scales))
        zps = np.clip(zps, qmin, qmax).astype(np.int64)

    if granularity == "tensor":
        scales = np.repeat(scales, W.shape[0])
        zps = np.repeat(zps, W.shape[0])
    return QuantGrid(bits, scheme, scales.astype(np.float64), zps, qmin, qmax, granularity)


def quantize(values, g: QuantGrid, rows=None) -> np.ndarray:
    """Vectorized quant(.). ``rows`` selects the grid row for each leading index.

    With ``rows=None`` and a 2-D input, row ``i`` uses grid row ``i``; a 1-D
    input is treated as one value per grid row (a column of ``W``).
    """
    values = np.asarray(values, dtype=np.float64)
    if rows is None:
        rows = np.arange(values.shape[0])
    scale = g.scales[rows]
    zp = g.zero_points[rows].astype(np.float64)
    if values.ndim == 2:
        scale, zp = scale[:, None], zp[:, None]
    codes = np.clip(np.round(values / scale + zp), g.qmin, g.qmax)
    return scale * (codes - zp)


def quantize_value(w: float, row: int, g: QuantGrid) -> float:
    scale = g.scales[row]
    zp = float(g.zero_points[row])
    code = min(max(np.round(w / scale + zp), g.qmin), g.qmax)
    return float(scale * (code - zp))


def quant_error(w: float, row: int, g: QuantGrid) -> float:
    """Signed rounding error ``quant(w) - w``."""
    return quantize_value(w, row, g) - w


def quant_errors(values, g: QuantGrid, rows=None) -> np.ndarray:
    return quantize(values, g, rows) - np.asarray(values, dtype=np.float64)
