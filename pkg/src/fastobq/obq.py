"""Row-wise Optimal Brain Quantization (reference) and round-to-nearest.

Every row owns a private copy of the inverse Hessian and quantizes its
weights one at a time: pick an index, snap it to the grid, spread the
rounding error over the row's live weights, downdate the row's inverse.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import SingularPivot
from .grid import QuantGrid, quant_errors, quantize, quantize_value
from .linalg import PIVOT_TOL, Hessian, HinvCounter, InverseHessian, downdate_inverse, invert_spd
from .parallel import map_ordered, resolve_threads

KEYS = ("sensitivity", "quant_error_magnitude", "weight_magnitude", "none")
_KEY_ALIASES = {"sensi": "sensitivity", "err": "quant_error_magnitude", "w": "weight_magnitude", "none": "none"}
_KEY_SHORT = {v: k for k, v in _KEY_ALIASES.items()}
_DIR_ALIASES = {"des": "descending", "asc": "ascending"}


@dataclass(frozen=True)
class OrderingStrategy:
    key: str = "sensitivity"
    direction: str = "descending"

    def __post_init__(self):
        if self.key not in KEYS:
            raise ValueError(f"unknown ordering key {self.key!r}")
        if self.direction not in ("descending", "ascending"):
            raise ValueError(f"unknown direction {self.direction!r}")

    @classmethod
    def parse(cls, text: str) -> "OrderingStrategy":
        """Parse ``sensi_des``, ``err_asc``, ``w_des``, ``none`` and similar labels."""
        if text in ("none", "none_des", "none_asc"):
            return cls("none", "descending")
        try:
            key, direction = text.rsplit("_", 1)
            return cls(_KEY_ALIASES.get(key, key), _DIR_ALIASES.get(direction, direction))
        except ValueError as exc:
            raise ValueError(f"cannot parse strategy {text!r}; expected <sensi|err|w|none>_<des|asc>") from exc

    @property
    def label(self) -> str:
        if self.key == "none":
            return "none"
        return f"{_KEY_SHORT[self.key]}_{self.direction[:3]}"

    def order(self, keys: np.ndarray) -> np.ndarray:
        """Stable argsort; equal keys keep ascending index order."""
        if self.key == "none":
            return np.arange(keys.shape[0])
        if self.direction == "descending":
            return np.argsort(-keys, kind="stable")
        return np.argsort(keys, kind="stable")


NONE = OrderingStrategy("none")
SENSI_DES = OrderingStrategy("sensitivity", "descending")


def _check_pivots(diag: np.ndarray) -> None:
    if np.any(diag <= PIVOT_TOL):
        j = int(np.argmin(diag))
        raise SingularPivot(f"[Hinv]_{j}{j} = {diag[j]:.3e} <= {PIVOT_TOL}")


def sensitivity_scores(w_row, hinv: InverseHessian, g: QuantGrid, row: int) -> np.ndarray:
    """Sensitivity ``(quant(w_j) - w_j)^2 / (2 [Hinv]_jj)`` for each live index.

    Scores are returned in ascending index order over ``np.flatnonzero(hinv.live)``.
    """
    idx = np.flatnonzero(hinv.live)
    diag = hinv.values[idx, idx]
    _check_pivots(diag)
    err = quant_errors(np.asarray(w_row, dtype=np.float64)[idx], g, np.full(idx.size, row))
    return err**2 / (2.0 * diag)


def ordering_keys(w_row, hinv: InverseHessian, g: QuantGrid, row: int, key: str) -> np.ndarray:
    """Full-length key vector for one row; entries at dead indices are meaningless."""
    w_row = np.asarray(w_row, dtype=np.float64)
    if key == "none":
        return np.zeros_like(w_row)
    if key == "weight_magnitude":
        return np.abs(w_row)
    err = quant_errors(w_row, g, np.full(w_row.shape[0], row))
    if key == "quant_error_magnitude":
        return np.abs(err)
    diag = np.diag(hinv.values).copy()
    _check_pivots(diag[hinv.live])
    diag[~hinv.live] = 1.0
    return err**2 / (2.0 * diag)


def compensate(w_row, hinv: InverseHessian, k: int, g: QuantGrid, row: int) -> np.ndarray:
    """Quantize ``w_row[k]`` and return the row with the optimal compensating update."""
    w = np.array(w_row, dtype=np.float64)
    _compensate_inplace(w, hinv.values, k, quantize_value(w[k], row, g))
    return w


def _compensate_inplace(w: np.ndarray, V: np.ndarray, k: int, q: float) -> float:
    d = V[k, k]
    if not d > PIVOT_TOL:
        raise SingularPivot(f"[Hinv]_{k}{k} = {d:.3e} <= {PIVOT_TOL}")
    err = w[k] - q
    w -= (err / d) * V[:, k]
    w[k] = q
    return err * err / (2.0 * d)


@dataclass
class QuantTrace:
    """Quantization schedule: which (row, col) was fixed at which step, with its L_q."""

    steps: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return self.steps.shape[0]

    def order_matrix(self, shape) -> np.ndarray:
        """``[d_row, d_col]`` matrix of the step at which each weight was quantized."""
        out = np.full(shape, -1, dtype=np.int64)
        out[self.rows, self.cols] = self.steps
        return out

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "row", "col", "L_q"])
            for s, r, c, l in zip(self.steps, self.rows, self.cols, self.scores):
                writer.writerow([int(s), int(r), int(c), repr(float(l))])

    @classmethod
    def concat(cls, parts) -> "QuantTrace":
        parts = list(parts)
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("steps", "rows", "cols", "scores")))


def obq_quantize_row(w_row, hinv: InverseHessian, g: QuantGrid, row: int,
                     strategy: OrderingStrategy = SENSI_DES, greedy: bool = False,
                     on_step=None, order=None):
    """Quantize one row in place of a private ``hinv`` (which is consumed).

    ``order`` overrides the strategy with an explicit column sequence.
    Returns the quantized row and its trace.
    """
    w = np.array(w_row, dtype=np.float64)
    n = w.shape[0]
    if order is None and not greedy:
        order = strategy.order(ordering_keys(w, hinv, g, row, strategy.key))
    cols = np.empty(n, dtype=np.int64)
    scores = np.empty(n)
    for t in range(n):
        if order is not None:
            k = int(order[t])
        else:
            live = np.flatnonzero(hinv.live)
            keys = ordering_keys(w, hinv, g, row, strategy.key)[live]
            k = int(live[strategy.order(keys)[0]])
        scores[t] = _compensate_inplace(w, hinv.values, k, quantize_value(w[k], row, g))
        downdate_inverse(hinv, k, inplace=True)
        cols[t] = k
        if on_step is not None:
            on_step(t, row, k, w)
    trace = QuantTrace(np.arange(n), np.full(n, row), cols, scores)
    return w, trace


def obq_quantize_layer(W, H: Hessian, g: QuantGrid, strategy: OrderingStrategy = SENSI_DES,
                       greedy: bool = False, *, threads=None, counter: HinvCounter | None = None,
                       on_step=None, order=None):
    """Reference OBQ over every row of ``W``.

    A ``[d_row, d_col, d_col]`` stack of inverse Hessians is materialized, one
    per row. Rows are independent, so the result does not depend on
    ``threads``. Returns ``(W_q, trace)``.
    """
    W = np.asarray(W, dtype=np.float64)
    d_row, d_col = W.shape
    hinv0 = invert_spd(H)
    stack = np.empty((d_row, d_col, d_col))
    stack[:] = hinv0.values
    del hinv0
    if counter is not None:
        counter.dim = d_col
        counter.acquire(d_row)

    def run(i):
        hinv = InverseHessian(stack[i], np.ones(d_col, dtype=bool))
        return obq_quantize_row(W[i], hinv, g, i, strategy, greedy, on_step, order)

    results = map_ordered(run, range(d_row), resolve_threads(threads))
    if counter is not None:
        counter.release(d_row)
    Wq = np.stack([r[0] for r in results]) if d_row else W.copy()
    return Wq, QuantTrace.concat(r[1] for r in results)


def rtn_quantize_layer(W, g: QuantGrid) -> np.ndarray:
    return quantize(np.asarray(W, dtype=np.float64), g)
