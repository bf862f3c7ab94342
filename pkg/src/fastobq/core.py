"""Row-parallel, column-wise quantization with a single shared inverse Hessian.

Columns are ranked once by their summed per-weight sensitivity, then
quantized one whole column at a time. After each column every row applies
its own compensation from the same inverse-Hessian column, and the shared
inverse is downdated exactly once.
"""

from __future__ import annotations

import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import SingularPivot
from .grid import QuantGrid, quant_errors, quantize
from .linalg import PIVOT_TOL, Hessian, HinvCounter, InverseHessian, downdate_inverse, invert_spd
from .obq import SENSI_DES, OrderingStrategy
from .parallel import resolve_threads, row_chunks


@dataclass
class ColumnSchedule:
    permutation: np.ndarray
    scores: np.ndarray
    strategy: OrderingStrategy


@dataclass
class LayerResult:
    W_q: np.ndarray
    error_total: float
    per_column_error: np.ndarray
    wall_time: float
    hinv_matrices_allocated: int
    schedule: ColumnSchedule
    hinv_bytes_peak: int = 0
    warnings: dict = field(default_factory=dict)


def aggregate_column_sensitivity(W, hinv: InverseHessian, g: QuantGrid) -> np.ndarray:
    """``S_j = sum_i (quant(w_ij) - w_ij)^2 / (2 [Hinv]_jj)``."""
    if not np.all(hinv.live):
        raise ValueError("column sensitivities need a fully live inverse Hessian")
    diag = np.diag(hinv.values)
    if np.any(diag <= PIVOT_TOL):
        j = int(np.argmin(diag))
        raise SingularPivot(f"[Hinv]_{j}{j} = {diag[j]:.3e} <= {PIVOT_TOL}")
    err = quant_errors(np.asarray(W, dtype=np.float64), g)
    return np.sum(err**2, axis=0) / (2.0 * diag)


def schedule_columns(S, W, g: QuantGrid, strategy: OrderingStrategy = SENSI_DES) -> ColumnSchedule:
    W = np.asarray(W, dtype=np.float64)
    if strategy.key == "sensitivity":
        keys = np.asarray(S, dtype=np.float64)
    elif strategy.key == "quant_error_magnitude":
        keys = np.sum(np.abs(quant_errors(W, g)), axis=0)
    elif strategy.key == "weight_magnitude":
        keys = np.linalg.norm(W, axis=0)
    else:
        keys = np.zeros(W.shape[1])
    return ColumnSchedule(strategy.order(keys), keys, strategy)


def hessian_error(W, W_q, H: Hessian) -> float:
    """Layer error recovered from the Hessian: ``0.5 tr(D H D^T) - 0.5 lambda ||D||^2``."""
    D = np.asarray(W, dtype=np.float64) - np.asarray(W_q, dtype=np.float64)
    return float(0.5 * np.sum((D @ H.values) * D) - 0.5 * H.damping_applied * np.sum(D * D))


def layer_error(W, W_q, X) -> float:
    """``||(W - W_q) X||_F^2``."""
    R = (np.asarray(W, dtype=np.float64) - np.asarray(W_q, dtype=np.float64)) @ np.asarray(X, dtype=np.float64)
    return float(np.sum(R * R))


def layer_error_normalized(W, W_q, X) -> float:
    """Layer error divided by ``||W X||_F^2`` (0 when the reference output is 0)."""
    ref = np.asarray(W, dtype=np.float64) @ np.asarray(X, dtype=np.float64)
    denom = float(np.sum(ref * ref))
    return layer_error(W, W_q, X) / denom if denom > 0 else 0.0


def fastobq_quantize_layer(W, H: Hessian, g: QuantGrid, strategy: OrderingStrategy = SENSI_DES, *,
                           X=None, order=None, threads=None, counter: HinvCounter | None = None,
                           on_step=None) -> LayerResult:
    """Quantize ``W`` column by column in sensitivity order.

    Args:
        W: ``[d_row, d_col]`` weights; not modified.
        H: damped layer Hessian.
        g: grid fit on the original ``W``.
        strategy: column ordering; ignored when ``order`` is given.
        X: calibration inputs. When present ``error_total`` is evaluated on
            them directly, otherwise it is recovered from ``H``.
        order: explicit column permutation.
        threads: row-parallel workers for the weight update (see
            ``FASTOBQ_THREADS``). The output is bitwise independent of it.
        counter: optional inverse-Hessian allocation counter.
        on_step: ``callback(t, col, W)`` invoked after each column.
    """
    t0 = time.perf_counter()
    W0 = np.asarray(W, dtype=np.float64)
    d_row, d_col = W0.shape
    Wc = W0.copy()
    if counter is None:
        counter = HinvCounter(d_col)
    counter.dim = d_col

    hinv = invert_spd(H)
    counter.acquire(1)
    if order is None:
        S = aggregate_column_sensitivity(Wc, hinv, g) if strategy.key == "sensitivity" else None
        schedule = schedule_columns(S, Wc, g, strategy)
    else:
        order = np.asarray(order, dtype=np.int64)
        if sorted(order.tolist()) != list(range(d_col)):
            raise ValueError("order must be a permutation of the column indices")
        schedule = ColumnSchedule(order, np.zeros(d_col), strategy)

    chunks = row_chunks(d_row, resolve_threads(threads))
    pool = None
    if len(chunks) > 1:
        pool = ThreadPoolExecutor(max_workers=len(chunks))

    warnings = Counter()
    per_col = np.zeros(d_col)
    V = hinv.values
    rows_all = np.arange(d_row)
    try:
        for t, k in enumerate(schedule.permutation):
            k = int(k)
            q = quantize(Wc[:, k], g, rows_all)
            d = V[k, k]
            if not d > PIVOT_TOL:
                # no usable compensation: round the column and retire the index
                warnings["singular_pivot"] += 1
                Wc[:, k] = q
                V[k, :] = 0.0
                V[:, k] = 0.0
                hinv.live[k] = False
            else:
                # phase 1: rows read the frozen column and update their own weights
                h = V[:, k].copy()
                coef = (Wc[:, k] - q) / d

                def update(rows, coef=coef, h=h, q=q, k=k):
                    Wc[rows] -= np.outer(coef[rows], h)
                    Wc[rows, k] = q[rows]

                if pool is None:
                    update(slice(None))
                else:
                    list(pool.map(update, chunks))
                # objective increase sum_i 0.5 dw_i^T H dw_i, dw_i = -coef_i h
                per_col[t] = 0.5 * float(np.sum(coef * coef)) * float(h @ (H.values @ h))
                # phase 2: single writer
                downdate_inverse(hinv, k, inplace=True)
            if on_step is not None:
                on_step(t, k, Wc)
    finally:
        if pool is not None:
            pool.shutdown()
    counter.release(1)

    err = layer_error(W0, Wc, X) if X is not None else hessian_error(W0, Wc, H)
    return LayerResult(
        W_q=Wc,
        error_total=err,
        per_column_error=per_col,
        wall_time=time.perf_counter() - t0,
        hinv_matrices_allocated=counter.peak,
        schedule=schedule,
        hinv_bytes_peak=counter.bytes_peak,
        warnings=dict(warnings),
    )
