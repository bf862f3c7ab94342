"""Hessian assembly, Cholesky inversion and the rank-1 inverse downdate.

The layer objective ``||W X - W_q X||_F^2`` is a sum of independent row
objectives, and each row's Hessian is ``2 X X^T``. One Hessian therefore
serves every row of the layer.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DeadIndex, EmptyCalibration, NonFinite, NotPositiveDefinite, SingularPivot

PIVOT_TOL = 1e-12


@dataclass
class Hessian:
    values: np.ndarray
    damping_applied: float = 0.0

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass
class InverseHessian:
    """Inverse Hessian plus the mask of not-yet-quantized (live) indices.

    Rows and columns of dead indices are held at exactly zero, so the live
    block is always the inverse of the Hessian restricted to live indices.
    """

    values: np.ndarray
    live: np.ndarray

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def copy(self) -> "InverseHessian":
        return InverseHessian(self.values.copy(), self.live.copy())

    def live_block(self) -> np.ndarray:
        idx = np.flatnonzero(self.live)
        return self.values[np.ix_(idx, idx)]


class HinvCounter:
    """Counts inverse-Hessian-sized buffers held by a quantizer.

    ``peak`` is the figure reported as ``hinv_matrices_allocated``; the byte
    count assumes f64 ``d_col x d_col`` buffers.
    """

    def __init__(self, dim: int = 0):
        self.dim = dim
        self.live = 0
        self.peak = 0
        self._lock = threading.Lock()

    def acquire(self, n: int = 1) -> None:
        with self._lock:
            self.live += n
            self.peak = max(self.peak, self.live)

    def release(self, n: int = 1) -> None:
        with self._lock:
            self.live -= n

    @property
    def bytes_peak(self) -> int:
        return self.peak * self.dim * self.dim * 8


def build_hessian(X, damping: float = 0.1, mode: str = "absolute") -> Hessian:
    """Return ``2 X X^T + lambda I`` for calibration inputs of shape ``[d_col, N]``.

    ``mode="absolute"`` adds ``damping`` itself to the diagonal;
    ``mode="relative"`` adds ``damping * mean(diag(2 X X^T))``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"calibration set must be 2-D [d_col, N], got shape {X.shape}")
    if X.shape[1] == 0:
        raise EmptyCalibration("calibration set has N = 0 samples")
    if not np.all(np.isfinite(X)):
        raise NonFinite("calibration set contains NaN or Inf")
    if damping < 0:
        raise ValueError("damping must be >= 0")

    gram = 2.0 * (X @ X.T)
    # exact symmetry: keep the upper triangle and mirror it
    H = np.triu(gram) + np.triu(gram, 1).T
    if mode == "absolute":
        lam = float(damping)
    elif mode == "relative":
        lam = float(damping) * float(np.mean(np.diag(H)))
    else:
        raise ValueError(f"unknown damping mode {mode!r}")
    H[np.diag_indices_from(H)] += lam
    return Hessian(H, lam)


def _cholesky(H: np.ndarray) -> np.ndarray:
    try:
        L = scipy.linalg.cholesky(H, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise NotPositiveDefinite(f"Cholesky failed: {exc}") from exc
    except ValueError as exc:
        raise NonFinite(str(exc)) from exc
    # LAPACK only rejects pivots <= 0; a rank-deficient Gram can survive with a
    # rounding-level pivot, which is just as useless.
    pivots = np.diag(L) ** 2
    scale = max(float(np.max(np.abs(np.diag(H)))), np.finfo(float).tiny)
    if pivots.min() <= H.shape[0] * np.finfo(float).eps * scale:
        raise NotPositiveDefinite(f"Cholesky pivot {pivots.min():.3e} is numerically zero")
    return L


def invert_spd(H) -> InverseHessian:
    values = H.values if isinstance(H, Hessian) else np.asarray(H, dtype=np.float64)
    n = values.shape[0]
    L = _cholesky(values)
    Linv = scipy.linalg.solve_triangular(L, np.eye(n), lower=True)
    Hinv = Linv.T @ Linv
    Hinv = np.triu(Hinv) + np.triu(Hinv, 1).T
    return InverseHessian(Hinv, np.ones(n, dtype=bool))


def downdate_inverse(hinv: InverseHessian, k: int, inplace: bool = False) -> InverseHessian:
    """Remove index ``k`` from the inverse Hessian.

    Applies ``Hinv -= Hinv[:, k] Hinv[k, :] / Hinv[k, k]`` and zeroes row and
    column ``k``. The result's live block equals the inverse of the Hessian
    with row/column ``k`` deleted.
    """
    if not hinv.live[k]:
        raise DeadIndex(f"index {k} is already quantized")
    pivot = hinv.values[k, k]
    if not pivot > PIVOT_TOL:
        raise SingularPivot(f"[Hinv]_{k}{k} = {pivot:.3e} <= {PIVOT_TOL}")
    out = hinv if inplace else hinv.copy()
    V = out.values
    col = V[:, k].copy()
    row = V[k, :] / pivot
    V -= np.outer(col, row)
    V[k, :] = 0.0
    V[:, k] = 0.0
    out.live[k] = False
    return out
