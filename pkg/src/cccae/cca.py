"""Two-view canonical correlation analysis.

Covariances use the unbiased 1/(T-1) estimate with ``reg`` added to the
diagonal of each within-view covariance. Canonical correlations are the
singular values of the whitened cross-covariance
``Sxx^-1/2 Sxy Syy^-1/2``; their sum (the trace norm) is the quantity the
CCCAE objective maximises.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError

TRAIN_REG = 1e-4
EVAL_REG = 1e-8
DEGENERATE_GAP = 1e-10


@dataclass
class CcaConfig:
    reg: float = TRAIN_REG
    k: int | None = None  # None -> min(dx, dy)

    def __post_init__(self):
        if not self.reg > 0:
            raise DataError("CCA regularisation must be positive")


@dataclass
class CcaModel:
    Wx: np.ndarray
    Wy: np.ndarray
    mean_x: np.ndarray
    mean_y: np.ndarray
    correlations: np.ndarray

    def transform(self, X, Y):
        return (np.asarray(X) - self.mean_x) @ self.Wx, (np.asarray(Y) - self.mean_y) @ self.Wy


@dataclass
class CcaLossGrad:
    value: float
    grad_x: np.ndarray
    correlations: np.ndarray
    degenerate: bool = False  # repeated singular values: grad is a subgradient


def inv_sqrt_psd(S, floor):
    """S^-1/2 for a symmetric PSD matrix, eigenvalues clamped at ``floor``."""
    w, V = np.linalg.eigh(S)
    w = np.maximum(w, floor)
    return (V / np.sqrt(w)) @ V.T


def _check_views(X, Y):
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] != Y.shape[0]:
        raise DataError(f"views have different lengths: {X.shape[0]} vs {Y.shape[0]}")
    if X.shape[0] < 2:
        raise DataError("CCA needs at least 2 observations")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise NumericalError("CCA input contains non-finite values")
    return X, Y


def _resolve_k(cfg, dx, dy):
    k = min(dx, dy) if cfg.k is None else cfg.k
    if not 1 <= k <= min(dx, dy):
        raise DataError(f"k={k} outside [1, {min(dx, dy)}]")
    return k


def _whitened(X, Y, reg):
    T = X.shape[0]
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Hx, Hy = X - mx, Y - my
    Sxx = Hx.T @ Hx / (T - 1) + reg * np.eye(X.shape[1])
    Syy = Hy.T @ Hy / (T - 1) + reg * np.eye(Y.shape[1])
    Sxy = Hx.T @ Hy / (T - 1)
    if not (np.all(np.isfinite(Sxx)) and np.all(np.isfinite(Syy)) and np.all(np.isfinite(Sxy))):
        raise NumericalError("non-finite covariance")
    Ax = inv_sqrt_psd(Sxx, reg)
    Ay = inv_sqrt_psd(Syy, reg)
    return mx, my, Hx, Hy, Ax, Ay, Ax @ Sxy @ Ay


def fit_cca(X, Y, cfg: CcaConfig | None = None) -> CcaModel:
    cfg = cfg or CcaConfig()
    X, Y = _check_views(X, Y)
    k = _resolve_k(cfg, X.shape[1], Y.shape[1])
    mx, my, _, _, Ax, Ay, Tm = _whitened(X, Y, cfg.reg)
    U, s, Vt = np.linalg.svd(Tm, full_matrices=False)
    return CcaModel(Ax @ U[:, :k], Ay @ Vt[:k].T, mx, my, s[:k].copy())


def total_correlation(X, Y, cfg: CcaConfig | None = None) -> float:
    """Sum of the top-k canonical correlations."""
    cfg = cfg or CcaConfig()
    X, Y = _check_views(X, Y)
    k = _resolve_k(cfg, X.shape[1], Y.shape[1])
    Tm = _whitened(X, Y, cfg.reg)[-1]
    return float(np.sum(np.linalg.svd(Tm, compute_uv=False)[:k]))


def cca_loss_grad(X, Y, cfg: CcaConfig | None = None) -> CcaLossGrad:
    """Total correlation and its gradient with respect to X (Y held fixed).

    With ``Tm = U S V^T`` the trace-norm gradient is
    ``dSxy = Ax U V^T Ay`` and ``dSxx = -1/2 Ax U S U^T Ax``, which chain
    to the centred X as ``(Hy dSxy^T + 2 Hx dSxx) / (T-1)``.
    """
    cfg = cfg or CcaConfig()
    X, Y = _check_views(X, Y)
    k = _resolve_k(cfg, X.shape[1], Y.shape[1])
    T = X.shape[0]
    _, _, Hx, Hy, Ax, Ay, Tm = _whitened(X, Y, cfg.reg)
    U, s, Vt = np.linalg.svd(Tm, full_matrices=False)
    Uk, sk, Vk = U[:, :k], s[:k], Vt[:k].T
    d_sxy = Ax @ Uk @ Vk.T @ Ay
    d_sxx = -0.5 * Ax @ (Uk * sk) @ Uk.T @ Ax
    grad = (Hy @ d_sxy.T + 2.0 * Hx @ d_sxx) / (T - 1)
    gaps = np.abs(np.diff(s))
    degenerate = bool(np.any(gaps[: max(k, 1)] < DEGENERATE_GAP)) if s.size > 1 else False
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite CCA gradient")
    return CcaLossGrad(float(np.sum(sk)), grad, sk.copy(), degenerate)


def local_cca(X, Y, window: int = 300, cfg: CcaConfig | None = None) -> float:
    """Mean over non-overlapping windows of the mean top-k canonical correlation.

    A trailing remainder shorter than ``window`` is dropped.
    """
    cfg = cfg or CcaConfig(reg=EVAL_REG)
    X, Y = _check_views(X, Y)
    T = X.shape[0]
    if window < 2:
        raise DataError("local CCA window must be at least 2 frames")
    if T < window:
        raise DataError(f"local CCA needs {window} frames, got {T} ({window - T} short)")
    k = _resolve_k(cfg, X.shape[1], Y.shape[1])
    scores = []
    for start in range(0, T - window + 1, window):
        sl = slice(start, start + window)
        scores.append(total_correlation(X[sl], Y[sl], cfg) / k)
    return float(np.mean(scores))


def n_windows(T: int, window: int = 300) -> int:
    return T // window
