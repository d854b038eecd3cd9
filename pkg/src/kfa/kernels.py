"""Kernel matrices between row sets, centering, and ARD-RBF derivatives."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

KERNEL_KINDS = ("linear", "rbf", "polynomial", "ard_rbf", "precomputed")


@dataclass(frozen=True)
class KernelConfig:
    """Kernel family and its parameters.

    ``gamma`` is the rbf width, ``degree``/``coef0`` apply to the polynomial
    kernel and ``lam`` holds one non-negative relevance per feature for
    ``ard_rbf``. With ``precomputed`` the view's rows already are kernel
    rows against the training samples. A ``gamma`` or ``lam`` of None means
    "pick from the data" (see :func:`default_gamma`).
    """

    kind: str = "rbf"
    gamma: Optional[float] = None
    degree: int = 2
    coef0: float = 1.0
    center: bool = True
    lam: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "rbf" and self.gamma is not None and not self.gamma > 0:
            raise ValueError("rbf gamma must be positive")
        if self.kind == "polynomial" and int(self.degree) < 1:
            raise ValueError("polynomial degree must be >= 1")
        if self.lam is not None:
            lam = np.asarray(self.lam, dtype=float)
            if lam.ndim != 1 or np.any(lam < 0) or not np.all(np.isfinite(lam)):
                raise ValueError("lambda must be a finite non-negative vector")
            object.__setattr__(self, "lam", lam)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "gamma": self.gamma, "degree": int(self.degree),
             "coef0": float(self.coef0), "center": bool(self.center)}
        d["lam"] = None if self.lam is None else [float(v) for v in self.lam]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "KernelConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        if d.get("lam") is not None:
            d["lam"] = np.asarray(d["lam"], dtype=float)
        return cls(**d)


@dataclass(frozen=True)
class CenteringStats:
    train_row_means: np.ndarray
    train_grand_mean: float


def _check_rows(a, b=None):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = a if b is None else np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"column mismatch: {a.shape[1]} vs {b.shape[1]}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("kernel inputs must be finite")
    return a, b


def sq_distances(a: np.ndarray, b: np.ndarray, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Pairwise (optionally feature-weighted) squared euclidean distances."""
    if weights is not None:
        s = np.sqrt(weights)
        a = a * s
        b = b * s
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    np.maximum(d, 0.0, out=d)
    if a is b:
        np.fill_diagonal(d, 0.0)
    return d


def default_gamma(rows: np.ndarray) -> float:
    """Width heuristic 1 / (D * median pairwise squared distance)."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    n, dim = rows.shape
    if n < 2:
        return 1.0 / max(dim, 1)
    d = sq_distances(rows, rows)
    med = np.median(d[np.triu_indices(n, 1)])
    if not med > 0:
        return 1.0 / max(dim, 1)
    return 1.0 / (dim * med)


def resolve(config: KernelConfig, rows: np.ndarray) -> KernelConfig:
    """Fill data-dependent defaults (rbf width, initial ARD relevances)."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if config.kind == "rbf" and config.gamma is None:
        return replace(config, gamma=default_gamma(rows))
    if config.kind == "ard_rbf" and config.lam is None:
        g = config.gamma if config.gamma is not None else default_gamma(rows)
        return replace(config, lam=np.full(rows.shape[1], g))
    return config


def compute_kernel(rows_a, rows_b, config: KernelConfig) -> np.ndarray:
    """Kernel matrix with entry (i, j) = K(a_i, b_j)."""
    same = rows_b is None or rows_b is rows_a
    if config.kind == "precomputed":
        K = np.atleast_2d(np.asarray(rows_a, dtype=float))
        n_train = K.shape[0] if same else np.atleast_2d(rows_b).shape[0]
        if K.shape[1] != n_train:
            raise ValueError(f"precomputed kernel rows have {K.shape[1]} columns, expected {n_train}")
        if not np.all(np.isfinite(K)):
            raise ValueError("kernel inputs must be finite")
        return K.copy()
    a, b = _check_rows(rows_a, None if same else rows_b)
    kind = config.kind
    if kind == "linear":
        K = a @ b.T
    elif kind == "polynomial":
        K = (a @ b.T + config.coef0) ** int(config.degree)
    elif kind == "rbf":
        if config.gamma is None:
            raise ValueError("rbf gamma unresolved; call kernels.resolve first")
        K = np.exp(-config.gamma * sq_distances(a, b))
    else:
        lam = config.lam
        if lam is None:
            raise ValueError("ard_rbf lambda unresolved; call kernels.resolve first")
        if lam.shape[0] != a.shape[1]:
            raise ValueError(f"lambda has {lam.shape[0]} entries, data has {a.shape[1]} features")
        K = np.exp(-sq_distances(a, b, lam))
    if same:
        K = 0.5 * (K + K.T)
    return K


def center_kernel(K_train: np.ndarray):
    """Double-center a square training kernel.

    Returns the centered matrix and the statistics needed to center test
    rows consistently (:func:`center_test_kernel`).
    """
    K = np.asarray(K_train, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"training kernel must be square, got {K.shape}")
    m = K.mean(axis=1)
    g = float(m.mean())
    Kc = K - m[:, None] - m[None, :] + g
    return Kc, CenteringStats(train_row_means=m, train_grand_mean=g)


def center_test_kernel(K_test: np.ndarray, stats: CenteringStats) -> np.ndarray:
    K = np.atleast_2d(np.asarray(K_test, dtype=float))
    m = stats.train_row_means
    if K.shape[1] != m.shape[0]:
        raise ValueError(f"test kernel has {K.shape[1]} columns, training set has {m.shape[0]}")
    return K - K.mean(axis=1, keepdims=True) - m[None, :] + stats.train_grand_mean


def ard_rbf_gradient(rows, lam, weights=None, rows_b=None) -> np.ndarray:
    """Derivative of the ARD-RBF kernel with respect to each relevance.

    dK(x_n, x_u)/dlam_d = -(x_nd - x_ud)^2 K(x_n, x_u).

    With ``weights`` (shape n_a x n_b) the contraction
    ``G_d = sum_{n,u} weights[n, u] dK[n, u]/dlam_d`` is returned as a
    length-D vector and the n_a x n_b x D tensor is never formed. Without
    it the full tensor is returned.
    """
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise ValueError("lambda must be non-negative")
    a, b = _check_rows(rows, rows_b)
    K = np.exp(-sq_distances(a, b, lam))
    if weights is None:
        diff2 = (a[:, None, :] - b[None, :, :]) ** 2
        return -diff2 * K[:, :, None]
    P = np.asarray(weights, dtype=float) * K
    # sum_nu P_nu (a_nd - b_ud)^2 expanded to avoid the 3-d tensor
    t = (a * a).T @ P.sum(1) + (b * b).T @ P.sum(0) - 2.0 * np.sum((a.T @ P) * b.T, axis=1)
    return -t
