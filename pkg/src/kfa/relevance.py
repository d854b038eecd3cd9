"""Per-feature relevance learning for ARD-RBF kernel views.

Between mean-field sweeps the relevances lambda of an ``ard_rbf`` view are
moved uphill on the only part of the bound that depends on them, the
expected reconstruction error of the kernel::

    -<tau>/2 * sum_{n,u} (K_nu^2 - 2 K_nu <a_u><z_n>^T + <a_u^T a_u . z_n^T z_n>)
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .model import ModelState, ViewState, observed_moments


@dataclass
class LambdaOptConfig:
    """Ascent schedule for lambda.

    ``warmup`` mean-field sweeps run with lambda frozen before the first
    lambda step, so the gradient is taken against settled moments.
    """

    step_size: float = 1e-3
    steps_per_sweep: int = 10
    adaptive: bool = True
    select_threshold: float = 0.1
    max_halvings: int = 20
    warmup: int = 0

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.steps_per_sweep < 1:
            raise ValueError("steps_per_sweep must be >= 1")
        if self.select_threshold < 0:
            raise ValueError("select_threshold must be non-negative")
        if self.warmup < 0:
            raise ValueError("warmup must be non-negative")


def _require_ard(view: ViewState) -> None:
    if view.kernel is None or view.kernel.kind != "ard_rbf":
        raise ValueError(f"view {view.name!r} has no ard_rbf kernel")


def _kernel_at(view: ViewState, lam: np.ndarray) -> np.ndarray:
    """Observation matrix of the view (centered, RV columns) at relevances ``lam``."""
    X = view.data.X
    K = kernels.compute_kernel(X, X, replace(view.kernel, lam=lam))
    if view.kernel.center:
        K, _ = kernels.center_kernel(K)
    return K[:, view.rv]


def lb_lambda_term(state: ModelState, view: ViewState, lam) -> float:
    """Expected kernel log-likelihood at ``lam`` without the log-tau constant.

    The third (variance) term does not depend on lambda but is included, so
    an exact point-mass reconstruction evaluates to 0.
    """
    _require_ard(view)
    lam = np.asarray(lam, dtype=float)
    K = _kernel_at(view, lam)[view.observed]
    Zo, ZtZ = observed_moments(state, view)
    tau = float(view.tau.mean)
    cross = np.sum(K * (Zo @ view.dual.mean.T))
    return -0.5 * tau * (np.sum(K * K) - 2.0 * cross + np.sum(view.dual.second_moment() * ZtZ))


def lb_lambda_gradient(state: ModelState, view: ViewState, lam) -> np.ndarray:
    """Analytic gradient of :func:`lb_lambda_term` with respect to lambda."""
    _require_ard(view)
    lam = np.asarray(lam, dtype=float)
    X = view.data.X
    n = X.shape[0]
    K = _kernel_at(view, lam)
    Zo, _ = observed_moments(state, view)
    tau = float(view.tau.mean)
    obs = view.observed
    # dLB/dK on the observed rows and retained columns, embedded in n x n
    G = np.zeros((n, n))
    G[np.ix_(obs, view.rv)] = -tau * (K[obs] - Zo @ view.dual.mean.T)
    if view.kernel.center:
        # centering is linear: dLB/dK_raw = H G H
        G = G - G.mean(0, keepdims=True) - G.mean(1, keepdims=True) + G.mean()
    return kernels.ard_rbf_gradient(X, lam, weights=G)


def lambda_step(state: ModelState, view: ViewState, config: LambdaOptConfig) -> np.ndarray:
    """Run ``config.steps_per_sweep`` projected ascent steps on lambda.

    Each step is accepted only if the bound term does not drop; otherwise
    the step is halved (at most ``config.max_halvings`` times) and, failing
    that, the inner loop stops. The view's kernel and observation matrix
    are updated in place and the new lambda is returned.
    """
    _require_ard(view)
    lam = view.kernel.lam.copy()
    opt = view.optimizer
    if opt.get("lam_shape") != lam.shape:
        opt.clear()
        opt.update(m=np.zeros_like(lam), v=np.zeros_like(lam), t=0, lam_shape=lam.shape)
    current = lb_lambda_term(state, view, lam)
    for _ in range(config.steps_per_sweep):
        grad = lb_lambda_gradient(state, view, lam)
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"view {view.name!r}: non-finite lambda gradient")
        if not np.any(grad):
            break
        if config.adaptive:
            opt["t"] += 1
            opt["m"] = 0.9 * opt["m"] + 0.1 * grad
            opt["v"] = 0.999 * opt["v"] + 0.001 * grad ** 2
            mhat = opt["m"] / (1 - 0.9 ** opt["t"])
            vhat = opt["v"] / (1 - 0.999 ** opt["t"])
            direction = mhat / (np.sqrt(vhat) + 1e-8)
        else:
            direction = grad
        step = config.step_size
        accepted = False
        for _ in range(config.max_halvings + 1):
            cand = np.maximum(lam + step * direction, 0.0)
            value = lb_lambda_term(state, view, cand)
            if value >= current:
                lam, current, accepted = cand, value, True
                break
            step *= 0.5
        if not accepted:
            break
    view.kernel = replace(view.kernel, lam=lam)
    view.refresh_target()
    return lam


def select_features(lam, threshold: float = 0.1) -> np.ndarray:
    """Mask of features whose relevance is at least ``threshold * max(lam)``."""
    lam = np.asarray(lam, dtype=float)
    if lam.size == 0:
        raise ValueError("empty relevance vector")
    if not 0 <= threshold <= 1:
        raise ValueError("threshold must lie in [0, 1]")
    mask = lam >= threshold * lam.max()
    if not mask.any():
        mask[np.argmax(lam)] = True
    return mask


def relevance_image(lam, shape: Tuple[int, int]) -> np.ndarray:
    """Relevances scaled to 0..255 and laid out row-major as an image."""
    lam = np.asarray(lam, dtype=float)
    h, w = shape
    if h * w != lam.size:
        raise ValueError(f"image shape {shape} does not hold {lam.size} features")
    top = lam.max()
    scaled = lam / top if top > 0 else np.zeros_like(lam)
    return np.round(scaled * 255).astype(np.uint8).reshape(h, w)


def export_relevance(lam, out_dir, shape: Optional[Sequence[int]] = None,
                     threshold: float = 0.1, prefix: str = "relevance") -> list:
    """Write ``<prefix>.csv`` (feature_index, lambda, selected) and optionally a PGM mask."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lam = np.asarray(lam, dtype=float)
    mask = select_features(lam, threshold)
    csv_path = out_dir / f"{prefix}.csv"
    with open(csv_path, "w") as fh:
        fh.write("feature_index,lambda,selected\n")
        for i, (v, s) in enumerate(zip(lam, mask)):
            fh.write(f"{i},{v:.17g},{int(s)}\n")
    written = [csv_path]
    if shape is not None:
        img = relevance_image(lam, tuple(shape))
        pgm_path = out_dir / f"{prefix}.pgm"
        with open(pgm_path, "wb") as fh:
            fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
            fh.write(img.tobytes())
        written.append(pgm_path)
    return written
