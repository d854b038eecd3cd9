"""Mean-field coordinate ascent for the multi-view kernelized factor model."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, replace
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.special import gammaln

from .model import (
    DualPosterior,
    FactorPosterior,
    GammaPosterior,
    Hyperparams,
    ModelState,
    ViewData,
    ViewSpec,
    ViewState,
    init_state,
    observed_moments,
)

log = logging.getLogger(__name__)
sweep_log = logging.getLogger(__name__ + ".sweeps")

LOG2PI = np.log(2.0 * np.pi)
_JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class NumericalError(RuntimeError):
    """A precision matrix lost definiteness or the bound became non-finite."""


class FitError(RuntimeError):
    """Every restart of a fit failed."""


@dataclass
class FitConfig:
    max_iters: int = 10_000
    window: int = 100
    rel_tol: float = 1e-4
    restarts: int = 10
    prune_every: int = 10
    rv_budget: Optional[float] = None

    def __post_init__(self):
        if self.max_iters < self.window + 2:
            raise ValueError("max_iters must be at least window + 2")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.rv_budget is not None and not 0 < self.rv_budget <= 1:
            raise ValueError("rv_budget is a fraction in (0, 1]")


def inv_pd(P: np.ndarray) -> Tuple[np.ndarray, float]:
    """Inverse and log-determinant of the inverse of a symmetric PD matrix.

    Jitter escalates from 1e-10 to 1e-6 before giving up.
    """
    P = 0.5 * (P + P.T)
    eye = np.eye(P.shape[0])
    for jit in _JITTERS:
        try:
            c, low = linalg.cho_factor(P + jit * eye, lower=True, check_finite=True)
        except (linalg.LinAlgError, ValueError):
            continue
        inv = linalg.cho_solve((c, low), eye)
        return 0.5 * (inv + inv.T), -2.0 * float(np.log(np.diag(c)).sum())
    raise NumericalError("precision matrix is not positive definite")


def solve_pd(P: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve P X = B for symmetric PD ``P`` with equilibration and jitter."""
    diag = np.diag(P)
    if not np.all(diag > 0):
        raise NumericalError("precision matrix is not positive definite")
    d = np.sqrt(diag)
    Ps = P / d[:, None] / d[None, :]
    Ps = 0.5 * (Ps + Ps.T)
    eye = np.eye(P.shape[0])
    for jit in _JITTERS:
        try:
            c = linalg.cho_factor(Ps + jit * eye, lower=True)
        except (linalg.LinAlgError, ValueError):
            continue
        return linalg.cho_solve(c, B / d[:, None]) / d[:, None]
    raise NumericalError("precision matrix is not positive definite")


# ---------------------------------------------------------------------------
# update rules
# ---------------------------------------------------------------------------

def update_z(state: ModelState) -> FactorPosterior:
    """q(Z): rows observed in the same views share one covariance."""
    K = state.n_factors
    eta = np.zeros((state.n_rows, K))
    view_terms = []
    for v in state.views:
        tau = float(v.tau.mean)
        view_terms.append(tau * v.dual.second_moment())
        eta += tau * (v.target @ v.dual.mean) * v.observed[:, None]
    covs = np.empty((state.group_patterns.shape[0], K, K))
    for g, pattern in enumerate(state.group_patterns):
        P = np.eye(K)
        for m, on in enumerate(pattern):
            if on:
                P = P + view_terms[m]
        covs[g], _ = inv_pd(P)
    mean = np.einsum("nk,nkl->nl", eta, covs[state.z.groups])
    return FactorPosterior(mean=mean, covs=covs, groups=state.z.groups)


def update_dual(state: ModelState, view: ViewState) -> DualPosterior:
    """q(W) for a primal view or q(A) for a kernelized one."""
    Zo, ZtZ = observed_moments(state, view)
    tau = float(view.tau.mean)
    alpha = view.alpha.mean
    Y = view.target[view.observed]
    C = tau * (Y.T @ Zo)
    S = tau * ZtZ
    if view.gamma is None:
        P = np.diag(alpha) + S
        cov, _ = inv_pd(P)
        return DualPosterior(mean=solve_pd(P, C.T).T, cov_shared=cov)
    # (gamma_r diag(alpha) + S)^-1 for every row from one eigendecomposition:
    # B = D^-1/2 S D^-1/2 = U L U^T gives T diag(1 / (gamma_r + L)) T^T, T = D^-1/2 U
    isq = 1.0 / np.sqrt(alpha)
    B = isq[:, None] * S * isq[None, :]
    lam, U = np.linalg.eigh(0.5 * (B + B.T))
    lam = np.maximum(lam, 0.0)
    T = isq[:, None] * U
    scales = 1.0 / (view.gamma.mean[:, None] + lam[None, :])
    if not np.all(np.isfinite(scales)):
        raise NumericalError(f"view {view.name!r}: non-finite dual covariance")
    mean = ((C @ T) * scales) @ T.T
    return DualPosterior(mean=mean, basis=T, row_scales=scales)


def update_alpha(state: ModelState, view: ViewState) -> GammaPosterior:
    h = state.hyper
    R = view.dual.n_rows
    a = np.full(state.n_factors, h.a_alpha + 0.5 * R)
    if view.gamma is None:
        power = np.diag(view.dual.second_moment())
    else:
        power = view.gamma.mean @ view.dual.sq_moments()
    return GammaPosterior(a, h.b_alpha + 0.5 * power)


def update_gamma(state: ModelState, view: ViewState) -> GammaPosterior:
    if view.gamma is None:
        raise ValueError(f"view {view.name!r} has no double ARD prior")
    h = state.hyper
    R = view.dual.n_rows
    a = np.full(R, h.a_gamma + 0.5 * state.n_factors)
    b = h.b_gamma + 0.5 * view.dual.sq_moments() @ view.alpha.mean
    return GammaPosterior(a, b)


def expected_sq_residual(state: ModelState, view: ViewState) -> float:
    """E_q ||Y_obs - Z_obs W^T||^2 split into a plug-in and two PSD trace terms."""
    Zo, ZtZ = observed_moments(state, view)
    Y = view.target[view.observed]
    mu = view.dual.mean
    resid = Y - Zo @ mu.T
    z_cov = ZtZ - Zo.T @ Zo
    return float(np.sum(resid * resid) + np.sum(view.dual.cov_sum() * ZtZ) + np.sum((mu.T @ mu) * z_cov))


def update_tau(state: ModelState, view: ViewState) -> GammaPosterior:
    """q(tau), with <tau>^-1 kept above ``noise_floor`` times the mean square target.

    Without the floor an exactly low-rank view drives <tau> to infinity.
    The bound is unimodal in the rate, so the clamped rate is the optimum
    over the restricted family and ascent stays monotone.
    """
    h = state.hyper
    n_obs = int(view.observed.sum())
    sq = expected_sq_residual(state, view)
    if sq < -1e-9:
        raise NumericalError(f"view {view.name!r}: negative expected residual {sq}")
    a = h.a_tau + 0.5 * n_obs * view.n_cols
    b = h.b_tau + 0.5 * max(sq, 0.0)
    if h.noise_floor > 0 and n_obs:
        ms = float(np.mean(view.target[view.observed] ** 2))
        b = max(b, a * h.noise_floor * ms)
    return GammaPosterior(np.asarray(a), np.asarray(b))


# ---------------------------------------------------------------------------
# lower bound
# ---------------------------------------------------------------------------

def _gamma_terms(q: GammaPosterior, a0: float, b0: float) -> float:
    """E[log p(x)] + H[q(x)] summed over elements."""
    a, b = np.broadcast_arrays(q.a, q.b)
    elog = q.mean_log
    lp = a0 * np.log(b0) - gammaln(a0) + (a0 - 1.0) * elog - b0 * q.mean
    ent = a - np.log(b) + gammaln(a) + (1.0 - a) * (elog + np.log(b))
    return float(np.sum(lp) + np.sum(ent))


def view_elbo_terms(state: ModelState, view: ViewState) -> Dict[str, float]:
    h = state.hyper
    K = state.n_factors
    R = view.dual.n_rows
    n_obs = int(view.observed.sum())
    tau = float(view.tau.mean)
    out = {}
    out["likelihood"] = 0.5 * n_obs * view.n_cols * (float(view.tau.mean_log) - LOG2PI) \
        - 0.5 * tau * expected_sq_residual(state, view)
    sq = view.dual.sq_moments()
    elog_alpha = view.alpha.mean_log
    if view.gamma is None:
        row_prec, elog_row = np.ones(R), 0.0
    else:
        row_prec, elog_row = view.gamma.mean, float(np.sum(view.gamma.mean_log))
    out["weights_prior"] = 0.5 * R * float(np.sum(elog_alpha)) + 0.5 * K * elog_row - 0.5 * R * K * LOG2PI \
        - 0.5 * float(row_prec @ sq @ view.alpha.mean)
    out["weights_entropy"] = 0.5 * float(np.sum(view.dual.logdets())) + 0.5 * R * K * (1.0 + LOG2PI)
    out["alpha"] = _gamma_terms(view.alpha, h.a_alpha, h.b_alpha)
    out["tau"] = _gamma_terms(view.tau, h.a_tau, h.b_tau)
    if view.gamma is not None:
        out["gamma"] = _gamma_terms(view.gamma, h.a_gamma, h.b_gamma)
    return out


def compute_elbo(state: ModelState) -> float:
    z = state.z
    logdets = np.array([np.linalg.slogdet(c)[1] for c in z.covs])
    traces = np.trace(z.covs, axis1=1, axis2=2)
    g = z.groups
    K = state.n_factors
    # prior + entropy of q(Z); the 2*pi constants cancel
    total = float(np.sum(-0.5 * (np.sum(z.mean ** 2, 1) + traces[g]) + 0.5 * logdets[g] + 0.5 * K))
    for v in state.views:
        total += sum(view_elbo_terms(state, v).values())
    if not np.isfinite(total):
        raise NumericalError("lower bound is not finite")
    return total


# ---------------------------------------------------------------------------
# pruning
# ---------------------------------------------------------------------------

def factor_power(state: ModelState) -> np.ndarray:
    """Per-view share of each factor in the total column power (M x K)."""
    rows = []
    for v in state.views:
        p = np.diag(v.dual.second_moment())
        tot = p.sum()
        rows.append(p / tot if tot > 0 else np.zeros_like(p))
    return np.vstack(rows)


def _refresh_per_row_cov(state: ModelState, view: ViewState) -> DualPosterior:
    """Covariances of a double-ARD view recomputed with the means held fixed."""
    mean = view.dual.mean
    fresh = update_dual(state, view)
    return replace(fresh, mean=mean)


def prune_factors(state: ModelState, tol: Optional[float] = None) -> ModelState:
    """Drop factors whose power share is below ``tol`` in every view.

    The strongest factor always survives.
    """
    tol = state.hyper.prune_factor_tol if tol is None else tol
    share = factor_power(state).max(axis=0)
    keep = share >= tol
    if not keep.any():
        keep[np.argmax(share)] = True
    if keep.all():
        return state
    idx = np.flatnonzero(keep)
    z = state.z
    state.z = FactorPosterior(z.mean[:, idx], z.covs[:, idx][:, :, idx], z.groups)
    state.active_factors = state.active_factors[idx]
    for v in state.views:
        v.alpha = v.alpha.subset(idx)
        d = v.dual
        if d.per_row:
            v.dual = DualPosterior(mean=d.mean[:, idx], basis=np.eye(idx.size), row_scales=np.ones((d.n_rows, idx.size)))
        else:
            v.dual = DualPosterior(mean=d.mean[:, idx], cov_shared=d.cov_shared[np.ix_(idx, idx)])
    for v in state.views:
        if v.dual.per_row:
            v.dual = _refresh_per_row_cov(state, v)
    state.prune_events.append(len(state.elbo_history))
    return state


def rv_power(view: ViewState) -> np.ndarray:
    d = view.dual
    return np.sum(d.mean ** 2, 1) + d.row_cov_diag().sum(1)


def _keep_rows(view: ViewState, keep: np.ndarray) -> None:
    view.rv = view.rv[keep]
    view.target = view.kernel_full[:, view.rv]
    view.dual = view.dual.drop_rows(keep)
    view.gamma = view.gamma.subset(keep)


def training_outputs(state: ModelState) -> np.ndarray:
    """Inductive reconstruction of every output view at the training inputs.

    Falls back to the projected latent means when there is no output view.
    """
    inputs = {v.name: v.data.X for v in state.views if v.spec.role == "input"}
    Z = project(state, inputs)
    outs = [Z @ v.dual.mean.T for v in state.views if v.spec.role == "output" and not v.spec.kernelized]
    return np.hstack(outs) if outs else Z


def prune_rvs(state: ModelState, view: ViewState, tol: Optional[float] = None,
              budget: Optional[float] = None, max_drift: Optional[float] = None) -> ModelState:
    """Remove relevance vectors (kernel columns and dual rows) of a double-ARD view.

    Rows whose power relative to the strongest row is below ``tol`` go. With
    ``max_drift`` only the largest set of those (weakest first) whose removal
    moves the inductive training outputs by at most ``max_drift`` is removed.
    With ``budget`` (fraction of the original training rows) only the rows
    with the smallest <gamma> are kept. At least one row always stays.
    """
    if view.gamma is None:
        raise ValueError(f"view {view.name!r} has no double ARD prior")
    tol = state.hyper.prune_rv_tol if tol is None else tol
    power = rv_power(view)
    top = power.max()
    keep = power >= tol * top if top > 0 else np.ones_like(power, dtype=bool)
    if budget is not None:
        cap = max(1, int(np.ceil(budget * view.data.n_rows)))
        if keep.sum() > cap:
            order = np.argsort(view.gamma.mean, kind="stable")
            keep = np.zeros_like(keep)
            keep[order[:cap]] = True
    if not keep.any():
        keep[np.argmax(power)] = True
    if keep.all():
        return state
    if max_drift is not None and budget is None:
        keep = _drift_limited(state, view, keep, power, max_drift)
        if keep.all():
            return state
    _keep_rows(view, keep)
    state.prune_events.append(len(state.elbo_history))
    return state


def _drift_limited(state: ModelState, view: ViewState, keep: np.ndarray, power: np.ndarray,
                   max_drift: float) -> np.ndarray:
    """Largest weakest-first subset of the dropped rows within the drift limit (bisection)."""
    base = training_outputs(state)
    saved = (view.rv, view.target, view.dual, view.gamma)
    drop = np.flatnonzero(~keep)
    drop = drop[np.argsort(power[drop], kind="stable")]

    def mask(m):
        out = np.ones_like(keep)
        out[drop[:m]] = False
        return out

    def ok(m):
        _keep_rows(view, mask(m))
        try:
            return float(np.max(np.abs(training_outputs(state) - base))) <= max_drift
        finally:
            view.rv, view.target, view.dual, view.gamma = saved

    if ok(drop.size):
        return keep
    lo, hi = 0, drop.size  # ok(lo) holds, ok(hi) fails
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return mask(lo)


def _snapshot(state: ModelState):
    views = [(v.dual, v.alpha, v.gamma, v.rv, v.target) for v in state.views]
    return state.z, state.active_factors, len(state.prune_events), views


def _restore(state: ModelState, snap) -> None:
    state.z, state.active_factors, n_events, views = snap
    del state.prune_events[n_events:]
    for v, (dual, alpha, gamma, rv, target) in zip(state.views, views):
        v.dual, v.alpha, v.gamma, v.rv, v.target = dual, alpha, gamma, rv, target


def guarded_prune(state: ModelState, elbo: float, rel_slack: float = 1e-8) -> Tuple[bool, bool]:
    """Prune factors and relevance vectors with safeguards.

    A factor can carry a tiny share of a view's power and still explain a
    lot of a high-precision view, so factor prunes that lower the bound are
    rolled back. Relevance-vector prunes change the observed kernel columns
    (and hence the bound itself); they are limited by the drift of the
    inductive training outputs instead. Returns (factors pruned, rvs pruned).
    """
    snap = _snapshot(state)
    prune_factors(state)
    factors = len(state.prune_events) > snap[2]
    if factors and compute_elbo(state) < elbo - rel_slack * abs(elbo):
        _restore(state, snap)
        factors = False
    n_events = len(state.prune_events)
    for v in state.views:
        if v.gamma is not None:
            prune_rvs(state, v, max_drift=state.hyper.prune_rv_drift)
    return factors, len(state.prune_events) > n_events


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def sweep(state: ModelState, lambda_opt=None) -> ModelState:
    """One full pass: per view dual, alpha, gamma, tau; then Z; then lambda."""
    for v in state.views:
        v.dual = update_dual(state, v)
        v.alpha = update_alpha(state, v)
        if v.gamma is not None:
            v.gamma = update_gamma(state, v)
        v.tau = update_tau(state, v)
    state.z = update_z(state)
    if lambda_opt is not None:
        from .relevance import lambda_step

        for v in state.views:
            if v.spec.learn_lambda:
                lambda_step(state, v, lambda_opt)
    return state


def converged(history: Sequence[float], window: int = 100, rel_tol: float = 1e-4) -> bool:
    """Windowed stopping rule: the mean of the previous ``window`` bounds is
    within ``rel_tol`` (relative to |last|) of the last bound."""
    if len(history) < window + 1:
        return False
    last = history[-1]
    prev = np.mean(history[-window - 1:-1])
    return bool(prev > last - rel_tol * abs(last))


def _iterate(state: ModelState, cfg: FitConfig, lambda_opt) -> None:
    start = len(state.elbo_history)
    for it in range(1, cfg.max_iters + 1):
        lam = lambda_opt
        if lam is not None and len(state.elbo_history) < lam.warmup:
            lam = None
        sweep(state, lam)
        elbo = compute_elbo(state)
        state.elbo_history.append(elbo)
        sweep_log.info(
            "iter %d elbo %.10g K %d rvs %s", len(state.elbo_history), elbo, state.n_factors,
            {v.name: int(v.rv.size) for v in state.views if v.rv is not None},
        )
        if cfg.prune_every and it % cfg.prune_every == 0:
            _, rvs = guarded_prune(state, elbo)
            if rvs:
                # the bound now covers fewer kernel columns; restart the window
                start = len(state.elbo_history)
        if converged(state.elbo_history[start:], cfg.window, cfg.rel_tol):
            break
    if state.prune_events and state.prune_events[-1] == len(state.elbo_history):
        # leave q(Z) consistent with the pruned weights
        sweep(state, None)
        state.elbo_history.append(compute_elbo(state))


def run(state: ModelState, cfg: FitConfig, lambda_opt=None) -> ModelState:
    """Sweep an initialized state until convergence or ``cfg.max_iters``.

    With ``cfg.rv_budget`` the converged model is cut down to the budget
    and then run to convergence once more.
    """
    _iterate(state, cfg, lambda_opt)
    if cfg.rv_budget is not None:
        for v in state.views:
            if v.gamma is not None:
                prune_rvs(state, v, budget=cfg.rv_budget)
        _iterate(state, cfg, lambda_opt)
    return state


def fit(views: Sequence[Tuple[ViewSpec, ViewData]], hyper: Optional[Hyperparams] = None,
        fit_config: Optional[FitConfig] = None, seed: int = 0, lambda_opt=None) -> ModelState:
    """Fit from ``fit_config.restarts`` random initializations, keep the best bound.

    Restart r uses seed ``seed + r``.
    """
    hyper = hyper or Hyperparams()
    cfg = fit_config or FitConfig()
    best, failures = None, []
    for r in range(cfg.restarts):
        try:
            state = run(init_state(views, hyper, seed + r), cfg, lambda_opt)
        except NumericalError as exc:
            failures.append(f"restart {r} (seed {seed + r}): {exc}")
            log.warning("restart %d failed: %s", r, exc)
            continue
        log.info("restart %d: elbo %.6f after %d sweeps, K=%d", r, state.elbo_history[-1],
                 len(state.elbo_history), state.n_factors)
        if best is None or state.elbo_history[-1] > best.elbo_history[-1]:
            best = state
    if best is None:
        raise FitError("all restarts failed:\n  " + "\n  ".join(failures))
    return best


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

def project(state: ModelState, new_inputs: Dict[str, np.ndarray]) -> np.ndarray:
    """Posterior mean latent rows of unseen samples given their input views."""
    K = state.n_factors
    P = np.eye(K)
    eta = None
    for name, rows in new_inputs.items():
        v = state.view(name)
        if v.spec.role != "input":
            raise ValueError(f"view {name!r} is not an input view")
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if rows.shape[1] != v.data.X.shape[1]:
            raise ValueError(f"view {name!r}: expected {v.data.X.shape[1]} features, got {rows.shape[1]}")
        Y = v.kernel_rows(rows) if v.spec.kernelized else rows
        tau = float(v.tau.mean)
        P = P + tau * v.dual.second_moment()
        term = tau * (Y @ v.dual.mean)
        eta = term if eta is None else eta + term
    if eta is None:
        raise ValueError("no input rows given")
    cov, _ = inv_pd(P)
    return eta @ cov


def predict(state: ModelState, new_inputs: Optional[Dict[str, np.ndarray]], target_view: str) -> np.ndarray:
    """Posterior-mean reconstruction of ``target_view``.

    With ``new_inputs`` the latent rows are inferred from those input rows
    (inductive); with None the fitted latent means of every training row
    are used (transductive, covering rows whose target was unobserved).
    """
    v = state.view(target_view)
    if v.spec.role != "output":
        raise ValueError(f"view {target_view!r} is not an output view")
    if v.spec.kernelized:
        raise ValueError("prediction targets must be primal views")
    Z = state.z.mean if new_inputs is None else project(state, new_inputs)
    return Z @ v.dual.mean.T


def predict_classes(state: ModelState, new_inputs, target_view: str) -> np.ndarray:
    return np.argmax(predict(state, new_inputs, target_view), axis=1)


def clone(state: ModelState) -> ModelState:
    return copy.deepcopy(state)
