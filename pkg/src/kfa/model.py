"""Random variables, hyperparameters and per-view state of the factor model.

Every view m explains an N x R_m observation matrix Y through the shared
latent rows ``z_n ~ N(0, I)``::

    y_n = z_n W^T + noise,   noise ~ N(0, tau^-1 I)

For a primal view Y is the feature matrix and W is D_m x K. For a
kernelized view Y holds kernel rows against the retained training samples
(relevance vectors) and W plays the part of the N x K dual matrix A.
Columns of W carry ARD precisions alpha_k; with ``double_ard`` every row r
additionally gets its own precision gamma_r.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import digamma

from . import kernels
from .kernels import CenteringStats, KernelConfig

CHECKPOINT_VERSION = 1

ROLES = ("input", "output")
REPRESENTATIONS = ("primal", "kernelized")


@dataclass
class ViewSpec:
    name: str
    role: str = "input"
    representation: str = "primal"
    kernel: Optional[KernelConfig] = None
    double_ard: bool = False
    learn_lambda: bool = False

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"view {self.name!r}: role must be one of {ROLES}")
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"view {self.name!r}: representation must be one of {REPRESENTATIONS}")
        if isinstance(self.kernel, dict):
            self.kernel = KernelConfig.from_dict(self.kernel)
        kernelized = self.representation == "kernelized"
        if kernelized != (self.kernel is not None):
            raise ValueError(f"view {self.name!r}: a kernel is required exactly for kernelized views")
        if self.double_ard and not kernelized:
            raise ValueError(f"view {self.name!r}: double_ard needs a kernelized view")
        if self.learn_lambda and (self.kernel is None or self.kernel.kind != "ard_rbf"):
            raise ValueError(f"view {self.name!r}: learn_lambda needs an ard_rbf kernel")

    @property
    def kernelized(self) -> bool:
        return self.representation == "kernelized"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "role": self.role,
            "representation": self.representation,
            "kernel": None if self.kernel is None else self.kernel.to_dict(),
            "double_ard": self.double_ard,
            "learn_lambda": self.learn_lambda,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ViewSpec":
        d = dict(d)
        if d.get("kernel") is not None:
            d["kernel"] = KernelConfig.from_dict(d["kernel"])
        return cls(**d)


@dataclass
class ViewData:
    """Raw rows of one view plus a row-level observation mask.

    Unobserved rows (semi-supervised targets) may hold NaN; they never enter
    the likelihood.
    """

    X: np.ndarray
    observed_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if self.observed_mask is None:
            mask = np.all(np.isfinite(X), axis=1)
        else:
            mask = np.asarray(self.observed_mask, dtype=bool)
        if mask.shape != (X.shape[0],):
            raise ValueError("observed_mask must have one entry per row")
        if not np.all(np.isfinite(X[mask])):
            raise ValueError("observed rows must be finite")
        self.X = X
        self.observed_mask = mask

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]


@dataclass
class Hyperparams:
    a_alpha: float = 1e-14
    b_alpha: float = 1e-14
    a_tau: float = 1e-14
    b_tau: float = 1e-14
    a_gamma: float = 1e-14
    b_gamma: float = 1e-14
    K_init: Optional[int] = None
    prune_factor_tol: float = 1e-6
    prune_rv_tol: float = 1e-6
    prune_rv_drift: float = 1e-6
    noise_floor: float = 1e-8

    def __post_init__(self):
        for name in ("a_alpha", "b_alpha", "a_tau", "b_tau", "a_gamma", "b_gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.prune_rv_drift >= 0:
            raise ValueError("prune_rv_drift must be non-negative")
        if not self.noise_floor >= 0:
            raise ValueError("noise_floor must be non-negative")
        if self.K_init is not None and int(self.K_init) < 1:
            raise ValueError("K_init must be >= 1")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class GammaPosterior:
    """Gamma(a, b) factors in shape/rate form (scalar or elementwise)."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.a.shape != self.b.shape:
            raise ValueError("shape and rate must have the same shape")
        if not (np.all(self.a > 0) and np.all(self.b > 0)):
            raise ValueError("Gamma shape and rate must be positive")

    @property
    def mean(self) -> np.ndarray:
        return self.a / self.b

    @property
    def mean_log(self) -> np.ndarray:
        return digamma(self.a) - np.log(self.b)

    def subset(self, idx) -> "GammaPosterior":
        return GammaPosterior(self.a[idx], self.b[idx])


PrecisionPosterior = GammaPosterior


@dataclass
class FactorPosterior:
    """Gaussian q(Z): one mean per row, covariance shared per mask group.

    ``groups[n]`` indexes ``covs``; rows observed in the same set of views
    share a covariance. With a single group ``cov`` is the K x K matrix.
    """

    mean: np.ndarray
    covs: np.ndarray
    groups: np.ndarray

    @property
    def cov(self) -> np.ndarray:
        if self.covs.shape[0] != 1:
            raise ValueError("rows do not share a single covariance; use covs[groups]")
        return self.covs[0]

    @property
    def n_factors(self) -> int:
        return self.mean.shape[1]

    def second_moment(self, rows=None) -> np.ndarray:
        """Sum over the selected rows of E[z_n z_n^T]."""
        if rows is None:
            mu, g = self.mean, self.groups
        else:
            mu, g = self.mean[rows], self.groups[rows]
        counts = np.bincount(g, minlength=self.covs.shape[0]).astype(float)
        return mu.T @ mu + np.einsum("g,gij->ij", counts, self.covs)


@dataclass
class DualPosterior:
    """Gaussian q over the rows of a view's weight (or dual) matrix.

    Single ARD: every row has covariance ``cov_shared``. Double ARD: row r
    has covariance ``basis @ diag(row_scales[r]) @ basis.T`` which stores
    R distinct K x K covariances in O(RK + K^2) memory.
    """

    mean: np.ndarray
    cov_shared: Optional[np.ndarray] = None
    basis: Optional[np.ndarray] = None
    row_scales: Optional[np.ndarray] = None

    def __post_init__(self):
        if (self.cov_shared is None) == (self.basis is None):
            raise ValueError("exactly one of cov_shared / per-row covariances must be set")

    @property
    def per_row(self) -> bool:
        return self.cov_shared is None

    @property
    def n_rows(self) -> int:
        return self.mean.shape[0]

    @property
    def cov_per_row(self) -> np.ndarray:
        """All row covariances materialized as an R x K x K array."""
        if not self.per_row:
            return np.broadcast_to(self.cov_shared, (self.n_rows,) + self.cov_shared.shape).copy()
        T = self.basis
        return np.einsum("ki,ri,li->rkl", T, self.row_scales, T)

    def row_cov_diag(self) -> np.ndarray:
        if not self.per_row:
            return np.broadcast_to(np.diag(self.cov_shared), self.mean.shape)
        return self.row_scales @ (self.basis ** 2).T

    def cov_sum(self) -> np.ndarray:
        if not self.per_row:
            return self.n_rows * self.cov_shared
        return (self.basis * self.row_scales.sum(0)) @ self.basis.T

    def second_moment(self) -> np.ndarray:
        """E[W^T W]."""
        return self.mean.T @ self.mean + self.cov_sum()

    def sq_moments(self) -> np.ndarray:
        """Elementwise E[W_rk^2]."""
        return self.mean ** 2 + self.row_cov_diag()

    def logdets(self) -> np.ndarray:
        if not self.per_row:
            _, ld = np.linalg.slogdet(self.cov_shared)
            return np.full(self.n_rows, ld)
        _, ld_t = np.linalg.slogdet(self.basis)
        return 2.0 * ld_t + np.log(self.row_scales).sum(1)

    def drop_rows(self, keep) -> "DualPosterior":
        if not self.per_row:
            return replace(self, mean=self.mean[keep])
        return replace(self, mean=self.mean[keep], row_scales=self.row_scales[keep])


@dataclass
class ViewState:
    """Everything the engine tracks for one view."""

    spec: ViewSpec
    data: ViewData
    dual: DualPosterior
    alpha: GammaPosterior
    tau: GammaPosterior
    gamma: Optional[GammaPosterior] = None
    kernel: Optional[KernelConfig] = None
    rv: Optional[np.ndarray] = None
    centering: Optional[CenteringStats] = None
    target: Optional[np.ndarray] = field(default=None, repr=False)
    kernel_full: Optional[np.ndarray] = field(default=None, repr=False)
    optimizer: dict = field(default_factory=dict, repr=False)

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def observed(self) -> np.ndarray:
        return self.data.observed_mask

    @property
    def n_cols(self) -> int:
        return self.target.shape[1]

    def refresh_target(self) -> None:
        """Rebuild the observation matrix from raw rows (and kernel settings)."""
        if not self.spec.kernelized:
            Y = np.where(self.observed[:, None], self.data.X, 0.0)
            self.target = Y
            return
        X = self.data.X
        K = kernels.compute_kernel(X, X, self.kernel)
        if self.kernel.center:
            K, self.centering = kernels.center_kernel(K)
        else:
            self.centering = None
        self.kernel_full = K
        if self.rv is None:
            self.rv = np.arange(X.shape[0])
        self.target = K[:, self.rv]

    def kernel_rows(self, new_rows: np.ndarray) -> np.ndarray:
        """Kernel rows of unseen samples against the retained relevance vectors."""
        K = kernels.compute_kernel(new_rows, self.data.X, self.kernel)
        if self.centering is not None:
            K = kernels.center_test_kernel(K, self.centering)
        return K[:, self.rv]

    def weight_sq_prior(self) -> np.ndarray:
        """Per-row prior scale multiplying alpha (gamma_r, or 1 without double ARD)."""
        if self.gamma is None:
            return np.ones(self.dual.n_rows)
        return self.gamma.mean


@dataclass
class ModelState:
    views: List[ViewState]
    z: FactorPosterior
    hyper: Hyperparams
    active_factors: np.ndarray
    group_patterns: np.ndarray
    seed: int = 0
    elbo_history: List[float] = field(default_factory=list)
    prune_events: List[int] = field(default_factory=list)

    @property
    def n_rows(self) -> int:
        return self.z.mean.shape[0]

    @property
    def n_factors(self) -> int:
        return self.z.mean.shape[1]

    @property
    def active_rvs(self) -> dict:
        return {v.name: v.rv for v in self.views if v.rv is not None}

    def view(self, name: str) -> ViewState:
        for v in self.views:
            if v.name == name:
                return v
        raise KeyError(f"unknown view {name!r}")

    def view_index(self, name: str) -> int:
        for i, v in enumerate(self.views):
            if v.name == name:
                return i
        raise KeyError(f"unknown view {name!r}")


def observed_moments(state: ModelState, view: ViewState) -> Tuple[np.ndarray, np.ndarray]:
    """<Z> on the view's observed rows and the matching sum of E[z z^T]."""
    obs = view.observed
    return state.z.mean[obs], state.z.second_moment(obs)


def default_k_init(views: Sequence[Tuple[ViewSpec, ViewData]]) -> int:
    n = views[0][1].n_rows
    dims = sum(n if s.kernelized else d.X.shape[1] for s, d in views)
    return int(max(1, min(n, dims, 100)))


def mask_groups(masks: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Group rows by observation pattern; returns (patterns G x M, row groups)."""
    patterns, groups = np.unique(masks, axis=0, return_inverse=True)
    return patterns.astype(bool), groups.reshape(-1).astype(np.int64)


def init_state(views: Sequence[Tuple[ViewSpec, ViewData]], hyper: Hyperparams, seed: int = 0) -> ModelState:
    """Random initial posteriors, deterministic given ``seed``.

    Latent means and dual means are standard normal (duals scaled by
    1/sqrt(K)); every Gamma factor starts at its prior.
    """
    if not views:
        raise ValueError("at least one view is required")
    names = [s.name for s, _ in views]
    if len(set(names)) != len(names):
        raise ValueError("view names must be unique")
    n = views[0][1].n_rows
    for s, d in views:
        if d.n_rows != n:
            raise ValueError(f"view {s.name!r} has {d.n_rows} rows, expected {n}")
    if not any(s.role == "input" for s, _ in views):
        raise ValueError("at least one input view is required")
    for s, d in views:
        if s.kernelized and not d.observed_mask.all():
            raise ValueError(f"kernelized view {s.name!r} must be fully observed")
    K = int(hyper.K_init) if hyper.K_init is not None else default_k_init(views)
    if K < 1:
        raise ValueError("K_init must be >= 1")

    rng = np.random.default_rng(seed)
    masks = np.column_stack([d.observed_mask for _, d in views])
    patterns, groups = mask_groups(masks)
    z = FactorPosterior(
        mean=rng.standard_normal((n, K)),
        covs=np.repeat(np.eye(K)[None], patterns.shape[0], axis=0),
        groups=groups,
    )

    states = []
    for spec, data in views:
        kcfg = kernels.resolve(spec.kernel, data.X) if spec.kernelized else None
        vs = ViewState(spec=spec, data=data, dual=None, alpha=None, tau=None, kernel=kcfg)
        vs.refresh_target()
        R = vs.n_cols
        mean = rng.standard_normal((R, K)) / np.sqrt(K)
        if spec.double_ard:
            dual = DualPosterior(mean=mean, basis=np.eye(K), row_scales=np.ones((R, K)))
            vs.gamma = GammaPosterior(np.full(R, hyper.a_gamma), np.full(R, hyper.b_gamma))
        else:
            dual = DualPosterior(mean=mean, cov_shared=np.eye(K))
        vs.dual = dual
        vs.alpha = GammaPosterior(np.full(K, hyper.a_alpha), np.full(K, hyper.b_alpha))
        vs.tau = GammaPosterior(np.asarray(hyper.a_tau), np.asarray(hyper.b_tau))
        states.append(vs)

    return ModelState(
        views=states, z=z, hyper=hyper, active_factors=np.arange(K),
        group_patterns=patterns, seed=int(seed),
    )


# ---------------------------------------------------------------------------
# checkpoints: a zip archive holding metadata.json plus little-endian float64
# (or int64) .npy members, each with its own shape header
# ---------------------------------------------------------------------------

def _put(zf: zipfile.ZipFile, name: str, arr) -> None:
    arr = np.asarray(arr)
    arr = arr.astype("<i8", order="C") if arr.dtype.kind in "biu" else arr.astype("<f8", order="C")
    buf = io.BytesIO()
    np.lib.format.write_array(buf, arr, allow_pickle=False)
    zf.writestr(f"arrays/{name}.npy", buf.getvalue())


def _get(zf: zipfile.ZipFile, name: str) -> np.ndarray:
    with zf.open(f"arrays/{name}.npy") as fh:
        return np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)


def save_state(state: ModelState, path, extra_meta: Optional[dict] = None, extra_arrays: Optional[dict] = None) -> None:
    meta = {
        "format": "kfa-checkpoint",
        "version": CHECKPOINT_VERSION,
        "seed": state.seed,
        "hyper": state.hyper.to_dict(),
        "elbo_history": [float(v) for v in state.elbo_history],
        "prune_events": [int(v) for v in state.prune_events],
        "views": [],
        "extra": extra_meta or {},
        "extra_arrays": sorted((extra_arrays or {}).keys()),
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        _put(zf, "z/mean", state.z.mean)
        _put(zf, "z/covs", state.z.covs)
        _put(zf, "z/groups", state.z.groups)
        _put(zf, "active_factors", state.active_factors)
        _put(zf, "group_patterns", state.group_patterns.astype(np.int64))
        for i, v in enumerate(state.views):
            spec = v.spec.to_dict()
            spec["kernel"] = None if v.kernel is None else v.kernel.to_dict()
            meta["views"].append(spec)
            p = f"view{i}/"
            _put(zf, p + "X", v.data.X)
            _put(zf, p + "observed", v.observed.astype(np.int64))
            _put(zf, p + "dual_mean", v.dual.mean)
            if v.dual.per_row:
                _put(zf, p + "dual_basis", v.dual.basis)
                _put(zf, p + "dual_row_scales", v.dual.row_scales)
            else:
                _put(zf, p + "dual_cov", v.dual.cov_shared)
            for nm in ("alpha", "tau", "gamma"):
                g = getattr(v, nm)
                if g is not None:
                    _put(zf, p + nm + "_a", g.a)
                    _put(zf, p + nm + "_b", g.b)
            if v.rv is not None:
                _put(zf, p + "rv", v.rv)
        for k, arr in (extra_arrays or {}).items():
            _put(zf, "extra/" + k, arr)
        zf.writestr("metadata.json", json.dumps(meta, indent=2, sort_keys=True))


def load_state(path) -> Tuple[ModelState, dict, dict]:
    """Inverse of :func:`save_state`; returns (state, extra_meta, extra_arrays)."""
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read("metadata.json"))
        if meta.get("format") != "kfa-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint {meta.get('format')!r} v{meta.get('version')}")
        z = FactorPosterior(_get(zf, "z/mean"), _get(zf, "z/covs"), _get(zf, "z/groups"))
        views = []
        for i, vd in enumerate(meta["views"]):
            p = f"view{i}/"
            spec = ViewSpec.from_dict(vd)
            X = _get(zf, p + "X")
            data = ViewData(X, _get(zf, p + "observed").astype(bool))
            names = set(zf.namelist())
            if f"arrays/{p}dual_basis.npy" in names:
                dual = DualPosterior(_get(zf, p + "dual_mean"), basis=_get(zf, p + "dual_basis"),
                                     row_scales=_get(zf, p + "dual_row_scales"))
            else:
                dual = DualPosterior(_get(zf, p + "dual_mean"), cov_shared=_get(zf, p + "dual_cov"))

            def gam(nm):
                if f"arrays/{p}{nm}_a.npy" not in names:
                    return None
                return GammaPosterior(_get(zf, p + nm + "_a"), _get(zf, p + nm + "_b"))

            rv = _get(zf, p + "rv") if f"arrays/{p}rv.npy" in names else None
            vs = ViewState(spec=spec, data=data, dual=dual, alpha=gam("alpha"), tau=gam("tau"),
                           gamma=gam("gamma"), kernel=spec.kernel, rv=rv)
            vs.refresh_target()
            views.append(vs)
        extra_arrays = {k: _get(zf, "extra/" + k) for k in meta.get("extra_arrays", [])}
        state = ModelState(
            views=views, z=z, hyper=Hyperparams(**meta["hyper"]),
            active_factors=_get(zf, "active_factors"),
            group_patterns=_get(zf, "group_patterns").astype(bool),
            seed=meta["seed"], elbo_history=list(meta["elbo_history"]),
            prune_events=list(meta["prune_events"]),
        )
    return state, meta.get("extra", {}), extra_arrays
