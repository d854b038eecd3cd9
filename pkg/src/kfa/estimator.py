"""Fit/predict wrapper around the variational engine.

The wrapper builds the views (one or more input views plus one output
view), appends unlabeled rows with a masked output so they take part in
training, and reads predictions for them from their fitted latent means.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Dict, Optional, Sequence

import numpy as np

from . import inference
from .inference import FitConfig
from .kernels import KernelConfig
from .model import Hyperparams, ModelState, ViewData, ViewSpec
from .relevance import LambdaOptConfig

TASKS = ("regression", "classification")


class KFAModel:
    """Bayesian sparse factor model with kernelized inputs.

    Parameters
    ----------
    inputs : sequence of ViewSpec, optional
        Input views. Each view reads the feature columns given for its name
        in ``blocks`` (see :meth:`fit`), or all columns. Defaults to a single
        centered rbf view named ``"x"``.
    task : {"regression", "classification"}
        Classification one-hot encodes labels and predicts with the argmax.
    hyper, fit_config, lambda_opt
        Passed on to :func:`kfa.inference.fit`.
    seed : int
        Seed of the first restart.
    gamma : float, optional
        Overrides the width of every rbf input kernel (grid search hook).
    rv_budget : float, optional
        Overrides ``fit_config.rv_budget``.
    """

    def __init__(self, inputs: Optional[Sequence[ViewSpec]] = None, task: str = "regression",
                 hyper: Optional[Hyperparams] = None, fit_config: Optional[FitConfig] = None,
                 lambda_opt: Optional[LambdaOptConfig] = None, seed: int = 0,
                 gamma: Optional[float] = None, rv_budget: Optional[float] = None,
                 output_name: str = "y"):
        if task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        specs = list(inputs) if inputs else [
            ViewSpec("x", "input", "kernelized", kernel=KernelConfig(kind="rbf"))]
        if gamma is not None:
            specs = [replace(s, kernel=replace(s.kernel, gamma=float(gamma)))
                     if s.kernel is not None and s.kernel.kind == "rbf" else s for s in specs]
        for s in specs:
            if s.role != "input":
                raise ValueError(f"view {s.name!r} must have role 'input'")
        self.inputs = specs
        self.task = task
        self.hyper = hyper or Hyperparams()
        fc = fit_config or FitConfig()
        self.fit_config = replace(fc, rv_budget=rv_budget) if rv_budget is not None else fc
        self.lambda_opt = lambda_opt
        self.seed = seed
        self.output_name = output_name
        self.state_: Optional[ModelState] = None
        self.classes_: Optional[np.ndarray] = None

    # -- helpers ---------------------------------------------------------
    def _split(self, X: np.ndarray, blocks) -> Dict[str, np.ndarray]:
        out = {}
        for s in self.inputs:
            if blocks is not None and s.name in blocks:
                out[s.name] = X[:, np.asarray(blocks[s.name])]
            else:
                out[s.name] = X
        return out

    def _encode(self, Y) -> np.ndarray:
        Y = np.asarray(Y)
        if self.task == "classification":
            y = Y.reshape(-1)
            self.classes_ = np.unique(y)
            return (y[:, None] == self.classes_[None, :]).astype(float)
        Y = Y.astype(float)
        return Y[:, None] if Y.ndim == 1 else Y

    # -- public API ------------------------------------------------------
    def fit(self, X, Y, X_unlabeled=None, blocks=None) -> "KFAModel":
        """Fit on labeled rows ``(X, Y)`` plus optional unlabeled rows."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        T = self._encode(Y)
        if T.shape[0] != X.shape[0]:
            raise ValueError("X and Y differ in length")
        n_lab = X.shape[0]
        if X_unlabeled is not None:
            Xu = np.atleast_2d(np.asarray(X_unlabeled, dtype=float))
            X_all = np.vstack([X, Xu])
            T = np.vstack([T, np.full((Xu.shape[0], T.shape[1]), np.nan)])
            self._unlabeled = Xu.copy()
        else:
            X_all = X
            self._unlabeled = None
        self._blocks = blocks
        parts = self._split(X_all, blocks)
        views = [(s, ViewData(parts[s.name])) for s in self.inputs]
        views.append((ViewSpec(self.output_name, "output"), ViewData(T)))
        self.n_labeled_ = n_lab
        self.state_ = inference.fit(views, self.hyper, self.fit_config, self.seed, self.lambda_opt)
        return self

    def _check(self):
        if self.state_ is None:
            raise RuntimeError("model is not fitted")

    def decision(self, X) -> np.ndarray:
        """Posterior-mean output rows (regression values or one-hot scores)."""
        self._check()
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self._unlabeled is not None and X.shape == self._unlabeled.shape and np.array_equal(X, self._unlabeled):
            full = inference.predict(self.state_, None, self.output_name)
            return full[self.n_labeled_:]
        return inference.predict(self.state_, self._split(X, self._blocks), self.output_name)

    def predict(self, X) -> np.ndarray:
        """Regression targets, or per-class scores for classification."""
        return self.decision(X)

    def predict_labels(self, X) -> np.ndarray:
        if self.task != "classification":
            raise ValueError("labels are only defined for classification")
        return self.classes_[np.argmax(self.decision(X), axis=1)]

    @property
    def n_factors(self) -> int:
        self._check()
        return self.state_.n_factors

    @property
    def rv_percent(self) -> Optional[float]:
        """Retained relevance vectors in percent (mean over double-ARD views)."""
        self._check()
        pct = [100.0 * v.rv.size / v.data.n_rows for v in self.state_.views if v.gamma is not None]
        return float(np.mean(pct)) if pct else None
