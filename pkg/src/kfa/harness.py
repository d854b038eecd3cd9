"""Evaluation protocol: CSV ingestion, nested cross-validation, metrics, RV sweeps."""

from __future__ import annotations

import csv
import hashlib
import itertools
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    """Features, targets and optional feature blocks (one per input view).

    ``Y`` is either an N x C real matrix or a length-N vector of integer
    class labels. ``blocks`` maps a view name to the feature columns that
    view sees; without it every input view gets all of ``X``.
    """

    name: str
    X: np.ndarray
    Y: np.ndarray
    feature_names: Optional[List[str]] = None
    target_names: Optional[List[str]] = None
    blocks: Optional[Dict[str, np.ndarray]] = None
    min_rows: int = field(default=10, repr=False, compare=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        Y = np.asarray(self.Y)
        if Y.ndim == 1 and Y.dtype.kind == "f":
            Y = Y[:, None]
        self.Y = Y
        if self.X.shape[0] != self.Y.shape[0]:
            raise ValueError(f"X has {self.X.shape[0]} rows, Y has {self.Y.shape[0]}")
        if self.n_rows < self.min_rows:
            raise ValueError(f"dataset {self.name!r} has {self.n_rows} rows, at least {self.min_rows} are required")
        if not np.all(np.isfinite(self.X)) or (self.Y.dtype.kind == "f" and not np.all(np.isfinite(self.Y))):
            raise ValueError(f"dataset {self.name!r} contains non-finite values")

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def is_classification(self) -> bool:
        return self.Y.ndim == 1

    def subset(self, rows) -> "Dataset":
        return Dataset(self.name, self.X[rows], self.Y[rows], self.feature_names, self.target_names, self.blocks,
                       min_rows=1)


def read_csv(path) -> tuple:
    """Header and float matrix of a numeric CSV file; empty cells become NaN.

    Blank lines are skipped, except in single-column files where they are
    missing values.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file, a header row is required") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                if len(header) != 1:
                    continue
                row = [""]
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} cells, found {len(row)}")
            try:
                rows.append([float(c) if c.strip() else np.nan for c in row])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return header, data


def load_dataset(path, target_columns: Sequence[str], name: Optional[str] = None,
                 classification: bool = False, blocks: Optional[Mapping[str, Sequence[str]]] = None) -> Dataset:
    """Read a CSV with a header, splitting the named target columns off.

    Rows holding any NaN are dropped and the count is reported.
    """
    header, data = read_csv(path)
    missing = [c for c in target_columns if c not in header]
    if missing:
        raise ValueError(f"{path}: target columns {missing} not in header")
    bad = ~np.all(np.isfinite(data), axis=1)
    if bad.any():
        log.warning("%s: dropped %d of %d rows containing NaN", path, int(bad.sum()), data.shape[0])
        data = data[~bad]
    t_idx = [header.index(c) for c in target_columns]
    f_idx = [i for i in range(len(header)) if i not in t_idx]
    features = [header[i] for i in f_idx]
    Y = data[:, t_idx]
    if classification:
        if len(t_idx) != 1:
            raise ValueError("classification needs exactly one label column")
        if not np.all(Y == np.round(Y)):
            raise ValueError("class labels must be integers")
        Y = Y[:, 0].astype(np.int64)
    block_idx = None
    if blocks:
        block_idx = {}
        for view, cols in blocks.items():
            unknown = [c for c in cols if c not in features]
            if unknown:
                raise ValueError(f"block {view!r}: unknown columns {unknown}")
            block_idx[view] = np.array([features.index(c) for c in cols])
    return Dataset(name or Path(path).stem, data[:, f_idx], Y, features, list(target_columns), block_idx)


# ---------------------------------------------------------------------------
# folds and scaling
# ---------------------------------------------------------------------------

@dataclass
class CVPlan:
    outer_folds: int = 10
    inner_folds: int = 3
    seed: int = 0
    standardize: bool = True

    def __post_init__(self):
        if self.outer_folds < 2 or self.inner_folds < 2:
            raise ValueError("fold counts must be >= 2")


def _row_hash(seed: int, row: int) -> int:
    h = hashlib.blake2b(f"{seed}:{row}".encode("ascii"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def fold_ids(n: int, folds: int, seed: int) -> np.ndarray:
    """Fold index per row from a seeded hash of the row index.

    Rows are ordered by hash and dealt round-robin, so fold sizes differ by
    at most one while staying a pure function of (row, seed, n).
    """
    if folds < 2 or folds > n:
        raise ValueError(f"cannot split {n} rows into {folds} folds")
    order = np.argsort([_row_hash(seed, i) for i in range(n)], kind="stable")
    ids = np.empty(n, dtype=np.int64)
    ids[order] = np.arange(n) % folds
    return ids


@dataclass
class Scaler:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, A: np.ndarray) -> "Scaler":
        mean = A.mean(axis=0)
        sd = A.std(axis=0)
        return cls(mean, np.where(sd > 0, sd, 1.0))

    def transform(self, A):
        return (A - self.mean) / self.scale

    def inverse(self, A):
        return A * self.scale + self.mean


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def r2_score(y_true, y_pred) -> float:
    """Coefficient of determination averaged uniformly over target columns.

    Columns with zero variance are skipped with a warning.
    """
    y = np.asarray(y_true, dtype=float)
    p = np.asarray(y_pred, dtype=float)
    if y.ndim == 1:
        y, p = y[:, None], p.reshape(-1, 1)
    if y.shape != p.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {p.shape}")
    ss_tot = ((y - y.mean(axis=0)) ** 2).sum(axis=0)
    ss_res = ((y - p) ** 2).sum(axis=0)
    ok = ss_tot > 0
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} zero-variance target column(s) excluded from R2")
    if not ok.any():
        raise ValueError("every target column has zero variance")
    return float(np.mean(1.0 - ss_res[ok] / ss_tot[ok]))


def macro_auc(labels, scores) -> float:
    """Unweighted mean of one-vs-rest AUCs from the rank statistic.

    Column j of ``scores`` scores class j. Classes with no positive or no
    negative example are skipped with a warning.
    """
    labels = np.asarray(labels).astype(np.int64)
    scores = np.asarray(scores, dtype=float)
    if scores.ndim == 1:
        scores = np.column_stack([-scores, scores])
    if scores.shape[0] != labels.shape[0]:
        raise ValueError("labels and scores differ in length")
    aucs = []
    for j in range(scores.shape[1]):
        pos = labels == j
        n_pos = int(pos.sum())
        n_neg = pos.size - n_pos
        if n_pos == 0 or n_neg == 0:
            warnings.warn(f"class {j} has no positive or no negative samples; excluded from AUC")
            continue
        ranks = rankdata(scores[:, j])
        aucs.append((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
    if not aucs:
        raise ValueError("no class admits an AUC")
    return float(np.mean(aucs))


def mix_kernels(K1, K2, mu: float) -> np.ndarray:
    """Convex combination mu * K1 + (1 - mu) * K2."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError("mu must lie in [0, 1]")
    K1 = np.asarray(K1, dtype=float)
    K2 = np.asarray(K2, dtype=float)
    if K1.shape != K2.shape:
        raise ValueError(f"kernel shapes differ: {K1.shape} vs {K2.shape}")
    return mu * K1 + (1.0 - mu) * K2


def gamma_grid(n_targets: int, size: int = 20) -> np.ndarray:
    """RBF widths log-spaced over [1e-8, 10^0.5], divided by the target count."""
    return np.logspace(-8, 0.5, size) / max(1, n_targets)


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

ModelFactory = Callable[..., object]


def _score(ds: Dataset, y_true, pred) -> float:
    if ds.is_classification:
        return macro_auc(y_true, pred)
    return r2_score(y_true, pred)


def _fit_predict(factory: ModelFactory, params: dict, train: Dataset, test: Dataset, plan: CVPlan):
    Xtr, Xte = train.X, test.X
    Ytr = train.Y
    yscale = None
    if plan.standardize:
        xs = Scaler.fit(Xtr)
        Xtr, Xte = xs.transform(Xtr), xs.transform(Xte)
        if not train.is_classification:
            yscale = Scaler.fit(Ytr)
            Ytr = yscale.transform(Ytr)
    model = factory(**params)
    model.fit(Xtr, Ytr, X_unlabeled=Xte, blocks=train.blocks)
    pred = np.asarray(model.predict(Xte), dtype=float)
    if yscale is not None:
        pred = yscale.inverse(pred)
    return model, pred


def _grid_points(grid: Optional[Mapping[str, Sequence]]) -> List[dict]:
    if not grid:
        return [{}]
    keys = sorted(grid)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def select_params(ds: Dataset, factory: ModelFactory, grid, plan: CVPlan) -> dict:
    """Grid point with the best mean inner-fold score (ties go to the first)."""
    points = _grid_points(grid)
    if len(points) == 1:
        return points[0]
    ids = fold_ids(ds.n_rows, plan.inner_folds, plan.seed + 1)
    best, best_score = points[0], -np.inf
    for p in points:
        scores = []
        for f in range(plan.inner_folds):
            tr, te = ds.subset(ids != f), ds.subset(ids == f)
            try:
                _, pred = _fit_predict(factory, p, tr, te, plan)
                scores.append(_score(ds, te.Y, pred))
            except Exception as exc:  # a failed grid point just loses
                log.warning("inner fit failed for %s: %s", p, exc)
                scores.append(-np.inf)
        s = float(np.mean(scores))
        if s > best_score:
            best, best_score = p, s
    return best


def run_cv(ds: Dataset, factory: ModelFactory, plan: Optional[CVPlan] = None,
           grid: Optional[Mapping[str, Sequence]] = None) -> dict:
    """Nested cross-validation report.

    ``factory(**params)`` must return a fresh object with
    ``fit(X, Y, X_unlabeled=..., blocks=...)`` and ``predict(X)``. Test rows
    are passed as unlabeled rows so semi-supervised models can use them.
    Hyperparameters in ``grid`` are chosen on inner folds of each outer
    training split only.
    """
    plan = plan or CVPlan()
    ids = fold_ids(ds.n_rows, plan.outer_folds, plan.seed)
    per_fold, factors, rv_percent, chosen, failures = [], [], [], [], []
    for f in range(plan.outer_folds):
        train, test = ds.subset(ids != f), ds.subset(ids == f)
        try:
            params = select_params(train, factory, grid, plan)
            model, pred = _fit_predict(factory, params, train, test, plan)
            score = _score(ds, test.Y, pred)
        except Exception as exc:
            log.warning("fold %d failed: %s", f, exc)
            failures.append({"fold": f, "error": f"{type(exc).__name__}: {exc}"})
            continue
        per_fold.append(score)
        chosen.append(params)
        factors.append(getattr(model, "n_factors", None))
        rv_percent.append(getattr(model, "rv_percent", None))
        log.info("fold %d: %s %.4f", f, "auc" if ds.is_classification else "r2", score)
    scores = np.array(per_fold, dtype=float)
    return {
        "dataset": ds.name,
        "metric": "auc" if ds.is_classification else "r2",
        "per_fold": [float(s) for s in per_fold],
        "mean": float(scores.mean()) if scores.size else None,
        "std": float(scores.std()) if scores.size else None,
        "factors": factors,
        "rv_percent": rv_percent,
        "params": chosen,
        "failures": failures,
        "n_failures": len(failures),
    }


def rv_sweep(ds: Dataset, percentages: Sequence[float], factory: ModelFactory,
             plan: Optional[CVPlan] = None, params: Optional[dict] = None) -> List[dict]:
    """Cross-validated score for each RV budget (percent of training rows).

    ``factory`` receives ``rv_budget`` as a fraction in (0, 1] on top of
    ``params``; it should build a double-ARD model that honours it.
    """
    plan = plan or CVPlan()
    pcts = [float(p) for p in percentages]
    for p in pcts:
        if not 0.0 < p <= 100.0:
            raise ValueError(f"RV percentage {p} outside (0, 100]")
    n_train = ds.n_rows - int(np.ceil(ds.n_rows / plan.outer_folds))
    curve = []
    for p in pcts:
        if p / 100.0 * n_train < 1.0:
            raise ValueError(f"{p}% of {n_train} training rows is less than one RV")
        budget = None if p == 100.0 else p / 100.0
        report = run_cv(ds, factory, plan, grid={k: [v] for k, v in dict(params or {}, rv_budget=budget).items()})
        rvs = [r for r in report["rv_percent"] if r is not None]
        curve.append({
            "percent": p,
            "mean": report["mean"],
            "std": report["std"],
            "rv_percent": float(np.mean(rvs)) if rvs else None,
            "n_failures": report["n_failures"],
        })
    return curve


def _cell(value) -> str:
    if value is None:
        return ""
    return repr(float(value)) if isinstance(value, float) else str(value)


def write_curve(curve: Sequence[dict], path) -> None:
    cols = ["percent", "mean", "std", "rv_percent", "n_failures"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in curve:
            w.writerow([_cell(row[c]) for c in cols])
