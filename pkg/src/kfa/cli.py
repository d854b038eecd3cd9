"""Command-line entry point: ``kfa {fit,predict,cv,relevance,rv-sweep}``.

Settings come from a JSON config; command-line flags override config
values, which override built-in defaults. Exit codes: 0 success, 2 bad
config or data, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import harness, inference, relevance
from .estimator import KFAModel
from .inference import FitConfig, FitError, NumericalError
from .model import Hyperparams, ViewData, ViewSpec, load_state, save_state
from .relevance import LambdaOptConfig

log = logging.getLogger("kfa")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
CHECKPOINT_NAME = "model.kfa"


class ConfigError(ValueError):
    """Invalid configuration or input data."""


@dataclass
class ViewSource:
    spec: ViewSpec
    path: Path
    columns: Optional[List[str]] = None


@dataclass
class RunConfig:
    views: List[ViewSource]
    hyper: Hyperparams = field(default_factory=Hyperparams)
    fit: FitConfig = field(default_factory=FitConfig)
    lambda_opt: Optional[LambdaOptConfig] = None
    cv: Optional[harness.CVPlan] = None
    grid: Optional[Dict[str, list]] = None
    output_dir: Path = Path("kfa-out")
    seed: int = 0
    task: str = "regression"
    relevance: dict = field(default_factory=dict)
    rv_sweep: dict = field(default_factory=dict)

    @property
    def inputs(self) -> List[ViewSource]:
        return [v for v in self.views if v.spec.role == "input"]

    @property
    def outputs(self) -> List[ViewSource]:
        return [v for v in self.views if v.spec.role == "output"]


def _build(cls, section, name):
    if section is None:
        return None
    if not isinstance(section, dict):
        raise ConfigError(f"'{name}' must be an object")
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"'{name}': {exc}") from None


def parse_config(raw: dict, base_dir: Path, overrides: Optional[dict] = None) -> RunConfig:
    """Validate a config document; relative paths resolve against ``base_dir``."""
    raw = dict(raw)
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {"views", "hyper", "fit", "lambda_opt", "cv", "output_dir", "seed", "task", "relevance", "rv_sweep"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if not raw.get("views"):
        raise ConfigError("config needs a non-empty 'views' list")
    views = []
    for i, vd in enumerate(raw["views"]):
        vd = dict(vd)
        path = vd.pop("path", None)
        columns = vd.pop("columns", None)
        if path is None:
            raise ConfigError(f"view {i}: 'path' is required")
        p = Path(path)
        p = p if p.is_absolute() else base_dir / p
        if not p.exists():
            raise ConfigError(f"view {vd.get('name', i)!r}: data file {p} does not exist")
        try:
            spec = ViewSpec.from_dict(vd)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"view {i}: {exc}") from None
        views.append(ViewSource(spec, p, columns))
    cv_raw = raw.get("cv")
    grid = None
    if cv_raw is not None:
        cv_raw = dict(cv_raw)
        grid = cv_raw.pop("grid", None)
    task = raw.get("task", "regression")
    if task not in ("regression", "classification"):
        raise ConfigError("task must be 'regression' or 'classification'")
    fit_raw = raw.get("fit") or {}
    cfg = RunConfig(
        views=views,
        hyper=_build(Hyperparams, raw.get("hyper") or {}, "hyper"),
        fit=_build(FitConfig, fit_raw, "fit"),
        lambda_opt=_build(LambdaOptConfig, raw.get("lambda_opt"), "lambda_opt"),
        cv=_build(harness.CVPlan, cv_raw, "cv"),
        grid=grid,
        output_dir=Path(raw.get("output_dir", "kfa-out")),
        seed=int(raw.get("seed", 0)),
        task=task,
        relevance=dict(raw.get("relevance") or {}),
        rv_sweep=dict(raw.get("rv_sweep") or {}),
    )
    if not cfg.inputs:
        raise ConfigError("config needs at least one input view")
    if cfg.cv is not None and len(cfg.outputs) != 1:
        raise ConfigError("cross-validation needs exactly one output view")
    return cfg


def load_config(path: Optional[str], overrides: dict) -> RunConfig:
    if path is None:
        raise ConfigError("--config is required for this command")
    p = Path(path)
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return parse_config(raw, p.parent, overrides)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def _read_matrix(path: Path, columns: Optional[Sequence[str]] = None):
    """Header and matrix of a CSV; a zero-byte file reads as no rows."""
    if path.stat().st_size == 0:
        return list(columns or []), np.empty((0, len(columns or [])))
    try:
        header, data = harness.read_csv(path)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if columns:
        missing = [c for c in columns if c not in header]
        if missing:
            raise ConfigError(f"{path}: columns {missing} not found")
        data = data[:, [header.index(c) for c in columns]]
        header = list(columns)
    return header, data


def _load_views(cfg: RunConfig):
    loaded, n = [], None
    for src in cfg.views:
        header, data = _read_matrix(src.path, src.columns)
        if n is None:
            n = data.shape[0]
        elif data.shape[0] != n:
            raise ConfigError(f"view {src.spec.name!r} has {data.shape[0]} rows, expected {n}")
        if src.spec.role == "input" and not np.all(np.isfinite(data)):
            raise ConfigError(f"input view {src.spec.name!r} has missing values")
        loaded.append((src, header, data))
    return loaded


def _encode_output(data: np.ndarray, task: str, header):
    """Output matrix (one-hot for classification, NaN rows unobserved)."""
    if task == "regression":
        return data, list(header), None
    if data.shape[1] != 1:
        raise ConfigError("a classification output view needs exactly one label column")
    y = data[:, 0]
    seen = np.isfinite(y)
    if not np.all(y[seen] == np.round(y[seen])):
        raise ConfigError("class labels must be integers")
    classes = np.unique(y[seen]).astype(np.int64)
    onehot = np.full((y.size, classes.size), np.nan)
    onehot[seen] = (y[seen, None] == classes[None, :]).astype(float)
    return onehot, [f"score_{c}" for c in classes], classes


def _write_csv(path: Path, header, rows) -> None:
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_fit(cfg: RunConfig) -> Path:
    loaded = _load_views(cfg)
    views, meta = [], {"task": cfg.task, "views": {}}
    classes = None
    for src, header, data in loaded:
        if src.spec.role == "output":
            data, names, cls = _encode_output(data, cfg.task, header)
            if cls is not None:
                classes = cls
            meta["views"][src.spec.name] = {"columns": names, "source_columns": header}
        else:
            meta["views"][src.spec.name] = {"columns": header}
        views.append((src.spec, ViewData(data)))
    if classes is not None:
        meta["classes"] = [int(c) for c in classes]
    state = inference.fit(views, cfg.hyper, cfg.fit, cfg.seed, cfg.lambda_opt)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / CHECKPOINT_NAME
    save_state(state, ckpt, extra_meta=meta)
    _write_csv(out / "elbo_trace.csv", ["iteration", "elbo"],
               [(i + 1, v) for i, v in enumerate(state.elbo_history)])
    for src, _, _ in loaded:
        if src.spec.role != "output":
            continue
        v = state.view(src.spec.name)
        hidden = np.flatnonzero(~v.observed)
        if hidden.size and not v.spec.kernelized:
            pred = inference.predict(state, None, v.name)[hidden]
            _write_prediction(out / f"transductive_{v.name}.csv", pred, meta["views"][v.name]["columns"],
                              meta.get("classes"), row_index=hidden)
    summary = {
        "elbo": state.elbo_history[-1],
        "sweeps": len(state.elbo_history),
        "factors": state.n_factors,
        "rvs": {k: int(v.size) for k, v in state.active_rvs.items()},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("fit done: elbo %.10g, K=%d, checkpoint %s", summary["elbo"], state.n_factors, ckpt)
    return ckpt


def _write_prediction(path: Path, pred: np.ndarray, columns, classes, row_index=None) -> None:
    header = list(columns)
    rows = [list(r) for r in pred]
    if classes is not None:
        header.append("label")
        labels = np.asarray(classes)[np.argmax(pred, axis=1)] if pred.shape[0] else []
        rows = [r + [int(l)] for r, l in zip(rows, labels)]
    if row_index is not None:
        header = ["row"] + header
        rows = [[int(i)] + r for i, r in zip(row_index, rows)]
    _write_csv(path, header, rows)


def _parse_inputs(items: Sequence[str], state) -> Dict[str, Path]:
    names = [v.name for v in state.views if v.spec.role == "input"]
    out = {}
    for item in items:
        if "=" in item:
            name, p = item.split("=", 1)
        elif len(names) == 1:
            name, p = names[0], item
        else:
            raise ConfigError(f"--input {item!r}: use NAME=PATH, model has inputs {names}")
        if name not in names:
            raise ConfigError(f"unknown input view {name!r}; model has {names}")
        out[name] = Path(p)
    missing = set(names) - set(out)
    if missing:
        raise ConfigError(f"no data given for input views {sorted(missing)}")
    return out


def cmd_predict(checkpoint: Path, inputs: Sequence[str], out_dir: Path, target: Optional[str] = None) -> Path:
    try:
        state, meta, _ = load_state(checkpoint)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{checkpoint}: {exc}") from None
    outputs = [v for v in state.views if v.spec.role == "output" and not v.spec.kernelized]
    if target is None:
        if len(outputs) != 1:
            raise ConfigError(f"model has {len(outputs)} primal output views; pass --target")
        target = outputs[0].name
    paths = _parse_inputs(inputs, state)
    rows, n = {}, None
    for name, p in paths.items():
        if not p.exists():
            raise FileNotFoundError(f"input file {p} not found")
        v = state.view(name)
        d = v.data.X.shape[1]
        header, data = _read_matrix(p)
        if data.shape[0] == 0 and not header:
            data = np.empty((0, d))
        if data.shape[1] != d:
            raise ConfigError(f"{p}: {data.shape[1]} columns, view {name!r} was fitted with {d}")
        if not np.all(np.isfinite(data)):
            raise ConfigError(f"{p}: missing values in input rows")
        if n is not None and data.shape[0] != n:
            raise ConfigError("input files differ in row count")
        n = data.shape[0]
        rows[name] = data
    tv = state.view(target)
    columns = meta.get("views", {}).get(target, {}).get("columns") or [f"y{j}" for j in range(tv.data.X.shape[1])]
    pred = np.empty((0, len(columns))) if n == 0 else inference.predict(state, rows, target)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "predictions.csv"
    _write_prediction(path, pred, columns, meta.get("classes"))
    return path


def _dataset(cfg: RunConfig) -> harness.Dataset:
    loaded = _load_views(cfg)
    ins = [(s, h, d) for s, h, d in loaded if s.spec.role == "input"]
    (out_src, out_header, Y), = [(s, h, d) for s, h, d in loaded if s.spec.role == "output"]
    X = np.hstack([d for _, _, d in ins])
    blocks, start = {}, 0
    for s, _, d in ins:
        blocks[s.spec.name] = np.arange(start, start + d.shape[1])
        start += d.shape[1]
    keep = np.all(np.isfinite(Y), axis=1)
    if not keep.all():
        log.warning("cv: dropped %d rows without targets", int((~keep).sum()))
    X, Y = X[keep], Y[keep]
    if cfg.task == "classification":
        if Y.shape[1] != 1:
            raise ConfigError("a classification output view needs exactly one label column")
        _, Y = np.unique(Y[:, 0], return_inverse=True)
    features = [c for _, h, _ in ins for c in h]
    return harness.Dataset(out_src.path.stem, X, Y, features, out_header, blocks)


def _factory(cfg: RunConfig):
    specs = [v.spec for v in cfg.inputs]

    def make(**params):
        return KFAModel(specs, cfg.task, cfg.hyper, cfg.fit, cfg.lambda_opt, cfg.seed, **params)

    return make


def cmd_cv(cfg: RunConfig) -> Path:
    if cfg.cv is None:
        raise ConfigError("config has no 'cv' section")
    try:
        ds = _dataset(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    report = harness.run_cv(ds, _factory(cfg), cfg.cv, cfg.grid)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.output_dir / "cv_report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    log.info("cv %s: mean %s over %d folds, %d failures", report["metric"], report["mean"],
             len(report["per_fold"]), report["n_failures"])
    return path


def cmd_rv_sweep(cfg: RunConfig, percentages: Optional[Sequence[float]] = None) -> Path:
    pcts = percentages or cfg.rv_sweep.get("percentages")
    if not pcts:
        raise ConfigError("no RV percentages given (config 'rv_sweep.percentages' or --percentages)")
    if not any(v.spec.double_ard for v in cfg.inputs):
        raise ConfigError("rv-sweep needs a double_ard input view")
    plan = cfg.cv or harness.CVPlan(seed=cfg.seed)
    try:
        ds = _dataset(cfg)
        curve = harness.rv_sweep(ds, pcts, _factory(cfg), plan)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.output_dir / "rv_curve.csv"
    harness.write_curve(curve, path)
    return path


def cmd_relevance(checkpoint: Path, out_dir: Path, view: Optional[str] = None,
                  image_shape: Optional[Sequence[int]] = None, threshold: float = 0.1) -> List[Path]:
    try:
        state, _, _ = load_state(checkpoint)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{checkpoint}: {exc}") from None
    cands = [v for v in state.views if v.kernel is not None and v.kernel.kind == "ard_rbf"]
    if view is not None:
        cands = [v for v in cands if v.name == view]
    if len(cands) != 1:
        raise ConfigError("need exactly one ard_rbf view (use --view)")
    try:
        return relevance.export_relevance(cands[0].kernel.lam, out_dir, image_shape, threshold,
                                          prefix=f"relevance_{cands[0].name}")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="seed of the first restart (overrides config)")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--threads", type=int, help="BLAS threads, 0 = library default (env KFA_THREADS)")
    common.add_argument("-q", "--quiet", action="store_true", help="suppress per-sweep log lines")

    p = argparse.ArgumentParser(prog="kfa", description="Bayesian sparse factor analysis with kernelized observations.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("fit", parents=[common], help="fit a model and write a checkpoint")
    pp = sub.add_parser("predict", parents=[common], help="predict outputs for new rows")
    pp.add_argument("--checkpoint", required=True)
    pp.add_argument("--input", action="append", default=[], metavar="[VIEW=]CSV",
                    help="rows for an input view (repeat for several views)")
    pp.add_argument("--target", help="output view to predict")
    sub.add_parser("cv", parents=[common], help="nested cross-validation report")
    pr = sub.add_parser("relevance", parents=[common], help="export learnt feature relevances")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--view")
    pr.add_argument("--image-shape", type=int, nargs=2, metavar=("H", "W"))
    pr.add_argument("--threshold", type=float, default=0.1)
    ps = sub.add_parser("rv-sweep", parents=[common], help="score versus relevance-vector budget")
    ps.add_argument("--percentages", type=float, nargs="+")
    return p


def _threads(arg: Optional[int]) -> Optional[int]:
    if arg is None:
        env = os.environ.get("KFA_THREADS")
        if env is None or env.strip() == "":
            return None
        try:
            arg = int(env)
        except ValueError:
            raise ConfigError(f"KFA_THREADS must be an integer, got {env!r}") from None
    if arg < 0:
        raise ConfigError("thread count must be >= 0")
    return arg or None


def _dispatch(args) -> None:
    overrides = {"seed": args.seed, "output_dir": args.out}
    out = Path(args.out) if args.out else Path("kfa-out")
    if args.command == "fit":
        print(cmd_fit(load_config(args.config, overrides)))
    elif args.command == "cv":
        print(cmd_cv(load_config(args.config, overrides)))
    elif args.command == "rv-sweep":
        print(cmd_rv_sweep(load_config(args.config, overrides), args.percentages))
    elif args.command == "predict":
        print(cmd_predict(Path(args.checkpoint), args.input, out, args.target))
    elif args.command == "relevance":
        for path in cmd_relevance(Path(args.checkpoint), out, args.view, args.image_shape, args.threshold):
            print(path)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    logging.getLogger("kfa.inference.sweeps").setLevel(logging.WARNING if args.quiet else logging.INFO)
    try:
        limit = _threads(args.threads)
        with threadpool_limits(limits=limit):
            _dispatch(args)
    except (ConfigError, ValueError) as exc:
        log.error("error: %s", exc)
        return EXIT_CONFIG
    except (NumericalError, FitError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
