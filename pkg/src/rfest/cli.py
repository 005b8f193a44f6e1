"""Command-line entry point: ``rfest {synth,fit,predict,evaluate,cluster,curvefit}``.

Options come from built-in defaults, then an optional JSON ``--config``
file, then explicit flags (flags win). The resolved run configuration is
echoed into every output: JSON outputs carry it inline, CSV and SVG
outputs get a ``<file>.meta.json`` sidecar. Nothing time-dependent is
written, so equal configurations give byte-identical files.

Exit codes: 0 success, 1 data or runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from rfest import __version__
from rfest.cluster import NO_STRUCTURE_SILHOUETTE, choose_k, cluster_profile, tsne_embed
from rfest.curves import FAMILIES, MIN_DT, CurveColumns, CurveFitError, curve_table, fit_curve_arrays
from rfest.ensembles import ForestParams, GbmParams, feature_importance
from rfest.evaluation import clamp_bounds, cross_validate
from rfest.pipeline import MODELS, ModelConfig, ModelFileError, RecoveryModel
from rfest.synth import POST, PRE, ScenarioConfig, generate
from rfest.tabular import (NUMERIC, DataError, drop_missing_target, dump_schema, load_csv,
                           load_schema, make_folds, standardize, write_csv)

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2

_MODEL_DEFAULTS = {
    "model": "gbm_icp", "stacking": False, "features": None, "split_ratio": 0.75,
    "n_trees": 500, "max_features": None, "min_samples_leaf": 5, "max_depth": None,
    "n_stages": 300, "learning_rate": 0.1, "gbm_max_depth": 3,
    "delta_t_column": "delta_t", "ooip_column": "ooip", "cum_oil_column": "cum_oil",
}

DEFAULTS = {
    "synth": {"scenario": PRE, "n": 400, "noise_sigma": None, "cluster_separation": 6.0,
              "missing_rate": 0.0, "seed": 0, "out": None, "schema_out": None},
    "fit": {**_MODEL_DEFAULTS, "data": None, "schema": None, "seed": 0, "out": None,
            "importance": None, "plot": False},
    "predict": {"model_file": None, "data": None, "schema": None, "alpha": [0.8, 0.9],
                "out": None},
    "evaluate": {**_MODEL_DEFAULTS, "data": None, "schema": None, "seed": 0, "folds": 10,
                 "loo": False, "alpha": [0.8, 0.9], "out_dir": None, "plot": False},
    "cluster": {"data": None, "schema": None, "seed": 0, "k_max": 6, "k": None,
                "columns": None, "tsne": True, "perplexity": 30.0, "tsne_iter": 1000,
                "out_dir": None, "plot": False},
    "curvefit": {"data": None, "schema": None, "families": list(FAMILIES),
                 "delta_t_column": "delta_t", "ooip_column": "ooip",
                 "cum_oil_column": "cum_oil", "out_dir": None, "plot": False},
}

REQUIRED = {
    "synth": ("out",),
    "fit": ("data", "schema", "out"),
    "predict": ("model_file", "data", "schema", "out"),
    "evaluate": ("data", "schema", "out_dir"),
    "cluster": ("data", "schema", "out_dir"),
    "curvefit": ("data", "schema", "out_dir"),
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- parsing

def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", choices=MODELS)
    p.add_argument("--stacking", action=argparse.BooleanOptionalAction,
                   help="append P/V and fitted-curve estimates as features")
    p.add_argument("--features", nargs="+", help="feature columns (default: all schema features)")
    p.add_argument("--split-ratio", type=float, help="ICP proper-training share")
    p.add_argument("--n-trees", type=int)
    p.add_argument("--max-features", type=int)
    p.add_argument("--min-samples-leaf", type=int)
    p.add_argument("--max-depth", type=int, help="forest tree depth limit")
    p.add_argument("--n-stages", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--gbm-max-depth", type=int)
    _add_curve_column_flags(p)


def _add_curve_column_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--delta-t-column")
    p.add_argument("--ooip-column")
    p.add_argument("--cum-oil-column")


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="input CSV")
    p.add_argument("--schema", help="schema JSON for the input CSV")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rfest", argument_default=argparse.SUPPRESS,
        description="Oil recovery factor estimation with prediction intervals.")
    parser.add_argument("--version", action="version", version=f"rfest {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file of options; explicit flags override it")
        return p

    p = command("synth", "write a synthetic scenario CSV")
    p.add_argument("--scenario", choices=(PRE, POST))
    p.add_argument("--n", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--cluster-separation", type=float)
    p.add_argument("--missing-rate", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output CSV")
    p.add_argument("--schema-out", help="schema JSON (default: <out stem>.schema.json)")

    p = command("fit", "fit a model on a whole dataset and write a model file")
    _add_data_flags(p)
    _add_model_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="model file (JSON)")
    p.add_argument("--importance", help="write split-count feature importance CSV here")
    p.add_argument("--plot", action=argparse.BooleanOptionalAction)

    p = command("predict", "predict with a saved model")
    p.add_argument("--model-file")
    _add_data_flags(p)
    p.add_argument("--alpha", type=float, nargs="+", help="confidence levels")
    p.add_argument("--out", help="output CSV")

    p = command("evaluate", "cross-validate a model configuration")
    _add_data_flags(p)
    _add_model_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--loo", action=argparse.BooleanOptionalAction, help="leave-one-out")
    p.add_argument("--alpha", type=float, nargs="+")
    p.add_argument("--out-dir")
    p.add_argument("--plot", action=argparse.BooleanOptionalAction)

    p = command("cluster", "k-means diagnostics, t-SNE embedding and cluster profiles")
    _add_data_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--k-max", type=int)
    p.add_argument("--k", type=int, help="force this cluster count")
    p.add_argument("--columns", nargs="+", help="numeric columns (default: numeric features)")
    p.add_argument("--tsne", action=argparse.BooleanOptionalAction)
    p.add_argument("--perplexity", type=float)
    p.add_argument("--tsne-iter", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--plot", action=argparse.BooleanOptionalAction)

    p = command("curvefit", "fit general production curves")
    _add_data_flags(p)
    p.add_argument("--families", nargs="+", choices=FAMILIES)
    _add_curve_column_flags(p)
    p.add_argument("--out-dir")
    p.add_argument("--plot", action=argparse.BooleanOptionalAction)
    return parser


def resolve_config(command: str, flags: dict) -> dict:
    """Defaults, then the config file, then explicit flags."""
    run = dict(DEFAULTS[command])
    config_path = flags.pop("config", None)
    if config_path is not None:
        try:
            data = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {config_path}: {exc}") from exc
        if not isinstance(data, dict):
            raise UsageError(f"config file {config_path} must hold a JSON object")
        data = {k.replace("-", "_"): v for k, v in data.items() if k != "command"}
        unknown = sorted(set(data) - set(run))
        if unknown:
            raise UsageError(f"unknown option(s) for {command!r} in {config_path}: "
                             + ", ".join(unknown))
        run.update(data)
    run.update(flags)
    missing = [k for k in REQUIRED[command] if run.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s): "
                         + ", ".join("--" + k.replace("_", "-") for k in missing))
    return {"command": command, **run}


def model_config(run: dict) -> ModelConfig:
    try:
        return ModelConfig(
            model=run["model"],
            forest=ForestParams(n_trees=run["n_trees"], max_features=run["max_features"],
                                min_samples_leaf=run["min_samples_leaf"],
                                max_depth=run["max_depth"]),
            gbm=GbmParams(n_stages=run["n_stages"], learning_rate=run["learning_rate"],
                          max_depth=run["gbm_max_depth"],
                          min_samples_leaf=run["min_samples_leaf"]),
            split_ratio=run["split_ratio"],
            stacking=bool(run["stacking"]),
            curve_columns=_curve_columns(run),
            features=tuple(run["features"]) if run["features"] else None,
            seed=int(run["seed"]),
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model configuration: {exc}") from exc


def _curve_columns(run: dict) -> CurveColumns:
    return CurveColumns(run["delta_t_column"], run["ooip_column"], run["cum_oil_column"])


def _alphas(run: dict) -> list[float]:
    alphas = sorted(float(a) for a in run["alpha"])
    if not alphas or any(not 0 < a < 1 for a in alphas):
        raise UsageError(f"confidence levels must lie in (0, 1), got {run['alpha']}")
    return alphas


# ---------------------------------------------------------------- output

def _meta(run: dict) -> dict:
    return {"software_version": __version__, "run_config": run}


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_sidecar(path: Path, run: dict) -> None:
    _write_json(path.with_name(path.name + ".meta.json"), _meta(run))


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return "" if np.isnan(value) else repr(float(value))
    return str(value)


def _write_rows(path: Path, header: list[str], rows, run: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    _write_sidecar(path, run)


def _out_dir(run: dict) -> Path:
    out = Path(run["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(run: dict):
    return load_csv(run["data"], load_schema(run["schema"]))


def _warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "rfest"
    return plt


def _save_svg(fig, path: Path, run: dict) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    _pyplot().close(fig)
    _write_sidecar(path, run)


# ---------------------------------------------------------------- commands

def cmd_synth(run: dict) -> None:
    try:
        cfg = ScenarioConfig(scenario=run["scenario"], n=int(run["n"]),
                             noise_sigma=run["noise_sigma"],
                             cluster_separation=float(run["cluster_separation"]),
                             missing_rate=float(run["missing_rate"]), seed=int(run["seed"]))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid scenario: {exc}") from exc
    ds = generate(cfg)
    out = Path(run["out"])
    write_csv(ds, out)
    _write_sidecar(out, {**run, "scenario_config": cfg.to_dict()})
    schema_out = Path(run["schema_out"]) if run["schema_out"] else out.with_suffix(".schema.json")
    dump_schema(ds.schema, schema_out)
    print(f"wrote {ds.n} rows to {out}")


def _importance_rows(model: RecoveryModel) -> list[tuple[str, int]]:
    est = model.estimator
    inner = getattr(est, "model", est)
    if not hasattr(inner, "trees"):
        return [(name, 0) for name in model.feature_names]
    counts = feature_importance(inner)
    rows = [(model.feature_names[j], int(counts.get(j, 0))) for j in range(len(model.feature_names))]
    return sorted(rows, key=lambda r: (-r[1], r[0]))


def cmd_fit(run: dict) -> None:
    config = model_config(run)
    ds, dropped = drop_missing_target(_load(run))
    if dropped:
        _warn(f"excluded {dropped} row(s) without a target")
    model = RecoveryModel.fit(ds, config)
    out = Path(run["out"])
    payload = model.to_dict()
    payload["run_config"] = run
    out.write_text(json.dumps(payload, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")
    if run["importance"]:
        path = Path(run["importance"])
        rows = _importance_rows(model)
        _write_rows(path, ["feature", "split_count"], rows, run)
        if run["plot"]:
            plt = _pyplot()
            fig, ax = plt.subplots(figsize=(6, 0.3 * len(rows) + 1))
            ax.barh([r[0] for r in rows][::-1], [r[1] for r in rows][::-1])
            ax.set_xlabel("split count")
            fig.tight_layout()
            _save_svg(fig, path.with_suffix(".svg"), run)
    print(f"fitted {config.model} on {ds.n} rows; model written to {out}")


def cmd_predict(run: dict) -> None:
    alphas = _alphas(run)
    model = RecoveryModel.load(run["model_file"])
    ds = _load(run)
    point, bounds = model.predict_intervals(ds, alphas)
    header = ["row", "y_pred"]
    for a in alphas:
        header += [f"lower_{a!r}", f"upper_{a!r}"]
    clamped = {a: clamp_bounds(*bounds[a]) for a in alphas}
    rows = []
    for i in range(ds.n):
        row = [i, float(point[i])]
        for a in alphas:
            row += [float(clamped[a][0][i]), float(clamped[a][1][i])]
        rows.append(row)
    _write_rows(Path(run["out"]), header, rows, run)
    print(f"wrote {ds.n} predictions to {run['out']}")


def cmd_evaluate(run: dict) -> None:
    config = model_config(run)
    alphas = _alphas(run)
    ds = _load(run)
    keep = np.flatnonzero(~np.isnan(ds.y))
    dropped = ds.n - len(keep)
    if dropped:
        _warn(f"excluded {dropped} row(s) without a target")
    ds = ds.take(keep)
    try:
        plan = make_folds(ds.n, "loo" if run["loo"] else int(run["folds"]), seed=int(run["seed"]))
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    report = cross_validate(ds, config, plan, alphas, row_ids=keep)
    out = _out_dir(run)
    report.write_rows(out / "rows.csv")
    _write_sidecar(out / "rows.csv", run)
    summary = report.summary()
    summary["run_config"] = run
    summary["excluded_missing_target"] = dropped
    _write_json(out / "summary.json", summary)
    if run["plot"]:
        plt = _pyplot()
        order = np.argsort(report.y_pred, kind="stable")
        x = np.arange(report.n)
        fig, ax = plt.subplots(figsize=(7, 4))
        for a in reversed(alphas):
            ax.fill_between(x, report.lower[a][order], report.upper[a][order], alpha=0.3,
                            step="mid", label=f"{a:g} interval")
        ax.plot(x, report.y_pred[order], color="k", lw=1, label="prediction")
        ax.scatter(x, report.y_true[order], s=4, color="tab:red", label="true")
        ax.set_xlabel("rows sorted by prediction")
        ax.set_ylabel("recovery factor, %")
        ax.legend(loc="upper left")
        fig.tight_layout()
        _save_svg(fig, out / "intervals.svg", run)
    m = report.metrics()
    r2_text = "undefined" if m["r2"] is None else f"{m['r2']:.4f}"
    print(f"{plan.k} folds on {ds.n} rows: MAE {m['mae']:.4f}, R2 {r2_text}")


def cmd_cluster(run: dict) -> None:
    ds = _load(run)
    if run["columns"]:
        columns = list(run["columns"])
        for c in columns:
            if c not in ds:
                raise DataError(f"column {c!r} not in dataset")
    else:
        columns = [c for c in ds.feature_names if ds.spec(c).kind == NUMERIC]
    usable = []
    for c in columns:
        observed = ds[c][~np.isnan(ds[c])]
        if len(observed) >= 2 and np.ptp(observed) > 0:
            usable.append(c)
        else:
            _warn(f"column {c!r} is constant or empty; left out of clustering")
    if not usable:
        raise DataError("no usable numeric columns to cluster on")
    # only rows missing at most one clustering column are used
    n_missing = np.sum([ds.missing_mask(c) for c in usable], axis=0)
    keep = np.flatnonzero(n_missing <= 1)
    if len(keep) < ds.n:
        _warn(f"excluded {ds.n - len(keep)} row(s) missing more than one clustering column")
    ds = ds.take(keep)
    scaled, _ = standardize(ds, usable)
    X = scaled.matrix(usable)
    k_max = min(int(run["k_max"]), ds.n - 1)
    if k_max < 2:
        raise DataError(f"clustering needs at least 3 rows, got {ds.n}")
    diag = choose_k(X, k_max, seed=int(run["seed"]))
    k = int(run["k"]) if run["k"] is not None else diag.best_k
    if k not in diag.models:
        raise UsageError(f"--k must lie in 2..{k_max}")
    labels = diag.models[k].labels
    if not diag.has_structure:
        _warn(f"best silhouette {max(diag.silhouette):.3f} is below "
              f"{NO_STRUCTURE_SILHOUETTE}; no clear cluster structure")
    out = _out_dir(run)
    _write_rows(out / "diagnostics.csv", ["k", "inertia", "silhouette", "selected"],
                [[r["k"], r["inertia"], r["silhouette"], int(r["k"] == k)] for r in diag.rows()],
                run)
    _write_rows(out / "assignments.csv", ["row", "cluster"],
                [[int(r), int(c)] for r, c in zip(keep, labels)], run)
    profiles = {"run_config": run, "software_version": __version__, "columns": usable,
                "rows_used": int(ds.n), "rows_excluded": int(len(n_missing) - ds.n),
                "k": k, "has_structure": diag.has_structure,
                "profiles": {str(c): p for c, p in
                             cluster_profile(ds, labels, ds.feature_names).items()}}
    result = None
    if run["tsne"]:
        perplexity = float(run["perplexity"])
        if ds.n < 5 or perplexity >= ds.n - 1:
            raise UsageError(f"perplexity {perplexity} needs more than {perplexity + 1:g} rows")
        result = tsne_embed(X, perplexity=perplexity, seed=int(run["seed"]),
                            n_iter=int(run["tsne_iter"]))
        _write_rows(out / "embedding.csv", ["row", "tsne_1", "tsne_2", "cluster"],
                    [[int(keep[i]), result.Y[i, 0], result.Y[i, 1], int(labels[i])]
                     for i in range(ds.n)],
                    run)
        profiles["tsne"] = {"kl": result.kl, "kl_after_exaggeration": result.kl_after_exaggeration,
                            "history": [list(h) for h in result.history]}
    _write_json(out / "profiles.json", profiles)
    if run["plot"] and result is not None:
        plt = _pyplot()
        fig, ax = plt.subplots(figsize=(5, 5))
        for c in np.unique(labels):
            sel = labels == c
            ax.scatter(result.Y[sel, 0], result.Y[sel, 1], s=8, label=f"cluster {c}")
        ax.legend()
        ax.set_xticks([])
        ax.set_yticks([])
        fig.tight_layout()
        _save_svg(fig, out / "embedding.svg", run)
    print(f"selected k={k}; silhouette by k: "
          + ", ".join(f"{kk}:{s:.3f}" for kk, s in zip(diag.ks, diag.silhouette)))


def cmd_curvefit(run: dict) -> None:
    ds, dropped = drop_missing_target(_load(run))
    if dropped:
        _warn(f"excluded {dropped} row(s) without a target")
    cols = _curve_columns(run)
    for name in (cols.delta_t, cols.ooip, cols.cum_oil):
        if name not in ds:
            raise DataError(f"curve fitting needs column {name!r}")
    dt, V, P = ds[cols.delta_t], ds[cols.ooip], ds[cols.cum_oil]
    rf = ds.y / 100.0
    models = {}
    for family in run["families"]:
        if family not in FAMILIES:
            raise UsageError(f"unknown curve family {family!r}")
        models[family] = fit_curve_arrays(dt, V, P, rf, family)
    out = _out_dir(run)
    _write_json(out / "curves.json", {
        "run_config": run, "software_version": __version__,
        "models": {f: m.to_dict() for f, m in models.items()}})
    grid = np.arange(1.0, 41.0)
    observed_v = V[np.isfinite(V)]
    v_values = [float(v) for v in np.percentile(observed_v, [25, 50, 75])] if len(observed_v) else []
    rows = []
    for family, m in models.items():
        for r in curve_table(m, grid, v_values if m.family.endswith("_V") else (None,)):
            rows.append([r["family"], r["V"], r["delta_t"], r["f"]])
    _write_rows(out / "curve_table.csv", ["family", "V", "delta_t", "f"], rows, run)
    residuals = []
    for family, m in models.items():
        implied = np.full(ds.n, np.nan)
        usable = np.isfinite(dt) & np.isfinite(V) & np.isfinite(P) & (dt >= MIN_DT) & (V > 0)
        implied[usable] = P[usable] / (V[usable] * m(dt[usable], V[usable]))
        for i in range(ds.n):
            residuals.append([i, family, implied[i], rf[i], implied[i] - rf[i]])
    _write_rows(out / "residuals.csv", ["row", "family", "implied_rf", "rf", "residual"],
                residuals, run)
    if run["plot"]:
        plt = _pyplot()
        fig, ax = plt.subplots(figsize=(6, 4))
        for family, m in models.items():
            for v in (v_values if family.endswith("_V") else [None]):
                label = family if v is None else f"{family}, V={v:.3g}"
                ax.plot(grid, m(grid, v), label=label)
        ax.set_xlabel("years since production start")
        ax.set_ylabel("depleted fraction")
        ax.legend(fontsize=7)
        fig.tight_layout()
        _save_svg(fig, out / "curves.svg", run)
    for family, m in models.items():
        print(f"{family}: params {tuple(round(p, 6) for p in m.params)}, loss {m.loss:.6g}")


COMMANDS = {"synth": cmd_synth, "fit": cmd_fit, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "cluster": cmd_cluster, "curvefit": cmd_curvefit}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    flags = vars(args)
    command = flags.pop("command")
    try:
        run = resolve_config(command, flags)
        COMMANDS[command](run)
    except UsageError as exc:
        print(f"rfest {command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CurveFitError, ModelFileError, OSError, ValueError) as exc:
        print(f"rfest {command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
