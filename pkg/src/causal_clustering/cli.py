"""Command-line harness: simulate, fit, cluster, evaluate and the two benchmarks.

Every command resolves a configuration (defaults, then ``--config``, then
flags), writes ``manifest.json`` next to its outputs, and can be rerun from
that manifest with ``--config manifest.json``.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .cluster import (
    SELECTORS,
    LaplacianSpectrum,
    SonConfig,
    cluster_effects,
    son_cluster,
    spectral_cluster,
)
from .dataset import load_csv, make_folds, write_csv
from .forest import ForestParams
from .metrics import MetricsReport, adjusted_rand, excess_risk, nmi, pehe
from .pipeline import CrossfitResult, crossfit_cate, crossfit_kernel
from .simgen import (
    AdversarialConfig,
    RecoveryConfig,
    adversarial_cate,
    gen_adversarial,
    gen_gaussian_clusters,
)

log = logging.getLogger("causal_clustering")

MANIFEST_VERSION = 1
_FOREST_DEFAULTS = asdict(ForestParams())
_FOREST_DEFAULTS.pop("seed")

DEFAULTS = {
    "simulate": {
        "design": "recovery",
        "n": 1200,
        "k_true": 4,
        "cluster_sd": 0.6,
        "noise_sd": 0.5,
        "p": 20,
        "sigma": 1.0,
        "seed": 0,
    },
    "fit": {"data": None, "n_folds": 5, "clip": 0.01, "forest": _FOREST_DEFAULTS, "seed": 0},
    "cluster": {
        "bundle": None,
        "data": None,
        "test_data": None,
        "solver": "spectral",
        "selector": "eigengap",
        "k": None,
        "lam": None,
        "target_k": None,
        "k_max": 10,
        "seed": 0,
    },
    "evaluate": {"clusters": None, "data": None},
    "bench-recovery": {
        "k_values": [2, 3, 4, 5, 6],
        "n_seeds": 20,
        "n": 1200,
        "n_folds": 5,
        "clip": 0.01,
        "k_max": 10,
        "forest": _FOREST_DEFAULTS,
        "seed": 0,
    },
    "bench-adversarial": {
        "n_train": [800, 1000, 1200],
        "sigmas": [1.0, 2.0, 3.0, 4.0],
        "k_values": [2, 3, 4, 5, 6, 7, 8],
        "n_seeds": 10,
        "p": 20,
        "n_test": 2000,
        "test_seed": 2000,
        "n_folds": 5,
        "clip": 0.01,
        "forest": _FOREST_DEFAULTS,
        "grid_k": 6,
        "grid_size": 50,
        "seed": 0,
    },
}

_REQUIRED = {"fit": ["data"], "cluster": ["bundle"], "evaluate": ["clusters", "data"]}


class ConfigError(ValueError):
    pass


def _artifact_version():
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def resolve_config(command, file_cfg=None, overrides=None):
    """Merge defaults, a config (or manifest) dict and flag overrides; reject unknown keys."""
    cfg = copy.deepcopy(DEFAULTS[command])
    for source in (file_cfg or {}), (overrides or {}):
        if "command" in source and "config" in source:
            if source["command"] != command:
                raise ConfigError(f"manifest is for {source['command']!r}, not {command!r}")
            source = source["config"]
        for key, value in source.items():
            if key not in cfg:
                raise ConfigError(f"unknown config key {key!r} for {command}")
            if key == "forest":
                unknown = set(value) - set(_FOREST_DEFAULTS)
                if unknown:
                    raise ConfigError(f"unknown forest keys {sorted(unknown)}")
                cfg[key] = {**cfg[key], **value}
            else:
                cfg[key] = value
    for key in _REQUIRED.get(command, []):
        if cfg[key] is None:
            raise ConfigError(f"{command} requires {key!r}")
    _validate(command, cfg)
    return cfg


def _validate(command, cfg):
    if "forest" in cfg:
        ForestParams(**cfg["forest"], seed=0)
    if command == "simulate":
        if cfg["design"] == "recovery":
            RecoveryConfig(cfg["n"], cfg["k_true"], cfg["cluster_sd"], cfg["noise_sd"], cfg["seed"])
        elif cfg["design"] == "adversarial":
            AdversarialConfig(cfg["n"], cfg["p"], cfg["sigma"], cfg["seed"])
        else:
            raise ConfigError(f"unknown design {cfg['design']!r}")
    if command == "cluster":
        if cfg["solver"] not in ("spectral", "son"):
            raise ConfigError(f"unknown solver {cfg['solver']!r}")
        if cfg["selector"] not in SELECTORS:
            raise ConfigError(f"unknown selector {cfg['selector']!r}")
    if command in ("bench-recovery", "bench-adversarial") and cfg["n_seeds"] < 1:
        raise ConfigError("n_seeds must be positive")


def _forest(cfg, seed):
    return ForestParams(**cfg["forest"], seed=int(seed))


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not serializable: {type(o)}")


def _write_rows(path, header, rows):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for v in row])


def write_manifest(out, command, cfg):
    _write_json(
        Path(out) / "manifest.json",
        {
            "command": command,
            "config": cfg,
            "manifest_version": MANIFEST_VERSION,
            "versions": {"artifact": _artifact_version(), "numpy": np.__version__},
        },
    )


# --- commands ------------------------------------------------------------------------


def cmd_simulate(cfg, out):
    if cfg["design"] == "recovery":
        d = gen_gaussian_clusters(RecoveryConfig(cfg["n"], cfg["k_true"], cfg["cluster_sd"], cfg["noise_sd"], cfg["seed"]))
    else:
        d = gen_adversarial(AdversarialConfig(cfg["n"], cfg["p"], cfg["sigma"], cfg["seed"]))
    write_csv(d, out / "data.csv")
    return d


def cmd_fit(cfg, out):
    d = load_csv(cfg["data"])
    params = _forest(cfg, cfg["seed"])
    folds = make_folds(d.n, cfg["n_folds"], cfg["seed"])
    r = crossfit_cate(d, folds, params, cfg["clip"])
    (out / "bundle.json").write_text(r.to_json(), encoding="utf-8")
    _write_rows(out / "tau_hf.csv", ["id", "fold", "tau_hf"], zip(d.ids, r.folds.fold_of, r.tau_hf))
    np.savetxt(out / "kernel.csv", r.kernel_hf.values, delimiter=",", fmt="%.17g")
    return r


def _feature_summary(X, names, labels):
    rows = []
    for c in range(int(labels.max()) + 1):
        block = X[labels == c]
        for j, name in enumerate(names):
            v = block[:, j]
            q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0])
            sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
            rows.append([c, name, v.size, float(v.mean()), sd, *map(float, q)])
    return rows


def _write_cluster_outputs(out, prefix, ids, X, names, tau, res, info):
    res.to_csv(out / f"{prefix}clusters.csv", tau, ids)
    _write_rows(
        out / f"{prefix}cluster_summary.csv",
        ["cluster", "size", "mean_tau", "se"],
        zip(range(res.k), res.sizes, res.means, res.ses),
    )
    _write_rows(
        out / f"{prefix}cluster_features.csv",
        ["cluster", "feature", "size", "mean", "sd", "min", "q25", "median", "q75", "max"],
        _feature_summary(X, names, res.labels),
    )
    _write_json(out / f"{prefix}clusters.json", {**info, **res.summary()})


def cmd_cluster(cfg, out):
    r = CrossfitResult.from_dict(json.loads(Path(cfg["bundle"]).read_text(encoding="utf-8")))
    n, p = r.X.shape
    ids, names = np.arange(n), tuple(f"x{j + 1}" for j in range(p))
    if cfg["data"] is not None:
        d = load_csv(cfg["data"])
        ids, names = d.ids, d.feature_names
    if cfg["solver"] == "son" and cfg["lam"] is None and cfg["target_k"] is not None:
        n_clusters = int(cfg["target_k"])
    else:
        n_clusters = cfg["k"] if cfg["k"] is not None else cfg["selector"]
    res, info = cluster_effects(r.tau_hf, r.kernel_hf, cfg["solver"], n_clusters, cfg["lam"], cfg["k_max"], cfg["seed"])
    _write_cluster_outputs(out, "", ids, r.X, names, r.tau_hf, res, info)
    if cfg["test_data"] is not None:
        t = load_csv(cfg["test_data"])
        tres = cluster_unseen(r, t.features, res.k, info.get("lambda"), cfg["solver"], cfg["seed"])
        _write_cluster_outputs(
            out, "test_", t.ids, t.features, t.feature_names, tres.diagnostics["_tau"], tres, {"solver": cfg["solver"]}
        )
    return res, info


def cluster_unseen(r, X, k, lam, solver, seed):
    """Cluster new points with fitted fold forests, without refitting."""
    tau = r.predict(X)
    K = crossfit_kernel(r, X)
    if solver == "son":
        res = son_cluster(tau, K, SonConfig(lam=float(lam)))
    else:
        res = spectral_cluster(K, min(k, tau.size), tau, seed=seed)
    res.diagnostics["_tau"] = tau
    return res


def cmd_evaluate(cfg, out):
    with Path(cfg["clusters"]).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    tau_hat = np.array([float(r["tau_hat"]) for r in rows])
    labels = np.array([int(r["label"]) for r in rows])
    d = load_csv(cfg["data"])
    if d.n != tau_hat.size:
        raise ConfigError(f"cluster file has {tau_hat.size} rows, dataset has {d.n}")
    notes = []
    if d.true_cate is None:
        notes.append("no true_tau column: PEHE and excess risk omitted")
    if d.true_labels is None:
        notes.append("no true_label column: ARI, RI and NMI omitted")
    for note in notes:
        log.warning(note)
    rep = MetricsReport.compute(tau_hat, labels, d.true_cate, d.true_labels)
    _write_json(out / "metrics.json", {**rep.to_dict(), "notes": notes})
    (out / "metrics.csv").write_text(rep.to_csv_row(), encoding="utf-8")
    return rep


# --- benchmarks ----------------------------------------------------------------------

RECOVERY_METHODS = ("eigengap", "elbow", "silhouette", "gap")


def _recovery_cell(cfg, k_true, seed):
    with threadpool_limits(1):
        d = gen_gaussian_clusters(RecoveryConfig(n=cfg["n"], k_true=k_true, seed=seed))
        params = _forest(cfg, seed)
        r = crossfit_cate(d, make_folds(d.n, cfg["n_folds"], seed), params, cfg["clip"])
        spec = LaplacianSpectrum(r.kernel_hf)
        rows = []
        for method in RECOVERY_METHODS:
            sel = SELECTORS[method](spec, cfg["k_max"], seed)
            res = spectral_cluster(spec, sel.k, r.tau_hf, seed=seed)
            rows.append(
                {
                    "k_true": k_true,
                    "seed": seed,
                    "method": method,
                    "k_hat": res.k,
                    "ari": adjusted_rand(res.labels, d.true_labels),
                    "nmi": nmi(res.labels, d.true_labels),
                    "pehe": pehe(res.expand(), d.true_cate),
                }
            )
        rows.append(
            {
                "k_true": k_true,
                "seed": seed,
                "method": "causal_forest",
                "k_hat": None,
                "ari": None,
                "nmi": None,
                "pehe": pehe(r.tau_hf, d.true_cate),
            }
        )
    return rows


def _adversarial_cell(cfg, n_train, sigma, seed, grid):
    with threadpool_limits(1):
        d = gen_adversarial(AdversarialConfig(n_train, cfg["p"], sigma, seed))
        test = gen_adversarial(AdversarialConfig(cfg["n_test"], cfg["p"], 0.0, cfg["test_seed"]))
        r = crossfit_cate(d, make_folds(d.n, cfg["n_folds"], seed), _forest(cfg, seed), cfg["clip"])
        tau = r.predict(test.features)
        spec = LaplacianSpectrum(crossfit_kernel(r, test.features))
        base = pehe(tau, test.true_cate)
        rows = []
        for k in cfg["k_values"]:
            res = spectral_cluster(spec, k, tau, seed=seed)
            clustered = pehe(res.expand(), test.true_cate)
            rows.append(
                {
                    "n_train": n_train,
                    "sigma": float(sigma),
                    "seed": seed,
                    "k": k,
                    "pehe_clustered": clustered,
                    "pehe_base": base,
                    "excess_risk": excess_risk(clustered, base),
                }
            )
        grid_rows = _surface_grid(cfg, r, seed) if grid else None
    return rows, grid_rows


def _surface_grid(cfg, r, seed):
    """Cluster-mean effects over an (x1, x2) grid, other features at 0.5."""
    g = cfg["grid_size"]
    axis = (np.arange(g) + 0.5) / g
    x1, x2 = np.meshgrid(axis, axis, indexing="ij")
    X = np.full((g * g, cfg["p"]), 0.5)
    X[:, 0], X[:, 1] = x1.ravel(), x2.ravel()
    res = cluster_unseen(r, X, cfg["grid_k"], None, "spectral", seed)
    tau = res.diagnostics["_tau"]
    truth = adversarial_cate(X)
    return [[X[i, 0], X[i, 1], truth[i], tau[i], res.labels[i], res.means[res.labels[i]]] for i in range(X.shape[0])]


def _run_cells(fn, jobs, threads, cell_dir):
    """Run ``fn(*args)`` for every job, reusing finished cells saved in ``cell_dir``."""
    cell_dir.mkdir(parents=True, exist_ok=True)
    results, todo = {}, []
    for key, args in jobs:
        path = cell_dir / f"{key}.json"
        if path.exists():
            results[key] = json.loads(path.read_text(encoding="utf-8"))
        else:
            todo.append((key, args))

    def store(key, value):
        _write_json(cell_dir / f"{key}.json", value)
        results[key] = json.loads((cell_dir / f"{key}.json").read_text(encoding="utf-8"))

    if threads > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = {key: pool.submit(fn, *args) for key, args in todo}
            for key, fut in futures.items():
                store(key, fut.result())
    else:
        for key, args in todo:
            store(key, fn(*args))
    return [results[key] for key in sorted(results)]


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def cmd_bench_recovery(cfg, out, threads=1):
    seeds = [cfg["seed"] + s for s in range(1, cfg["n_seeds"] + 1)]
    jobs = [(f"k{k}_s{s:04d}", (cfg, k, s)) for k in cfg["k_values"] for s in seeds]
    cells = _run_cells(_recovery_cell, jobs, threads, out / "cells_recovery")
    rows = [row for cell in cells for row in cell]
    header = ["k_true", "seed", "method", "k_hat", "ari", "nmi", "pehe"]
    _write_rows(out / "bench_recovery_raw.csv", header, ([r[h] for h in header] for r in rows))
    table = []
    for method in (*RECOVERY_METHODS, "causal_forest"):
        sub = [r for r in rows if r["method"] == method]
        k_ok = _mean([float(r["k_hat"] == r["k_true"]) for r in sub]) if method != "causal_forest" else None
        table.append([method, _mean([r["ari"] for r in sub]), _mean([r["nmi"] for r in sub]), _mean([r["pehe"] for r in sub]), k_ok])
    _write_rows(out / "bench_recovery.csv", ["method", "ari", "nmi", "pehe", "k_accuracy"], table)
    return table


def cmd_bench_adversarial(cfg, out, threads=1):
    seeds = [cfg["seed"] + s for s in range(1, cfg["n_seeds"] + 1)]
    grid_cell = (max(cfg["n_train"]), float(cfg["sigmas"][0]), seeds[0])
    jobs = []
    for n in cfg["n_train"]:
        for sigma in cfg["sigmas"]:
            for s in seeds:
                grid = (n, float(sigma), s) == grid_cell
                jobs.append((f"n{n:06d}_sig{float(sigma):08.3f}_s{s:04d}", (cfg, n, float(sigma), s, grid)))
    cells = _run_cells(_adversarial_cell, jobs, threads, out / "cells_adversarial")
    rows = [row for cell, _ in cells for row in cell]
    header = ["n_train", "sigma", "seed", "k", "pehe_clustered", "pehe_base", "excess_risk"]
    _write_rows(out / "bench_adversarial_raw.csv", header, ([r[h] for h in header] for r in rows))
    table = []
    for n in cfg["n_train"]:
        for sigma in cfg["sigmas"]:
            for k in cfg["k_values"]:
                sub = [r for r in rows if r["n_train"] == n and r["sigma"] == float(sigma) and r["k"] == k]
                table.append(
                    [
                        n,
                        float(sigma),
                        k,
                        _mean([r["pehe_clustered"] for r in sub]),
                        _mean([r["pehe_base"] for r in sub]),
                        _mean([r["excess_risk"] for r in sub]),
                    ]
                )
    _write_rows(
        out / "bench_adversarial.csv", ["n_train", "sigma", "k", "pehe_clustered", "pehe_base", "excess_risk"], table
    )
    grid = next(g for _, g in cells if g is not None)
    _write_rows(out / "adversarial_grid.csv", ["x1", "x2", "tau_true", "tau_hat", "cluster", "tau_cluster"], grid)
    return table


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "cluster": cmd_cluster,
    "evaluate": cmd_evaluate,
    "bench-recovery": cmd_bench_recovery,
    "bench-adversarial": cmd_bench_adversarial,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="causal-clustering", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON config or a manifest.json from an earlier run")
        p.add_argument("--out", type=Path, default=None, help="output directory (default: current directory)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None, help="worker processes (default: available cores)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=JSON", help="override one config key")
        if name == "simulate":
            p.add_argument("--design", choices=["recovery", "adversarial"])
            p.add_argument("--n", type=int)
            p.add_argument("--k-true", type=int, dest="k_true")
            p.add_argument("--sigma", type=float)
        if name in ("fit", "cluster", "evaluate"):
            p.add_argument("--data", type=str)
        if name == "cluster":
            p.add_argument("--bundle", type=str)
            p.add_argument("--test-data", type=str, dest="test_data")
            p.add_argument("--solver", choices=["spectral", "son"])
            p.add_argument("--selector", choices=sorted(SELECTORS))
            p.add_argument("--k", type=int)
            p.add_argument("--lam", type=float)
            p.add_argument("--target-k", type=int, dest="target_k")
        if name == "evaluate":
            p.add_argument("--clusters", type=str)
        if name.startswith("bench"):
            p.add_argument("--n-seeds", type=int, dest="n_seeds")
    return parser


_NOT_CONFIG = {"command", "config", "out", "threads", "set"}


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG and v is not None}
    for item in args.set:
        key, _, raw = item.partition("=")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    try:
        file_cfg = json.loads(args.config.read_text(encoding="utf-8")) if args.config else None
        cfg = resolve_config(args.command, file_cfg, overrides)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = args.out or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    threads = args.threads or os.cpu_count() or 1
    try:
        if args.command.startswith("bench"):
            COMMANDS[args.command](cfg, out, threads)
        else:
            with threadpool_limits(1):
                COMMANDS[args.command](cfg, out)
        write_manifest(out, args.command, cfg)
    except Exception as exc:  # report and fail without a traceback
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
