"""``earlysepsis`` command line: generate -> label -> split -> train -> evaluate -> horizon.

All randomness derives from ``--seed``. A run config is one JSON file::

    {"schema": "earlysepsis-run/1",
     "generator": {...GeneratorSpec fields...},
     "train": {"learning_rate": ..., "batch_size": ..., "mc_samples": ..., "max_epochs": ..., "patience": ...},
     "tcn": {...TCNConfig fields...},
     "search": {"n_calls": 20},
     "horizons": [0, 1, 2, 3, 4, 5, 6, 7],
     "min_obs": 10}

Every section is optional; unknown keys are rejected. Exit codes: 0 success,
1 user/configuration error, 2 data or contract error, 3 numerical failure.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import dtwknn, evaluation, pipeline, training
from .data import io as cio
from .data.cohort import build_cohort, derive_labels, mask_at_horizon
from .data.synthetic import GeneratorSpec, generate_synthetic
from .errors import ConfigError, DataError, EarlySepsisError
from .rng import substream
from .tcn import TCNConfig

log = logging.getLogger("earlysepsis")

RUN_SCHEMA = "earlysepsis-run/1"
SECTIONS = {"schema", "generator", "train", "tcn", "search", "horizons", "min_obs"}
TRAIN_KEYS = {"learning_rate", "batch_size", "mc_samples", "max_epochs", "patience"}
COHORT_ENV = "EARLYSEPSIS_COHORT"


# ------------------------------------------------------------------ config

def load_config(path):
    cfg = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            cfg = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(cfg) - SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    if cfg.get("schema", RUN_SCHEMA) != RUN_SCHEMA:
        raise ConfigError(f"unsupported config schema {cfg['schema']!r}, expected {RUN_SCHEMA!r}")
    _reject_unknown(cfg.get("train", {}), TRAIN_KEYS, "train")
    _reject_unknown(cfg.get("tcn", {}), {f.name for f in fields(TCNConfig)}, "tcn")
    _reject_unknown(cfg.get("search", {}), {"n_calls"}, "search")
    resolved = {
        "schema": RUN_SCHEMA,
        "generator": GeneratorSpec.from_dict(cfg.get("generator", {})).to_dict(),
        "train": dict(cfg.get("train", {})),
        "tcn": asdict(TCNConfig(**cfg.get("tcn", {}))),
        "search": {"n_calls": int(cfg.get("search", {}).get("n_calls", 20))},
        "horizons": [int(h) for h in cfg.get("horizons", evaluation.HORIZONS)],
        "min_obs": int(cfg.get("min_obs", 10)),
    }
    return resolved


def _reject_unknown(section, known, name):
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    unknown = sorted(set(section) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {unknown}")


def _train_config(cfg, method, seed):
    return training.TrainConfig.for_kind(method, seed=seed, **cfg["train"])


def _cohort_dir(args):
    path = args.cohort or os.environ.get(COHORT_ENV)
    if not path:
        raise ConfigError(f"no cohort directory: pass --cohort or set {COHORT_ENV}")
    return Path(path)


def _out_dir(args, force_empty_check=False):
    out = Path(args.out or ".")
    if force_empty_check and out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    Path(path).write_text(text, encoding="utf-8")
    return hashlib.sha256(text.encode()).hexdigest()


def _load_run(run_dir):
    p = Path(run_dir) / "run.json"
    if not p.exists():
        raise DataError(f"{run_dir} has no run.json; train first")
    return json.loads(p.read_text(encoding="utf-8"))


# ------------------------------------------------------------------ commands

def cmd_generate(args, cfg):
    spec = GeneratorSpec.from_dict(cfg["generator"])
    out = _out_dir(args, force_empty_check=True)
    raw = generate_synthetic(spec, args.seed)
    labels = derive_labels(raw)
    cohort = build_cohort(raw, labels, substream(args.seed, "matching"), min_obs=cfg["min_obs"])
    cio.write_raw(out, raw)
    cio.write_labels(out, labels)
    cio.write_cohort(out, cohort)
    digest = cio.write_manifest(out, args.seed, spec.to_dict(), raw, labels, cohort)
    print(f"cohort: {len(cohort.encounters)} encounters, prevalence {cohort.prevalence:.4f}, "
          f"manifest sha256 {digest}")


def cmd_label(args, cfg):
    src = _cohort_dir(args)
    raw = cio.read_raw(src)
    labels = derive_labels(raw)
    old = cio.read_labels(src) if (src / "labels.jsonl").exists() else None
    cio.write_labels(src, labels)
    n_cases = sum(lab[0] for lab in labels.values())
    changed = "" if old is None else f", {sum(old.get(k) != tuple(v) for k, v in labels.items())} changed"
    print(f"labeled {len(labels)} encounters: {n_cases} cases{changed}")


def cmd_split(args, cfg):
    src = _cohort_dir(args)
    cohort = cio.read_cohort(src)
    parts = evaluation.stratified_split(cohort.ids, [e.label for e in cohort.encounters], args.seed)
    out = _out_dir(args)
    digest = _write_json(out / f"split_seed{args.seed}.json",
                         {"seed": args.seed, "train": parts[0], "val": parts[1], "test": parts[2]})
    print(f"split seed {args.seed}: {len(parts[0])}/{len(parts[1])}/{len(parts[2])} (sha256 {digest})")


def _prepare(args, cfg):
    src = _cohort_dir(args)
    manifest = cio.read_manifest(src)
    cohort = cio.read_cohort(src)
    D = manifest["generator"]["n_channels"]
    return src, manifest, cohort, D, pipeline.prepare_split(cohort, D, args.seed, cfg["min_obs"])


def cmd_train(args, cfg):
    src, manifest, cohort, D, split = _prepare(args, cfg)
    out = _out_dir(args)
    run = {"method": args.method, "seed": args.seed, "cohort": str(src),
           "cohort_manifest": cio.sha256_file(src / "manifest.json"), "config": cfg}
    if args.method == "dtw-knn":
        (model, dist, k, results), _ = pipeline.fit_method(
            "dtw-knn", split, D, workers=args.workers, cache_path=out / "distances.bin", force=args.force)
        run.update({"k": k, "k_auprc": {str(kk): v for kk, v in results.items()},
                    "distance_digest": dist.digest})
        print(f"dtw-knn: selected k={k} (validation AUPRC {results[k]:.4f})")
    else:
        tc = _train_config(cfg, args.method, args.seed)
        result, _ = pipeline.fit_method(args.method, split, D, tc, TCNConfig(**cfg["tcn"]),
                                        max_seconds=args.max_seconds, log_path=out / "train_log.jsonl")
        best = result.best
        run.update({"best_epoch": best.epoch, "val_auprc": best.val_auprc, "stopped": result.stopped,
                    "checkpoint_sha256": best.save(out / "checkpoint.bin")})
        print(f"{args.method}: best epoch {best.epoch}, validation AUPRC {best.val_auprc:.4f} "
              f"({result.stopped})")
    _write_json(out / "run.json", run)


def _scorer(run_dir, run, split, D, workers):
    method = run["method"]
    if method == "dtw-knn":
        model = dtwknn.DTWKNNModel(pipeline.grids_of(split.train, D),
                                   np.array([e.label for e in split.train]), run["k"])
        return lambda encs: model.predict(pipeline.grids_of(encs, D), workers)
    ckpt_path = Path(run_dir) / "checkpoint.bin"
    if not ckpt_path.exists():
        raise DataError(f"missing checkpoint {ckpt_path}")
    ckpt = training.Checkpoint.load(ckpt_path)
    tc = ckpt.train_config
    return lambda encs: training.predict_proba(ckpt.model, encs, tc.mc_samples, tc.seed)


def cmd_evaluate(args, cfg):
    run = _load_run(args.run)
    args.seed = run["seed"]
    src, manifest, cohort, D, split = _prepare(args, cfg)
    score = _scorer(args.run, run, split, D, args.workers)
    test = mask_at_horizon(split.test, 0, cfg["min_obs"])
    y = np.array([e.label for e in test])
    s = score(test)
    res = {"method": run["method"], "seed": run["seed"], "n": len(test), "n_cases": int(y.sum()),
           "auprc": evaluation.auprc(y, s, "test"), "auc": evaluation.auc(y, s, "test")}
    out = Path(args.out or args.run)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "test_metrics.json", res)
    print(f"{run['method']} test: AUPRC {res['auprc']:.4f}, AUC {res['auc']:.4f} (n={res['n']})")


def cmd_horizon(args, cfg):
    if len(args.runs) < 2:
        raise ConfigError(f"horizon aggregation needs at least 2 runs (splits), got {len(args.runs)}")
    out = _out_dir(args)
    tables = []
    methods = set()
    for run_dir in args.runs:
        run = _load_run(run_dir)
        methods.add(run["method"])
        args.seed = run["seed"]
        _, _, _, D, split = _prepare(args, cfg)
        score = _scorer(run_dir, run, split, D, args.workers)
        table = pipeline.horizon_table(run["method"], score, split, cfg["horizons"], cfg["min_obs"])
        table.write(out / f"horizon_{run['method']}_seed{run['seed']}.csv")
        tables.append(table)
    aggregates = []
    for method in sorted(methods):
        agg = evaluation.aggregate_splits([t for t in tables if t.method == method])
        aggregates.append(agg)
    evaluation.write_plot_data(out / "horizon_plot.csv", aggregates)
    rows = evaluation.read_plot_data(out / "horizon_plot.csv")
    for r in rows:
        if r["metric"] == "auprc":
            print(f"{r['method']} h={r['horizon']}: AUPRC {r['mean']:.4f} +/- {r['std']:.4f}")


def cmd_search(args, cfg):
    src, manifest, cohort, D, split = _prepare(args, cfg)
    if args.method == "dtw-knn":
        raise ConfigError("dtw-knn has no gradient hyperparameters; use `train --method dtw-knn`")
    base = _train_config(cfg, args.method, args.seed)
    out = _out_dir(args)

    def objective(point):
        tc, nc = training.split_point(point, base)
        return training.train(split.train, split.val, tc, nc, D, max_seconds=args.max_seconds).best.val_auprc

    best, value, trials = training.random_search(training.SEARCH_SPACE, cfg["search"]["n_calls"],
                                                 args.seed, objective)
    _write_json(out / "search.json", {"method": args.method, "seed": args.seed, "best": best,
                                      "best_val_auprc": value,
                                      "trials": [{"point": p, "val_auprc": v} for p, v in trials]})
    print(f"best validation AUPRC {value:.4f} with {best}")


def cmd_dtw(args, cfg):
    src, manifest, cohort, D, split = _prepare(args, cfg)
    out = _out_dir(args)
    tr_grids = pipeline.grids_of(split.train, D)
    labels = np.array([e.label for e in split.train])
    if args.dtw_command == "build":
        dist = dtwknn.build_distance_matrices([e.id for e in split.train], tr_grids,
                                              out / "distances.bin", args.force, args.workers)
        print(f"distance matrices {dist.matrices.shape}, cohort digest {dist.digest}")
        return
    model = dtwknn.DTWKNNModel(tr_grids, labels)
    if args.dtw_command == "select-k":
        k, results = dtwknn.select_k(model, pipeline.grids_of(split.val, D),
                                     [e.label for e in split.val], workers=args.workers)
        _write_json(out / "select_k.json", {"k": k, "auprc": {str(kk): v for kk, v in results.items()}})
        print(f"selected k={k}")
        return
    model.k = args.k
    scores = model.predict(pipeline.grids_of(split.test, D), args.workers)
    _write_json(out / "predictions.json", {e.id: float(s) for e, s in zip(split.test, scores)})
    print(f"scored {len(scores)} test encounters with k={args.k}")


# ------------------------------------------------------------------ parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--seed", type=int, default=0, help="root seed")
    common.add_argument("--workers", type=int, default=None, help="worker threads (default: all CPUs)")
    common.add_argument("--out", default=None, help="output directory (default: current directory; "
                                                       "evaluate: the run directory)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--cohort", default=None, help=f"cohort directory (or ${COHORT_ENV})")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="earlysepsis", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="generate a synthetic labelled cohort")
    sub.add_parser("label", parents=[common], help="re-derive labels from raw events")
    sub.add_parser("split", parents=[common], help="write a stratified 80/10/10 split")
    for name in ("train", "search"):
        sp = sub.add_parser(name, parents=[common], help=f"{name} one method on one split")
        sp.add_argument("--method", choices=pipeline.METHODS, default="mgp-tcn")
        sp.add_argument("--max-seconds", type=float, default=None, help="wall-clock budget per training run")
    ev = sub.add_parser("evaluate", parents=[common], help="test metrics of a trained run at h=0")
    ev.add_argument("--run", required=True, help="run directory written by `train`")
    hz = sub.add_parser("horizon", parents=[common], help="horizon tables and aggregated plot data")
    hz.add_argument("--runs", nargs="+", required=True, help="run directories, one per split seed")
    dt = sub.add_parser("dtw", help="DTW-KNN utilities")
    dsub = dt.add_subparsers(dest="dtw_command", required=True)
    dsub.add_parser("build", parents=[common], help="build/cached per-channel distance matrices")
    pr = dsub.add_parser("predict", parents=[common], help="score the test split")
    pr.add_argument("--k", type=int, default=1)
    dsub.add_parser("select-k", parents=[common], help="choose k on the validation split")
    return p


COMMANDS = {"generate": cmd_generate, "label": cmd_label, "split": cmd_split, "train": cmd_train,
            "evaluate": cmd_evaluate, "horizon": cmd_horizon, "search": cmd_search, "dtw": cmd_dtw}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        log.info("resolved config: %s", json.dumps({"command": args.command, "seed": args.seed, **cfg},
                                                   sort_keys=True))
        COMMANDS[args.command](args, cfg)
    except EarlySepsisError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, OSError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
