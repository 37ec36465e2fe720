"""Command-line runner: ``ofscnn {gradcheck,train,sweep,dataset,inspect}``.

Exit codes: 0 success, 1 experiment-level failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import FormatError, PlantedConfig, generate_planted, save_tensor
from .gradcheck import check_report, tiny_sample, tiny_spec
from .network import (Network, TrainingDiverged, TrainingTrace, evaluate, exhaustive_sweep,
                      run_one, train)

log = logging.getLogger("ofscnn")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


def _timestamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _out_dir(cfg: RunConfig, args) -> Path:
    out = Path(args.out or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _apply_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    if seed is None:
        return cfg
    cfg.optimizer = replace(cfg.optimizer, seed=seed)
    cfg.sweep.seeds = [seed + i for i in range(len(cfg.sweep.seeds))]
    cfg.gradcheck.seed = seed
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# --------------------------------------------------------------------------
# trace CSV
# --------------------------------------------------------------------------

def trace_header(n_learned: int) -> list:
    cols = ["iteration", "loss"]
    for j in range(n_learned):
        cols += [f"layer{j}_k", f"layer{j}_k_minus", f"layer{j}_k_plus", f"layer{j}_alpha"]
    return cols


def write_trace(path: Path, trace: TrainingTrace, n_learned: int) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(trace_header(n_learned))
        for r in trace.records:
            row = [r.iteration, repr(r.loss)]
            for k, km, kp, a in r.sizes:
                row += [repr(k), km, kp, repr(a)]
            w.writerow(row)


def read_trace(path) -> list:
    """Parse a trace CSV back into dicts of numbers."""
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out = []
    for row in rows:
        out.append({key: (int(v) if key == "iteration" or key.endswith(("_minus", "_plus")) else float(v))
                    for key, v in row.items()})
    return out


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_gradcheck(cfg: RunConfig, args) -> int:
    g = cfg.gradcheck
    if g.network == "tiny":
        spec = tiny_spec()
    elif g.network == "config":
        spec = cfg.network_spec()
    else:
        raise ConfigError(f"gradcheck.network: expected 'tiny' or 'config', got {g.network!r}")
    net = Network(spec, seed=g.seed)
    sample = tiny_sample(g.seed, g.batch, spec.input_resolution)
    report = check_report(net, sample, n_coords=g.n_coords, h=g.step, tol=g.tolerance,
                          seed=g.seed, corrupt_size_grad=g.corrupt_size_grad)
    out = _out_dir(cfg, args)
    _write_json(out / "gradcheck.json", report)
    status = "PASS" if report["passed"] else "FAIL"
    print(f"gradcheck {status}: max relative error {report['max_error']:.3e} "
          f"over {report['n_checked']} targets (worst: {report['worst_target']})")
    if not report["passed"]:
        print("failed kinds: " + ", ".join(report["failed_kinds"]))
    return EXIT_OK if report["passed"] else EXIT_FAILED


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    started = _timestamp()
    spec = cfg.network_spec()
    train_data, test_data = cfg.datasets()
    net = Network(spec, cfg.optimizer.seed)
    n_learned = len(net.ofs_layers)
    status, metrics, trace = "ok", None, None
    try:
        net, trace = train(spec, cfg.optimizer, train_data, net=net)
    except TrainingDiverged as exc:
        status, trace = f"diverged at iteration {exc.iteration}", exc.trace
        log.error("training diverged at iteration %d", exc.iteration)
    write_trace(out / "trace.csv", trace, n_learned)
    if status == "ok":
        metrics = evaluate(net, test_data, cfg.sweep.threshold)
        save_checkpoint(out / "checkpoint.ofsc", net.state_dict(),
                        meta={"config": cfg.to_dict(), "version": __version__})
    manifest = {
        "artifact_version": __version__,
        "config": cfg.to_dict(),
        "seed": cfg.optimizer.seed,
        "started": started,
        "finished": _timestamp(),
        "status": status,
        "outputs": {"trace": str(out / "trace.csv"),
                    "checkpoint": str(out / "checkpoint.ofsc") if status == "ok" else None},
        "metrics": metrics,
        "converged_sizes": trace.converged_sizes(cfg.optimizer.report_iteration),
        "final_sizes": [list(s) for s in trace.records[-1].sizes] if trace.records else [],
        "events": [list(e) for e in trace.events],
    }
    _write_json(out / "manifest.json", manifest)
    print(json.dumps({"status": status, "metrics": metrics,
                      "converged_sizes": manifest["converged_sizes"]}, default=_json_default))
    return EXIT_OK if status == "ok" else EXIT_FAILED


def _run_job(job):
    return run_one(*job)


def cmd_sweep(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    started = _timestamp()
    spec = cfg.network_spec()
    train_data, test_data = cfg.datasets()
    s = cfg.sweep
    runner = None
    if args.threads and args.threads > 1:
        def runner(jobs):
            with ProcessPoolExecutor(max_workers=args.threads) as pool:
                return list(pool.map(_run_job, jobs))
    rows, agg = exhaustive_sweep(spec, s.sizes, cfg.optimizer, train_data, test_data, s.seeds,
                                 layer=s.layer, k0=s.k0, threshold=s.threshold, runner=runner)
    write_sweep(out / "sweep.csv", rows, agg)
    manifest = {
        "artifact_version": __version__,
        "config": cfg.to_dict(),
        "seeds": list(s.seeds),
        "started": started,
        "finished": _timestamp(),
        "outputs": {"sweep": str(out / "sweep.csv")},
        "aggregate": [asdict(r) for r in agg],
    }
    _write_json(out / "manifest.json", manifest)
    for r in agg:
        f1 = "failed" if r.f1 is None else f"{r.f1:.4f}"
        print(f"{r.config:>10}  F1 {f1}  sizes {r.converged_sizes}")
    return EXIT_OK if all(r.status == "ok" for r in rows) else EXIT_FAILED


SWEEP_COLUMNS = ["row", "config", "seed", "status", "f1", "two_afc", "accuracy", "converged_sizes"]


def write_sweep(path: Path, rows, agg) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for kind, group in (("run", rows), ("mean", agg)):
            for r in group:
                w.writerow([kind, r.config, "" if r.seed is None else r.seed, r.status,
                            _fmt(r.f1), _fmt(r.two_afc), _fmt(r.accuracy),
                            " ".join(repr(float(k)) for k in r.converged_sizes)])


def read_sweep(path) -> list:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        for key in ("f1", "two_afc", "accuracy"):
            r[key] = float(r[key]) if r[key] else None
        r["seed"] = int(r["seed"]) if r["seed"] else None
        r["converged_sizes"] = [float(v) for v in r["converged_sizes"].split()]
    return rows


def _fmt(v):
    return "" if v is None else repr(float(v))


def cmd_dataset(cfg: RunConfig, args) -> int:
    if cfg.data.source != "planted":
        raise ConfigError("dataset generate: data.source must be 'planted'")
    out = _out_dir(cfg, args)
    written = {}
    for split in ("train", "test"):
        ds = generate_planted(cfg.planted(split))
        save_tensor(out / f"{split}_images.ofst", ds.samples)
        save_tensor(out / f"{split}_labels.ofst", ds.labels.astype(np.float64))
        written[split] = {"images": str(out / f"{split}_images.ofst"),
                          "labels": str(out / f"{split}_labels.ofst"), "n": len(ds)}
    _write_json(out / "dataset.json", {"config": asdict(cfg.data), "files": written})
    print(json.dumps(written))
    return EXIT_OK


def cmd_inspect(args) -> int:
    try:
        meta, state = load_checkpoint(args.checkpoint)
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    layers = {}
    for key, value in state.items():
        layer, _, field_name = key.partition(".")
        if field_name in ("k", "k_minus", "k_plus", "alpha"):
            layers.setdefault(layer, {})[field_name] = value
    print(json.dumps({"version": meta.get("version"), "learned_layers": layers}, indent=2, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ofscnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_common(p):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")
        p.add_argument("--threads", type=int, default=1, help="parallel sweep workers")
        return p

    with_common(sub.add_parser("gradcheck", help="finite-difference gradient check"))
    with_common(sub.add_parser("train", help="train one network, write trace/manifest/checkpoint"))
    with_common(sub.add_parser("sweep", help="fixed sizes vs learned size comparison"))
    ds = sub.add_parser("dataset", help="dataset utilities")
    ds_sub = ds.add_subparsers(dest="dataset_command", required=True)
    with_common(ds_sub.add_parser("generate", help="write planted train/test sets as OFST tensors"))
    insp = sub.add_parser("inspect", help="print learned sizes stored in a checkpoint")
    insp.add_argument("checkpoint")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "inspect":
        return cmd_inspect(args)
    try:
        cfg = _apply_seed(load_config(args.config), args.seed)
        handler = {"gradcheck": cmd_gradcheck, "train": cmd_train, "sweep": cmd_sweep,
                   "dataset": cmd_dataset}[args.command]
        return handler(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
