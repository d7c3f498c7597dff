"""Command-line entry point: ``bcpnn {train,eval,roofline,export-rf,bench}``.

Every command writes its outputs into ``--out-dir`` under names derived from
a hash of the run's inputs. Exit codes: 0 ok, 2 configuration, 3 I/O or file
format, 4 numerical, 5 internal invariant.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from bcpnn_stream import __version__
from bcpnn_stream import perfmodel as pm
from bcpnn_stream.config import PRESET_NAMES, load_config, preset
from bcpnn_stream.data import Dataset, load_csv, load_idx
from bcpnn_stream.dataflow import DelaySpec, build_pipeline, run_stream
from bcpnn_stream.errors import BCPNNError, ConfigError, DataFormatError
from bcpnn_stream.model import build_model
from bcpnn_stream.serialize import atomic_write, load_model, save_model, state_digest
from bcpnn_stream.structural import export_receptive_field, mean_active_mi, write_pgm
from bcpnn_stream.training import ENGINES, evaluate, train

log = logging.getLogger("bcpnn")

# --- helpers ---------------------------------------------------------------------

def _config(args):
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = preset(args.preset)
    else:
        raise ConfigError("one of --config or --preset is required")
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["epochs_unsup"] = args.epochs
    return cfg.with_(**overrides) if overrides else cfg


def _dataset(args, prefix, cfg=None, required=True) -> Dataset | None:
    images = getattr(args, f"{prefix}_images")
    labels = getattr(args, f"{prefix}_labels")
    csv_path = getattr(args, f"{prefix}_csv")
    if csv_path:
        if cfg is None:
            raise ConfigError("CSV datasets need a config for their geometry")
        ds = load_csv(csv_path, cfg.input_width, cfg.input_height, cfg.n_classes)
    elif images or labels:
        if not (images and labels):
            raise ConfigError(f"--{prefix}-images and --{prefix}-labels go together")
        ds = load_idx(images, labels, n_classes=cfg.n_classes if cfg else None)
    elif required:
        raise ConfigError(f"no {prefix} data given (--{prefix}-images/--{prefix}-labels or --{prefix}-csv)")
    else:
        return None
    if cfg is not None and (ds.width, ds.height) != (cfg.input_width, cfg.input_height):
        raise ConfigError(
            f"dataset images are {ds.width}x{ds.height}, config expects {cfg.input_width}x{cfg.input_height}"
        )
    limit = getattr(args, "limit", None)
    return ds.subset(limit) if limit is not None else ds


def _run_id(inputs: dict) -> str:
    blob = json.dumps(inputs, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _write_json(path, obj):
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _version() -> str:
    return f"bcpnn_stream {__version__}, numpy {np.__version__}, python {platform.python_version()}"


def _latency_summary(stats):
    lat = np.array(list(stats.latency_us.values())) if stats.latency_us else np.zeros(0)
    return {
        "mean_latency_us": float(lat.mean()) if lat.size else None,
        "median_latency_us": float(np.median(lat)) if lat.size else None,
        "throughput_images_per_s": stats.throughput,
    }


# --- commands --------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config(args)
    structural = args.mode == "struct"
    if structural and cfg.rewire_interval == 0:
        raise ConfigError("--mode struct needs rewire_interval > 0 in the config")
    if not structural:
        cfg = cfg.with_(rewire_interval=0)
    train_ds = _dataset(args, "train", cfg)
    test_ds = _dataset(args, "test", cfg, required=False)
    inputs = {
        "command": "train",
        "config": cfg.to_dict(),
        "mode": args.mode,
        "engine": args.engine,
        "shuffle_seed": args.shuffle_seed,
        "train_fingerprint": train_ds.fingerprint(),
        "test_fingerprint": test_ds.fingerprint() if test_ds else None,
        "version": __version__,
    }
    run_id = _run_id(inputs)
    out = _out_dir(args)
    model = build_model(cfg, structural=structural)

    snap_hcs = args.snapshot_hc or [0]
    snapshots = []

    def on_snapshot(m, step):
        for hc in snap_hcs:
            path = out / f"{run_id}.rf_hc{hc}_step{step:08d}.pgm"
            write_pgm(path, export_receptive_field(m, hc))
            snapshots.append(str(path.name))
        log.info("snapshot at step %d, mean active MI %.4g", step, mean_active_mi(m))

    report = train(
        model,
        train_ds,
        engine=args.engine,
        shuffle_seed=args.shuffle_seed,
        snapshot_every=args.snapshot_every,
        on_snapshot=on_snapshot if args.snapshot_every > 0 else None,
    )
    metrics = {}
    timings = dict(report.timings)
    if not args.skip_train_eval:
        t0 = time.perf_counter()
        metrics["train_accuracy"], _ = evaluate(model, train_ds, args.engine)
        timings["train_eval_s"] = time.perf_counter() - t0
    if test_ds is not None:
        t0 = time.perf_counter()
        metrics["test_accuracy"], _ = evaluate(model, test_ds, args.engine)
        timings["test_eval_s"] = time.perf_counter() - t0
    if structural:
        metrics["rewire_events"] = len(report.events)
        metrics["mean_active_mi"] = mean_active_mi(model)
    model_path = save_model(model, out / f"{run_id}.model")
    manifest = {
        "run_id": run_id,
        "inputs": inputs,
        "seed": cfg.seed,
        "version": _version(),
        "steps": {"unsupervised": report.steps_unsup, "supervised": report.steps_sup},
        "metrics": metrics,
        "timings_s": timings,
        "model_file": model_path.name,
        "model_state_sha256": state_digest(model),
        "rf_snapshots": snapshots,
    }
    _write_json(out / f"{run_id}.manifest.json", manifest)
    print(json.dumps({"run_id": run_id, **metrics}))
    return 0


def cmd_eval(args) -> int:
    before = _file_sha256(args.model)
    model = load_model(args.model)
    ds = _dataset(args, "test", model.cfg)
    run_id = _run_id({"command": "eval", "model": before, "data": ds.fingerprint(), "engine": args.engine})
    out = _out_dir(args)
    acc, res = evaluate(model, ds, args.engine)
    if _file_sha256(args.model) != before:
        raise BCPNNError(f"{args.model} changed during evaluation")
    stats_path = out / f"{run_id}.stats.csv"
    res.stats.to_csv(stats_path)
    result = {
        "run_id": run_id,
        "model_sha256": before,
        "data_fingerprint": ds.fingerprint(),
        "n_images": len(ds),
        "accuracy": acc,
        **_latency_summary(res.stats),
        "stats_csv": stats_path.name,
        "version": _version(),
    }
    _write_json(out / f"{run_id}.eval.json", result)
    print(json.dumps({"run_id": run_id, "accuracy": acc}))
    return 0


def cmd_roofline(args) -> int:
    if args.resources:
        rb, ms = pm.load_resources(args.resources)
    else:
        rb, ms = pm.U55C_BUDGET, pm.U55C_MEMORY
    configs = [load_config(p) for p in args.config or []]
    configs += [preset(n) for n in args.preset or []]
    labels = [Path(p).stem for p in args.config or []] + list(args.preset or [])
    stats = args.stats or []
    if stats and len(stats) != len(configs):
        raise ConfigError(f"{len(stats)} stats files for {len(configs)} configs; pair them one to one")
    points = []
    for i, (label, cfg) in enumerate(zip(labels, configs)):
        if stats:
            intensity, achieved = pm.achieved_from_stats_csv(stats[i])
        else:
            intensity, achieved = pm.arithmetic_intensity(cfg, args.mode), float("nan")
        points.append(pm.make_point(f"{label}:{args.mode}", intensity, achieved, rb, ms))
    rows, poly = pm.roofline_report(points, rb, ms)
    text = pm.report_csv(rows, poly, rb, ms)
    run_id = _run_id({"command": "roofline", "csv": text})
    out = _out_dir(args)
    path = out / f"{run_id}.roofline.csv"
    atomic_write(path, text.encode())
    print(
        f"peak_compute={pm.peak_compute(rb) / 1e9:.2f} GFLOP/s "
        f"hbm_bandwidth={pm.hbm_bandwidth(ms) / 1e9:.1f} GB/s "
        f"machine_balance={pm.machine_balance(rb, ms):.4f} FLOP/B -> {path}"
    )
    return 0


def cmd_export_rf(args) -> int:
    if args.model:
        model = load_model(args.model)
        source = _file_sha256(args.model)
    else:
        cfg = _config(args)
        model = build_model(cfg)
        source = cfg.to_dict()
    hcs = args.hc if args.hc else list(range(model.ih.post_hc))
    run_id = _run_id({"command": "export-rf", "source": source, "hc": hcs, "weighted": args.weighted})
    out = _out_dir(args)
    grids = [(hc, export_receptive_field(model, hc, weighted=args.weighted)) for hc in hcs]
    for hc, grid in grids:
        path = write_pgm(out / f"{run_id}.rf_hc{hc}.pgm", grid)
        print(path)
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    depths = [int(d) for d in args.fifo_depths.split(",")] if args.fifo_depths else [cfg.fifo_depth]
    ds = _dataset(args, "test", cfg, required=False)
    if ds is None:
        rng = np.random.default_rng(cfg.seed)
        imgs = rng.random((args.images, cfg.input_height, cfg.input_width))
        ds = Dataset(imgs, rng.integers(0, cfg.n_classes, args.images), cfg.input_width,
                     cfg.input_height, cfg.n_classes)
    ds = ds.subset(args.images)
    header = "mode,fifo_depth,repeat,n_images,mean_latency_us,median_latency_us,throughput_images_per_s,total_stalls"
    lines = [header]
    if len(ds):
        base = build_model(cfg.with_(rewire_interval=0))
        if args.mode == "inference":
            # Give the output layer one supervised pass so inference is defined.
            run_stream(build_pipeline(base, "supervised"), ds)
        for depth in depths:
            for rep in range(args.repeats):
                model = base.copy()
                model.cfg = cfg.with_(fifo_depth=depth, rewire_interval=0)
                delay = DelaySpec(seed=rep, max_us=args.delay_us) if args.delay_us > 0 else None
                res = run_stream(build_pipeline(model, args.mode), ds, delay=delay)
                s = _latency_summary(res.stats)
                stalls = sum(c["write_stalls"] + c["read_stalls"] for c in res.stats.channels.values())
                lines.append(
                    f"{args.mode},{depth},{rep},{len(ds)},{s['mean_latency_us']:.1f},"
                    f"{s['median_latency_us']:.1f},{s['throughput_images_per_s']:.3f},{stalls}"
                )
    text = "\n".join(lines) + "\n"
    run_id = _run_id({"command": "bench", "config": cfg.to_dict(), "mode": args.mode, "depths": depths,
                      "images": args.images, "repeats": args.repeats})
    path = _out_dir(args) / f"{run_id}.bench.csv"
    atomic_write(path, text.encode())
    sys.stdout.write(text)
    return 0


# --- argument parsing ------------------------------------------------------------

def _add_config(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", choices=PRESET_NAMES)


def _add_data(p, prefix, help_text):
    p.add_argument(f"--{prefix}-images", help=f"{help_text} images (IDX)")
    p.add_argument(f"--{prefix}-labels", help=f"{help_text} labels (IDX)")
    p.add_argument(f"--{prefix}-csv", help=f"{help_text} set as CSV (label, pixels...)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bcpnn", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=_version())
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="unsupervised epochs + one supervised pass")
    _add_config(p)
    _add_data(p, "train", "training")
    _add_data(p, "test", "test")
    p.add_argument("--mode", choices=("train", "struct"), default="train")
    p.add_argument("--engine", choices=ENGINES, default="oracle")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="override epochs_unsup")
    p.add_argument("--limit", type=int, help="use only the first N images of each set")
    p.add_argument("--shuffle-seed", type=int, help="reshuffle every epoch with this seed")
    p.add_argument("--snapshot-every", type=int, default=0, help="export receptive fields every N steps")
    p.add_argument("--snapshot-hc", type=int, action="append", help="hidden hypercolumn to snapshot")
    p.add_argument("--skip-train-eval", action="store_true")
    p.add_argument("--out-dir", default="runs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="inference-only accuracy and latency")
    p.add_argument("--model", required=True)
    _add_data(p, "test", "evaluation")
    p.add_argument("--engine", choices=ENGINES, default="pipeline")
    p.add_argument("--limit", type=int)
    p.add_argument("--out-dir", default="runs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("roofline", help="roofline CSV for configs or measured stats")
    p.add_argument("--resources", help="key = value resource file (default: Alveo U55C)")
    p.add_argument("--config", action="append")
    p.add_argument("--preset", action="append", choices=PRESET_NAMES)
    p.add_argument("--stats", action="append", help="stats CSV from eval, paired with configs in order")
    p.add_argument("--mode", choices=pm.INTENSITY_MODES, default="unsupervised")
    p.add_argument("--out-dir", default="runs")
    p.set_defaults(func=cmd_roofline)

    p = sub.add_parser("export-rf", help="receptive fields as PGM images")
    p.add_argument("--model")
    _add_config(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--hc", type=int, action="append", help="hidden hypercolumn (default: all)")
    p.add_argument("--weighted", action="store_true", help="shade pixels by their MI score")
    p.add_argument("--out-dir", default="runs")
    p.set_defaults(func=cmd_export_rf)

    p = sub.add_parser("bench", help="latency/throughput over a FIFO-depth sweep")
    _add_config(p)
    _add_data(p, "test", "benchmark")
    p.add_argument("--seed", type=int)
    p.add_argument("--images", type=int, default=100)
    p.add_argument("--fifo-depths", help="comma-separated, e.g. 1,2,4,8")
    p.add_argument("--mode", choices=("inference", "unsupervised", "supervised"), default="inference")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--delay-us", type=float, default=0.0, help="max injected per-packet stage delay")
    p.add_argument("--out-dir", default="runs")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("BCPNN_LOG_LEVEL", "WARNING").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BCPNNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataFormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
