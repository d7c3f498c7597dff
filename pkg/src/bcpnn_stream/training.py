"""Semi-unsupervised protocol: unsupervised epochs, one supervised pass, evaluation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from bcpnn_stream.dataflow import build_pipeline, run_stream, sequential_oracle
from bcpnn_stream.errors import ConfigError

ENGINES = ("oracle", "pipeline")

log = logging.getLogger(__name__)


@dataclass
class TrainReport:
    timings: dict = field(default_factory=dict)  # phase -> seconds
    events: list = field(default_factory=list)
    steps_unsup: int = 0
    steps_sup: int = 0


def run_phase(model, dataset, mode: str, engine: str = "oracle", **kwargs):
    if engine == "oracle":
        return sequential_oracle(model, dataset, mode, keep_hidden=kwargs.get("keep_hidden", False))
    if engine == "pipeline":
        return run_stream(build_pipeline(model, mode), dataset, **kwargs)
    raise ConfigError(f"unknown engine {engine!r}; choose from {', '.join(ENGINES)}")


def _blocks(n, size):
    size = size or n
    return [(s, min(size, n - s)) for s in range(0, n, size)] if n else []


def train(model, dataset, *, engine="oracle", shuffle_seed=None, snapshot_every=0, on_snapshot=None,
          epochs=None) -> TrainReport:
    """Run the unsupervised epochs then one supervised pass over ``dataset``.

    With ``snapshot_every`` > 0, ``on_snapshot(model, step)`` is called before
    training and after every ``snapshot_every`` unsupervised images.
    """
    epochs = model.cfg.epochs_unsup if epochs is None else epochs
    report = TrainReport()
    chunk = snapshot_every if snapshot_every > 0 else max(len(dataset), 1)
    if on_snapshot is not None and snapshot_every > 0:
        on_snapshot(model, model.sched_unsup.t)
    t0 = time.perf_counter()
    for epoch in range(epochs):
        ds = dataset if shuffle_seed is None else dataset.shuffled(shuffle_seed + epoch)
        for start, n in _blocks(len(ds), chunk):
            res = run_phase(model, ds.subset(n, start), "unsupervised", engine)
            report.events.extend(res.events)
            if on_snapshot is not None and snapshot_every > 0:
                on_snapshot(model, model.sched_unsup.t)
        log.info("unsupervised epoch %d done, %.1f s", epoch + 1, time.perf_counter() - t0)
    report.timings["unsupervised_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    ds = dataset if shuffle_seed is None else dataset.shuffled(shuffle_seed + epochs)
    run_phase(model, ds, "supervised", engine)
    report.timings["supervised_s"] = time.perf_counter() - t0
    report.steps_unsup = model.sched_unsup.t
    report.steps_sup = model.sched_sup.t
    return report


def evaluate(model, dataset, engine="oracle"):
    """``(accuracy, StreamResult)`` of inference over ``dataset``."""
    res = run_phase(model, dataset, "inference", engine)
    acc = float(np.mean(res.predictions == dataset.labels)) if len(dataset) else float("nan")
    return acc, res
