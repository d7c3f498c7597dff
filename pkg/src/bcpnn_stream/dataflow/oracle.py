"""Sequential reference engine with the same outputs and accounting as the pipeline."""

from __future__ import annotations

import time

import numpy as np

from bcpnn_stream import counting
from bcpnn_stream.data import encode_complementary
from bcpnn_stream.dataflow.pipeline import (
    MODES,
    PipelineStats,
    StreamResult,
    activation_digest,
)
from bcpnn_stream.errors import ConfigError, StateError
from bcpnn_stream.learning import infer, supervised_step, unsupervised_step
from bcpnn_stream.structural import maybe_rewire


def sequential_oracle(model, dataset, mode: str, *, keep_hidden: bool = False) -> StreamResult:
    """Process ``dataset`` one image at a time with the step procedures."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    if mode == "inference" and not model.trained:
        raise StateError("model has no supervised training; hidden-output weights are undefined")
    cfg = model.cfg
    items = list(dataset)
    n = len(items)
    stats = PipelineStats(mode=mode, n_images=n)
    result = StreamResult(mode=mode, tags=np.arange(n), stats=stats)
    if mode == "inference":
        result.predictions = np.empty(n, dtype=np.int64)
        result.distributions = np.empty((n, cfg.n_classes))
    elif keep_hidden:
        result.hidden = np.empty((n, cfg.n_hidden))
    t_start = time.perf_counter()
    for tag, (image, label) in enumerate(items):
        t0 = time.perf_counter()
        c = counting.OpCounter()
        x = encode_complementary(image, cfg.input_mc)
        if mode == "inference":
            k, dist = infer(model, x, c)
            result.predictions[tag] = k
            result.distributions[tag] = dist
        else:
            if mode == "unsupervised":
                a = unsupervised_step(model, x, model.sched_unsup, c)
            else:
                a = supervised_step(model, x, label, model.sched_sup, c)
            result.hidden_digests.append(activation_digest(a))
            if result.hidden is not None:
                result.hidden[tag] = a
        stats.latency_us[tag] = (time.perf_counter() - t0) * 1e6
        stats.ops[tag] = c.snapshot()
        if mode == "unsupervised":
            maybe_rewire(model, result.events)
    stats.wall_time_s = time.perf_counter() - t_start
    return result
