"""Emulated streaming accelerator: one thread per stage, bounded FIFOs between them.

The graph mirrors the hardware kernels. Input-hidden traffic leaves the fetch
stage as four interleaved sub-streams (one per memory channel) that a merge
stage joins into wide, index-ordered packets for the support stage. The
trace-update stage is the only writer of model state.

Training images are serialized by the host: image ``n + 1`` is fed only after
image ``n`` has left the pipeline, so every image reads the state the previous
one wrote. Inference has no writer and streams images back to back.
"""

from __future__ import annotations

import hashlib
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from bcpnn_stream import counting, kernels
from bcpnn_stream.config import N_PARTITIONS
from bcpnn_stream.data import encode_complementary, encode_onehot
from bcpnn_stream.dataflow.channel import Aborted, Channel
from bcpnn_stream.dataflow.packets import Packet, merge_packets, packetize, partition
from bcpnn_stream.errors import (
    ConfigError,
    DeadlockError,
    PipelineError,
    StateError,
    SynchronizationError,
)
from bcpnn_stream.learning import (
    begin_unsup_traces,
    softmax_block,
    sup_traces,
    unsup_trace_block,
)
from bcpnn_stream.structural import maybe_rewire

MODES = ("inference", "unsupervised", "supervised")

EOS = object()  # end-of-stream marker; travels through channels uncounted


@dataclass(frozen=True)
class ChannelSpec:
    name: str
    producer: str
    consumer: str
    vector_len: int  # values per image
    packet_len: int

    @property
    def packets_per_image(self) -> int:
        return self.vector_len // self.packet_len


@dataclass(frozen=True)
class StageSpec:
    name: str
    inputs: tuple
    outputs: tuple


@dataclass
class Pipeline:
    model: object
    mode: str
    stages: dict
    channels: dict

    def topological_order(self) -> list[str]:
        indeg = {s: 0 for s in self.stages}
        for ch in self.channels.values():
            indeg[ch.consumer] += 1
        ready = [s for s, d in indeg.items() if d == 0]
        order = []
        while ready:
            s = ready.pop(0)
            order.append(s)
            for out in self.stages[s].outputs:
                c = self.channels[out].consumer
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
        if len(order) != len(self.stages):
            raise ConfigError("pipeline graph has a cycle")
        return order


def build_pipeline(model, mode: str) -> Pipeline:
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    cfg = model.cfg
    n_ih = cfg.hidden_hc * cfg.rf_len
    chans = []

    def ch(name, src, dst, n, p):
        chans.append(ChannelSpec(name, src, dst, n, p))

    if mode == "unsupervised":
        ch("x_trace", "fetch", "trace_update", cfg.n_input, cfg.sub_packet)
    elif mode == "supervised":
        ch("label_trace", "fetch", "trace_update", cfg.n_classes, cfg.n_classes)
    for k in range(N_PARTITIONS):
        ch(f"ih_sub{k}", "fetch", f"ih_partition{k}", n_ih // N_PARTITIONS, cfg.sub_packet)
        ch(f"ih_part{k}", f"ih_partition{k}", "merge", n_ih // N_PARTITIONS, cfg.sub_packet)
    ch("ih_stream", "merge", "support_ih", n_ih, cfg.packet_ih)
    ch("hidden_support", "support_ih", "hidden_softmax", cfg.n_hidden, cfg.packet_ho)
    if mode == "inference":
        ch("hidden_act", "hidden_softmax", "support_ho", cfg.n_hidden, cfg.packet_ho)
        ch("output_support", "support_ho", "output_softmax", cfg.n_classes, cfg.n_classes)
        ch("result", "output_softmax", "sink", cfg.n_classes, cfg.n_classes)
    else:
        ch("hidden_act", "hidden_softmax", "trace_update", cfg.n_hidden, cfg.packet_ho)
        ch("result", "trace_update", "sink", cfg.n_hidden, cfg.n_hidden)

    names = []
    for c in chans:
        for s in (c.producer, c.consumer):
            if s not in names:
                names.append(s)
    stages = {
        s: StageSpec(
            s,
            tuple(c.name for c in chans if c.consumer == s),
            tuple(c.name for c in chans if c.producer == s),
        )
        for s in names
    }
    return Pipeline(model, mode, stages, {c.name: c for c in chans})


def check_pipeline(pipeline: Pipeline) -> list[str]:
    """Structural problems with a pipeline description; empty means runnable."""
    problems = []
    for c in pipeline.channels.values():
        for s in (c.producer, c.consumer):
            if s not in pipeline.stages:
                problems.append(f"channel {c.name} references missing stage {s}")
        if c.packet_len < 1 or c.vector_len % c.packet_len:
            problems.append(f"channel {c.name}: packet length {c.packet_len} does not divide {c.vector_len}")
    for s in pipeline.stages.values():
        for name in s.inputs + s.outputs:
            if name not in pipeline.channels:
                problems.append(f"stage {s.name} references missing channel {name}")
    sources = [s for s in pipeline.stages.values() if not s.inputs]
    sinks = [s for s in pipeline.stages.values() if not s.outputs]
    if [s.name for s in sources] != ["fetch"]:
        problems.append(f"expected the fetch stage as the only source, found {[s.name for s in sources]}")
    if [s.name for s in sinks] != ["sink"]:
        problems.append(f"expected the sink as the only sink, found {[s.name for s in sinks]}")
    if not problems:
        try:
            pipeline.topological_order()
        except ConfigError as exc:
            problems.append(str(exc))
    return problems


@dataclass(frozen=True)
class DelaySpec:
    """Random per-packet stalls injected into every stage, for stress tests."""

    seed: int = 0
    max_us: float = 200.0
    probability: float = 0.2


@dataclass
class PipelineStats:
    mode: str
    n_images: int = 0
    wall_time_s: float = 0.0
    latency_us: dict = field(default_factory=dict)
    ops: dict = field(default_factory=dict)  # tag -> (flops, bytes)
    channels: dict = field(default_factory=dict)  # name -> counters
    stall_trace: dict = field(default_factory=dict)  # tag -> {channel: stalls so far}

    @property
    def throughput(self) -> float:
        return self.n_images / self.wall_time_s if self.wall_time_s > 0 else 0.0

    @property
    def total_flops(self) -> int:
        return sum(f for f, _ in self.ops.values())

    @property
    def total_bytes(self) -> int:
        return sum(b for _, b in self.ops.values())

    def per_image_ops(self) -> set:
        return set(self.ops.values())

    def to_csv(self, path):
        names = sorted(self.channels)
        prev = {n: 0 for n in names}
        lines = [",".join(["image_tag", "latency_us", "flops", "bytes"] + [f"stalls_{n}" for n in names])]
        for tag in sorted(self.latency_us):
            snap = self.stall_trace.get(tag, prev)
            delta = [snap.get(n, 0) - prev[n] for n in names]
            prev = {n: snap.get(n, 0) for n in names}
            f, b = self.ops.get(tag, (0, 0))
            lines.append(",".join([str(tag), f"{self.latency_us[tag]:.1f}", str(f), str(b)] + [str(d) for d in delta]))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


@dataclass
class StreamResult:
    """Per-image outputs of a run, in tag order."""

    mode: str
    tags: np.ndarray
    predictions: np.ndarray | None = None
    distributions: np.ndarray | None = None
    hidden: np.ndarray | None = None
    hidden_digests: list = field(default_factory=list)
    events: list = field(default_factory=list)
    stats: PipelineStats | None = None

    @property
    def n_images(self) -> int:
        return len(self.tags)


def activation_digest(a) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype="<f8").tobytes()).hexdigest()


class _Runtime:
    """Threads, channels and bookkeeping for one run of a pipeline."""

    def __init__(self, pipeline, delay, keep_hidden, n_images):
        self.p = pipeline
        self.model = pipeline.model
        self.cfg = pipeline.model.cfg
        self.mode = pipeline.mode
        depth = self.cfg.fifo_depth
        self.chan = {name: Channel(name, depth, marker=EOS) for name in pipeline.channels}
        self.feed = queue.Queue()
        self.done = queue.Queue()
        self.error = None
        self.error_lock = threading.Lock()
        self.stopped = threading.Event()
        self.delay = delay
        self.start_time = {}
        self.end_time = {}
        self.ops = {}  # (stage, tag) -> OpCounter
        self.stall_trace = {}
        self.keep_hidden = keep_hidden
        n_h, n_c = self.cfg.n_hidden, self.cfg.n_classes
        self.hidden = np.empty((n_images, n_h)) if keep_hidden and self.mode != "inference" else None
        self.digests = {}
        self.dists = np.empty((n_images, n_c)) if self.mode == "inference" else None
        self.preds = np.empty(n_images, dtype=np.int64) if self.mode == "inference" else None
        self._rngs = {}
        self.current = {}  # stage -> tag in flight, for error reports

    # --- helpers used inside stage threads ---

    def counter(self, stage, tag):
        key = (stage, tag)
        c = self.ops.get(key)
        if c is None:
            c = self.ops[key] = counting.OpCounter()
        return c

    def pause(self, stage):
        if self.delay is None:
            return
        rng = self._rngs.get(stage)
        if rng is None:
            seed = [self.delay.seed, sum(map(ord, stage))]
            rng = self._rngs[stage] = np.random.default_rng(seed)
        if rng.random() < self.delay.probability:
            time.sleep(rng.uniform(0.0, self.delay.max_us) * 1e-6)

    def put(self, stage, name, pkt):
        self.chan[name].put(pkt)
        self.pause(stage)

    def get(self, name):
        return self.chan[name].get()

    def read_vector(self, name, tag, length=None):
        """Read one image's worth of packets from ``name`` into a vector."""
        spec = self.p.channels[name]
        out = np.empty(spec.vector_len)
        for i in range(spec.packets_per_image):
            pkt = self.get(name)
            self.expect(pkt, tag, i * spec.packet_len, name)
            out[pkt.base_index:pkt.base_index + len(pkt)] = pkt.values
        return out

    @staticmethod
    def expect(pkt, tag, base, name):
        if pkt is EOS:
            raise SynchronizationError(f"{name}: stream ended inside image {tag}")
        if pkt.tag != tag or pkt.base_index != base:
            raise SynchronizationError(
                f"{name}: expected image {tag} index {base}, got image {pkt.tag} index {pkt.base_index}"
            )

    def finish(self, stage):
        for name in self.p.stages[stage].outputs:
            self.chan[name].put(EOS)

    def drain_eos(self, stage, skip):
        for name in self.p.stages[stage].inputs:
            if name != skip:
                item = self.chan[name].get()
                if item is not EOS:
                    raise SynchronizationError(f"{name}: data after end of stream")

    # --- stages ---

    def st_fetch(self):
        model, cfg = self.model, self.cfg
        while True:
            item = self._next_feed()
            if item is EOS:
                self.finish("fetch")
                return
            tag, image, label = item
            self.current["fetch"] = tag
            self.start_time[tag] = time.perf_counter()
            c = self.counter("fetch", tag)
            x = encode_complementary(image, cfg.input_mc)
            c.add(counting.fetch_input(x.shape[0]))
            if model.structural:
                c.add(counting.fetch_receptive_field(model.ih.post_hc, model.ih.nact))
            if self.mode == "unsupervised":
                for pkt in packetize(x, cfg.sub_packet, tag):
                    self.put("fetch", "x_trace", pkt)
            elif self.mode == "supervised":
                self.put("fetch", "label_trace", Packet(np.array([float(label)]), 0, tag))
            stream = model.ih.gather(x).ravel()
            subs = partition(packetize(stream, cfg.sub_packet, tag), N_PARTITIONS)
            for group in zip(*subs):
                for k, pkt in enumerate(group):
                    self.put("fetch", f"ih_sub{k}", pkt)

    def _next_feed(self):
        while True:
            if self.stopped.is_set():
                raise Aborted("feed")
            try:
                return self.feed.get(timeout=0.05)
            except queue.Empty:
                continue

    def st_partition(self, k):
        name = f"ih_partition{k}"
        src, dst = f"ih_sub{k}", f"ih_part{k}"
        while True:
            pkt = self.get(src)
            if pkt is EOS:
                self.finish(name)
                return
            self.current[name] = pkt.tag
            self.put(name, dst, pkt)

    def st_merge(self):
        while True:
            parts = [self.get(f"ih_part{k}") for k in range(N_PARTITIONS)]
            if any(p is EOS for p in parts):
                if not all(p is EOS for p in parts):
                    raise SynchronizationError("merge: sub-streams ended at different points")
                self.finish("merge")
                return
            self.current["merge"] = parts[0].tag
            self.put("merge", "ih_stream", merge_packets(parts))

    def st_support_ih(self):
        cfg, ih = self.cfg, self.model.ih
        P, M, K = cfg.packet_ih, cfg.hidden_mc, cfg.rf_len
        n_chunks = K // P
        while True:
            first = self.get("ih_stream")
            if first is EOS:
                self.finish("support_ih")
                return
            tag = first.tag
            self.current["support_ih"] = tag
            c = self.counter("support_ih", tag)
            bias = self.model.hid.bias
            for h in range(cfg.hidden_hc):
                partials = np.empty((n_chunks, M))
                for i in range(n_chunks):
                    pkt = first if (h == 0 and i == 0) else self.get("ih_stream")
                    self.expect(pkt, tag, h * K + i * P, "ih_stream")
                    partials[i] = kernels.packet_partial(pkt.values, ih.w[h, i * P:(i + 1) * P])
                c.add(counting.support_packet(P, M), n_chunks)
                c.add(counting.support_finalize(n_chunks, M))
                s = kernels.reduce_partials(bias[h * M:(h + 1) * M], partials)
                for pkt in packetize(s, cfg.packet_ho, tag):
                    self.put("support_ih", "hidden_support", Packet(pkt.values, h * M + pkt.base_index, tag))

    def st_hidden_softmax(self):
        cfg, model = self.cfg, self.model
        M = cfg.hidden_mc
        noisy = self.mode == "unsupervised"
        while True:
            first = self.get("hidden_support")
            if first is EOS:
                self.finish("hidden_softmax")
                return
            tag = first.tag
            self.current["hidden_softmax"] = tag
            c = self.counter("hidden_softmax", tag)
            s_all = np.empty(cfg.n_hidden)
            done = 0
            pkt = first
            out_base = 0
            for i in range(cfg.n_hidden // cfg.packet_ho):
                if i:
                    pkt = self.get("hidden_support")
                self.expect(pkt, tag, i * cfg.packet_ho, "hidden_support")
                s_all[pkt.base_index:pkt.base_index + len(pkt)] = pkt.values
                filled = pkt.base_index + len(pkt)
                # Normalize every hypercolumn as soon as its support is complete.
                while (done + 1) * M <= filled:
                    h = done
                    s = s_all[h * M:(h + 1) * M]
                    if noisy:
                        s = s + model.rng.uniform(0.0, cfg.noise_amp, M)
                        c.add(counting.noise(M))
                    c.add(counting.softmax(M, c.costs))
                    a = softmax_block(s, cfg.temperature, where=f"hidden softmax hypercolumn {h}")
                    s_all[h * M:(h + 1) * M] = a
                    done += 1
                    while out_base + cfg.packet_ho <= (h + 1) * M:
                        vals = s_all[out_base:out_base + cfg.packet_ho].copy()
                        self.put("hidden_softmax", "hidden_act", Packet(vals, out_base, tag))
                        out_base += cfg.packet_ho

    def st_support_ho(self):
        cfg, ho = self.cfg, self.model.ho
        P, C = cfg.packet_ho, cfg.n_classes
        n_chunks = cfg.n_hidden // P
        while True:
            first = self.get("hidden_act")
            if first is EOS:
                self.finish("support_ho")
                return
            tag = first.tag
            self.current["support_ho"] = tag
            partials = np.empty((n_chunks, C))
            for i in range(n_chunks):
                pkt = first if i == 0 else self.get("hidden_act")
                self.expect(pkt, tag, i * P, "hidden_act")
                partials[i] = kernels.packet_partial(pkt.values, ho.w[0, i * P:(i + 1) * P])
            c = self.counter("support_ho", tag)
            c.add(counting.support_packet(P, C), n_chunks)
            c.add(counting.support_finalize(n_chunks, C))
            s = kernels.reduce_partials(self.model.out.bias, partials)
            self.put("support_ho", "output_support", Packet(s, 0, tag))

    def st_output_softmax(self):
        cfg = self.cfg
        while True:
            pkt = self.get("output_support")
            if pkt is EOS:
                self.finish("output_softmax")
                return
            self.current["output_softmax"] = pkt.tag
            c = self.counter("output_softmax", pkt.tag)
            c.add(counting.softmax(cfg.n_classes, c.costs))
            dist = softmax_block(pkt.values, cfg.temperature, where="output softmax")
            self.put("output_softmax", "result", Packet(dist, 0, pkt.tag))

    def st_trace_update(self):
        model, cfg = self.model, self.cfg
        M = cfg.hidden_mc
        first_input = "x_trace" if self.mode == "unsupervised" else "label_trace"
        while True:
            first = self.get(first_input)
            if first is EOS:
                self.drain_eos("trace_update", first_input)
                self.finish("trace_update")
                return
            tag = first.tag
            self.current["trace_update"] = tag
            c = self.counter("trace_update", tag)
            if self.mode == "unsupervised":
                sched = model.sched_unsup
                alpha = sched.alpha
                x = np.empty(cfg.n_input)
                spec = self.p.channels["x_trace"]
                for i in range(spec.packets_per_image):
                    pkt = first if i == 0 else self.get("x_trace")
                    self.expect(pkt, tag, i * spec.packet_len, "x_trace")
                    x[pkt.base_index:pkt.base_index + len(pkt)] = pkt.values
                log_pi = begin_unsup_traces(model, x, alpha, c)
                gi = model.ih.gather_index
                a = np.empty(cfg.n_hidden)
                per_hc = M // cfg.packet_ho
                for h in range(cfg.hidden_hc):
                    for i in range(per_hc):
                        pkt = self.get("hidden_act")
                        self.expect(pkt, tag, h * M + i * cfg.packet_ho, "hidden_act")
                        a[pkt.base_index:pkt.base_index + len(pkt)] = pkt.values
                    unsup_trace_block(model, h, x, x[gi[h]], a[h * M:(h + 1) * M], alpha, log_pi, c)
            else:
                sched = model.sched_sup
                self.expect(first, tag, 0, "label_trace")
                onehot = encode_onehot(int(first.values[0]), cfg.n_classes)
                a = self.read_vector("hidden_act", tag)
                model.hid.act[...] = a
                sup_traces(model, a, onehot, sched.alpha, c)
            sched.advance()
            self.put("trace_update", "result", Packet(a, 0, tag))

    def st_sink(self):
        while True:
            pkt = self.get("result")
            if pkt is EOS:
                return
            tag = pkt.tag
            self.end_time[tag] = time.perf_counter()
            if self.mode == "inference":
                self.dists[tag] = pkt.values
                self.preds[tag] = int(np.argmax(pkt.values))
            else:
                self.digests[tag] = activation_digest(pkt.values)
                if self.hidden is not None:
                    self.hidden[tag] = pkt.values
            self.stall_trace[tag] = {
                n: c.write_stalls + c.read_stalls for n, c in self.chan.items()
            }
            self.done.put(tag)

    # --- thread management ---

    def targets(self):
        t = {
            "fetch": self.st_fetch,
            "merge": self.st_merge,
            "support_ih": self.st_support_ih,
            "hidden_softmax": self.st_hidden_softmax,
            "support_ho": self.st_support_ho,
            "output_softmax": self.st_output_softmax,
            "trace_update": self.st_trace_update,
            "sink": self.st_sink,
        }
        for k in range(N_PARTITIONS):
            t[f"ih_partition{k}"] = lambda k=k: self.st_partition(k)
        return {name: t[name] for name in self.p.stages}

    def wrap(self, name, fn):
        def run():
            try:
                fn()
            except Aborted:
                pass
            except BaseException as exc:  # noqa: BLE001 - reported to the host
                with self.error_lock:
                    if self.error is None:
                        self.error = PipelineError(name, self.current.get(name), exc)
                self.abort()

        return run

    def abort(self):
        self.stopped.set()
        for c in self.chan.values():
            c.abort()

    def progress_signature(self):
        return sum(c.produced + c.consumed for c in self.chan.values())

    def snapshot(self):
        return ", ".join(
            f"{n}={c.occupancy}/{c.capacity}" for n, c in self.chan.items() if c.occupancy
        ) or "all channels empty"


def run_stream(
    pipeline: Pipeline,
    dataset,
    *,
    delay: DelaySpec | None = None,
    keep_hidden: bool = False,
    watchdog_s: float = 60.0,
) -> StreamResult:
    """Push every image of ``dataset`` through ``pipeline``.

    ``dataset`` yields ``(image, label)`` pairs. Rewiring, when the model is
    structural, happens between images while the pipeline is drained. Raises
    ``PipelineError`` when a stage fails and ``DeadlockError`` when no channel
    moves for ``watchdog_s`` seconds.
    """
    problems = check_pipeline(pipeline)
    if problems:
        raise ConfigError("; ".join(problems))
    model, mode = pipeline.model, pipeline.mode
    if mode == "inference" and not model.trained:
        raise StateError("model has no supervised training; hidden-output weights are undefined")
    items = list(dataset)
    n = len(items)
    rt = _Runtime(pipeline, delay, keep_hidden, n)
    threads = [
        threading.Thread(target=rt.wrap(name, fn), name=f"stage-{name}", daemon=True)
        for name, fn in rt.targets().items()
    ]
    events = []
    t0 = time.perf_counter()
    for th in threads:
        th.start()
    try:
        if mode == "inference":
            for tag, (image, label) in enumerate(items):
                rt.feed.put((tag, image, label))
            for _ in range(n):
                _wait_done(rt, watchdog_s)
        else:
            for tag, (image, label) in enumerate(items):
                rt.feed.put((tag, image, label))
                _wait_done(rt, watchdog_s)
                if mode == "unsupervised":
                    maybe_rewire(model, events)
        rt.feed.put(EOS)
        for th in threads:
            th.join(timeout=watchdog_s)
            if th.is_alive():
                rt.abort()
                raise DeadlockError(f"{th.name} did not drain: {rt.snapshot()}")
        if rt.error is not None:
            raise rt.error
    except BaseException:
        rt.abort()
        raise
    wall = time.perf_counter() - t0

    stats = PipelineStats(mode=mode, n_images=n, wall_time_s=wall)
    for tag in range(n):
        stats.latency_us[tag] = (rt.end_time[tag] - rt.start_time[tag]) * 1e6
    per_tag = {}
    for (_, tag), c in rt.ops.items():
        f, b = per_tag.get(tag, (0, 0))
        per_tag[tag] = (f + c.flops, b + c.bytes)
    stats.ops = {tag: per_tag.get(tag, (0, 0)) for tag in range(n)}
    stats.channels = {
        name: dict(
            capacity=c.capacity,
            produced=c.produced,
            consumed=c.consumed,
            write_stalls=c.write_stalls,
            read_stalls=c.read_stalls,
            high_water=c.high_water,
            occupancy=c.occupancy,
        )
        for name, c in rt.chan.items()
    }
    stats.stall_trace = rt.stall_trace
    return StreamResult(
        mode=mode,
        tags=np.arange(n),
        predictions=rt.preds,
        distributions=rt.dists,
        hidden=rt.hidden,
        hidden_digests=[rt.digests[t] for t in range(n)] if mode != "inference" else [],
        events=events,
        stats=stats,
    )


def _wait_done(rt, watchdog_s):
    last = rt.progress_signature()
    idle_since = time.perf_counter()
    while True:
        if rt.error is not None:
            raise rt.error
        try:
            return rt.done.get(timeout=0.05)
        except queue.Empty:
            pass
        sig = rt.progress_signature()
        now = time.perf_counter()
        if sig != last:
            last, idle_since = sig, now
        elif now - idle_since > watchdog_s:
            rt.abort()
            raise DeadlockError(f"no channel moved for {watchdog_s:.0f} s: {rt.snapshot()}")
