"""Populations, projections and the three-layer model that owns them."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from bcpnn_stream.config import ModelConfig, check_config
from bcpnn_stream.errors import ConfigError
from bcpnn_stream.learning import TraceSchedule


@dataclass
class Population:
    """A layer of ``n_hc`` hypercolumns with ``n_mc`` minicolumns each.

    ``act`` and ``p`` are flat vectors; every hypercolumn slice of them is a
    probability distribution. ``bias`` caches ``log p`` for the layer.
    """

    n_hc: int
    n_mc: int
    act: np.ndarray
    p: np.ndarray
    bias: np.ndarray

    @property
    def n_units(self) -> int:
        return self.n_hc * self.n_mc

    def blocks(self, vec: np.ndarray) -> np.ndarray:
        return vec.reshape(self.n_hc, self.n_mc)


def new_population(n_hc: int, n_mc: int) -> Population:
    if n_hc < 1 or n_mc < 1:
        raise ConfigError(f"population needs n_hc >= 1 and n_mc >= 1 (got {n_hc}, {n_mc})")
    n = n_hc * n_mc
    uniform = np.full(n, 1.0 / n_mc)
    return Population(
        n_hc=n_hc,
        n_mc=n_mc,
        act=uniform.copy(),
        p=uniform.copy(),
        bias=np.full(n, math.log(1.0 / n_mc)),
    )


@dataclass
class Projection:
    """Connectivity from a pre to a post population.

    Only connections inside each post hypercolumn's receptive field carry
    state. ``rf[h]`` lists the ``nact`` active pre hypercolumns of post
    hypercolumn ``h`` in ascending order, and the joint traces and weights are
    stored gathered along it: ``p_joint[h, k, j]`` pairs pre unit
    ``gather_index[h, k]`` with post unit ``h * post_mc + j``. This is the
    order in which the accelerator streams them.

    ``pre_trace`` is an optional private copy of the pre marginal, used when
    the projection learns on a schedule of its own (hidden-output). ``silent``
    optionally tracks joint traces for every pre unit, active or not, as
    ``(post_hc, n_pre, post_mc)`` float32; structural plasticity scores from it.
    """

    pre_hc: int
    pre_mc: int
    post_hc: int
    post_mc: int
    nact: int
    chunk: int
    rf: np.ndarray
    p_joint: np.ndarray
    w: np.ndarray
    pre_trace: np.ndarray | None = None
    silent: np.ndarray | None = None
    _gather: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_pre(self) -> int:
        return self.pre_hc * self.pre_mc

    @property
    def n_post(self) -> int:
        return self.post_hc * self.post_mc

    @property
    def rf_len(self) -> int:
        return self.nact * self.pre_mc

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros((self.pre_hc, self.post_hc), dtype=bool)
        m[self.rf, np.arange(self.post_hc)[:, None]] = True
        return m

    @property
    def gather_index(self) -> np.ndarray:
        if self._gather is None:
            units = self.rf[:, :, None] * self.pre_mc + np.arange(self.pre_mc)
            self._gather = units.reshape(self.post_hc, self.rf_len)
        return self._gather

    def invalidate(self):
        self._gather = None

    def gather(self, pre_vec: np.ndarray) -> np.ndarray:
        return pre_vec[self.gather_index]

    def dense_joint(self, pre_p: np.ndarray, post_p: np.ndarray) -> np.ndarray:
        """``n_pre x n_post`` joint traces; inactive pairs read as independent."""
        dense = np.outer(pre_p, post_p)
        self._scatter(dense, self.p_joint)
        return dense

    def dense_weights(self) -> np.ndarray:
        dense = np.zeros((self.n_pre, self.n_post))
        self._scatter(dense, self.w)
        return dense

    def _scatter(self, dense, compact):
        for h in range(self.post_hc):
            cols = slice(h * self.post_mc, (h + 1) * self.post_mc)
            dense[self.gather_index[h], cols] = compact[h]


def new_projection(pre: Population, post: Population, nact: int, seed, chunk: int = 1) -> Projection:
    """Build a projection at independence (``p_ij = p_i p_j``, so ``w = 0``).

    Each post hypercolumn draws a uniformly random set of ``nact`` pre
    hypercolumns from ``np.random.default_rng(seed)``.
    """
    if not 1 <= nact <= pre.n_hc:
        raise ConfigError(f"nact must be in [1, {pre.n_hc}] (got {nact})")
    rng = np.random.default_rng(seed)
    rf = np.stack([np.sort(rng.choice(pre.n_hc, size=nact, replace=False)) for _ in range(post.n_hc)])
    proj = Projection(
        pre_hc=pre.n_hc,
        pre_mc=pre.n_mc,
        post_hc=post.n_hc,
        post_mc=post.n_mc,
        nact=nact,
        chunk=chunk,
        rf=rf.astype(np.int64),
        p_joint=np.empty((post.n_hc, nact * pre.n_mc, post.n_mc)),
        w=np.zeros((post.n_hc, nact * pre.n_mc, post.n_mc)),
    )
    post_blocks = post.blocks(post.p)
    for h in range(post.n_hc):
        proj.p_joint[h] = np.outer(pre.p[proj.gather_index[h]], post_blocks[h])
    return proj


@dataclass
class BCPNNModel:
    """Input, hidden and output populations with their two projections.

    ``rng`` drives the unsupervised support noise. The unsupervised and
    supervised phases keep separate trace schedules.
    """

    cfg: ModelConfig
    inp: Population
    hid: Population
    out: Population
    ih: Projection
    ho: Projection
    rng: np.random.Generator
    sched_unsup: TraceSchedule
    sched_sup: TraceSchedule

    @property
    def structural(self) -> bool:
        return self.ih.silent is not None

    @property
    def trained(self) -> bool:
        return self.sched_sup.t > 0

    def enable_structural(self):
        """Start tracking joint traces for inactive input-hidden connections."""
        if self.ih.silent is None:
            self.ih.silent = np.stack(
                [np.outer(self.inp.p, blk) for blk in self.hid.blocks(self.hid.p)]
            ).astype(np.float32)

    def copy(self) -> "BCPNNModel":
        return copy.deepcopy(self)


def build_model(cfg: ModelConfig, structural: bool = False) -> BCPNNModel:
    check_config(cfg)
    mask_seed, noise_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    inp = new_population(cfg.input_hc, cfg.input_mc)
    hid = new_population(cfg.hidden_hc, cfg.hidden_mc)
    out = new_population(1, cfg.n_classes)
    ih = new_projection(inp, hid, cfg.nact_hi, mask_seed, chunk=cfg.packet_ih)
    ho = new_projection(hid, out, cfg.hidden_hc, mask_seed, chunk=cfg.packet_ho)
    ho.pre_trace = hid.p.copy()
    model = BCPNNModel(
        cfg=cfg,
        inp=inp,
        hid=hid,
        out=out,
        ih=ih,
        ho=ho,
        rng=np.random.default_rng(noise_seed),
        sched_unsup=TraceSchedule(alpha_min=cfg.alpha_min),
        sched_sup=TraceSchedule(alpha_min=cfg.alpha_min),
    )
    if structural:
        model.enable_structural()
    return model
