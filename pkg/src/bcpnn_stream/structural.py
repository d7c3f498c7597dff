"""Structural plasticity: mutual-information scoring and receptive-field rewiring.

Each hidden hypercolumn keeps exactly ``nact_hi`` active input hypercolumns.
A rewire event swaps the least informative active inputs for the most
informative inactive ones, where "informative" is the mutual information
between the input hypercolumn and the hidden hypercolumn estimated from the
joint traces. Scores come from the model's silent trace store when it has one
(every pair, one continuous history). Without it, only active pairs have
traces and inactive pairs score 0 (independence).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from bcpnn_stream import kernels
from bcpnn_stream.errors import ConfigError, DataFormatError, InputError, StateError
from bcpnn_stream.learning import EPS, EPS_JOINT, pre_marginal, weight


@dataclass
class RewireEvent:
    step: int
    post_hc: int
    removed: list = field(default_factory=list)
    added: list = field(default_factory=list)


def _check_index(value, bound, what):
    if not 0 <= value < bound:
        raise InputError(f"{what} {value} out of range [0, {bound})")


def mi_scores(model, post_hc: int) -> np.ndarray:
    """Score of every input hypercolumn against hidden hypercolumn ``post_hc``."""
    ih, inp, hid = model.ih, model.inp, model.hid
    _check_index(post_hc, ih.post_hc, "hidden hypercolumn")
    pj = hid.p[post_hc * hid.n_mc:(post_hc + 1) * hid.n_mc]
    pi = pre_marginal(ih, inp)
    if ih.silent is not None:
        return kernels.hypercolumn_mi_scores(ih.silent[post_hc], pi, pj, ih.pre_mc, EPS_JOINT, EPS)
    scores = np.zeros(ih.pre_hc)
    active = kernels.hypercolumn_mi_scores(
        ih.p_joint[post_hc], pi[ih.gather_index[post_hc]], pj, ih.pre_mc, EPS_JOINT, EPS
    )
    scores[ih.rf[post_hc]] = active
    return scores


def mi_score(model, pre_hc: int, post_hc: int) -> float:
    """``sum p_ij log(p_ij / (p_i p_j))`` over one input/hidden hypercolumn pair."""
    _check_index(pre_hc, model.ih.pre_hc, "input hypercolumn")
    return float(mi_scores(model, post_hc)[pre_hc])


def block_mi(joint, p_pre, p_post) -> float:
    """Mutual information of an explicit joint block and its marginals."""
    return float(
        kernels.block_mutual_information(
            np.asarray(joint, dtype=np.float64),
            np.asarray(p_pre, dtype=np.float64),
            np.asarray(p_post, dtype=np.float64),
            EPS_JOINT,
            EPS,
        )
    )


def mean_active_mi(model) -> float:
    """Mean score of the active input hypercolumns, over all hidden hypercolumns."""
    ih = model.ih
    return float(np.mean([mi_scores(model, h)[ih.rf[h]].mean() for h in range(ih.post_hc)]))


def _rank(scores, candidates, descending):
    key = -scores[candidates] if descending else scores[candidates]
    return candidates[np.lexsort((candidates, key))]


def rewire(model, n_swaps: int, step: int | None = None) -> list[RewireEvent]:
    """Swap up to ``n_swaps`` connections per hidden hypercolumn.

    The lowest-scoring active inputs are paired with the highest-scoring
    inactive ones (ties go to the lower index) and a pair is swapped only when
    the newcomer scores strictly higher. Newly activated blocks restart at
    independence, so their weights start at zero.
    """
    ih = model.ih
    if n_swaps > ih.nact:
        raise ConfigError(f"n_swaps ({n_swaps}) exceeds nact_hi ({ih.nact})")
    if n_swaps < 0:
        raise ConfigError(f"n_swaps must be >= 0 (got {n_swaps})")
    step = model.sched_unsup.t if step is None else step
    events = []
    if n_swaps == 0:
        return events
    for h in range(ih.post_hc):
        scores = mi_scores(model, h)
        active = ih.rf[h]
        inactive = np.setdiff1d(np.arange(ih.pre_hc), active)
        weakest = _rank(scores, active, descending=False)
        strongest = _rank(scores, inactive, descending=True)
        removed, added = [], []
        for out_hc, in_hc in zip(weakest[:n_swaps], strongest[:n_swaps]):
            if scores[in_hc] <= scores[out_hc]:
                break
            removed.append(int(out_hc))
            added.append(int(in_hc))
        if removed:
            _apply_swap(model, h, removed, added)
            events.append(RewireEvent(step=step, post_hc=h, removed=removed, added=added))
    return events


def _apply_swap(model, h, removed, added):
    ih, hid = model.ih, model.hid
    mc = ih.pre_mc
    old_rf = ih.rf[h]
    new_rf = np.sort(np.concatenate([np.setdiff1d(old_rf, removed), added]))
    pos = {int(q): k for k, q in enumerate(old_rf)}
    pi = pre_marginal(ih, model.inp)
    pj = hid.p[h * hid.n_mc:(h + 1) * hid.n_mc]
    joint = np.empty_like(ih.p_joint[h])
    w = np.empty_like(ih.w[h])
    for k, q in enumerate(new_rf):
        rows = slice(k * mc, (k + 1) * mc)
        if int(q) in pos:
            old = slice(pos[int(q)] * mc, (pos[int(q)] + 1) * mc)
            joint[rows] = ih.p_joint[h, old]
            w[rows] = ih.w[h, old]
        else:
            p_units = pi[q * mc:(q + 1) * mc]
            joint[rows] = np.outer(p_units, pj)
            w[rows] = weight(p_units[:, None], pj[None, :], joint[rows])
    ih.p_joint[h] = joint
    ih.w[h] = w
    ih.rf[h] = new_rf
    ih.invalidate()


def maybe_rewire(model, events: list | None = None) -> list[RewireEvent]:
    """Rewire if structural plasticity is on and the step count hits the interval."""
    cfg = model.cfg
    t = model.sched_unsup.t
    if not model.structural or cfg.rewire_interval <= 0 or t == 0 or t % cfg.rewire_interval:
        return []
    new = rewire(model, cfg.n_swaps, step=t)
    if events is not None:
        events.extend(new)
    return new


def export_receptive_field(model, post_hc: int, weighted: bool = False) -> np.ndarray:
    """Input-image-shaped map of hidden hypercolumn ``post_hc``'s receptive field.

    Binary by default; with ``weighted`` each active pixel carries its score
    scaled into [0, 1].
    """
    cfg = model.cfg
    _check_index(post_hc, model.ih.post_hc, "hidden hypercolumn")
    if cfg.input_width * cfg.input_height != model.ih.pre_hc:
        raise StateError("input geometry is not a 2-D image")
    grid = np.zeros(model.ih.pre_hc)
    active = model.ih.rf[post_hc]
    if weighted:
        s = np.clip(mi_scores(model, post_hc)[active], 0.0, None)
        top = s.max()
        grid[active] = s / top if top > 0 else 1.0
    else:
        grid[active] = 1.0
    return grid.reshape(cfg.input_height, cfg.input_width)


def write_pgm(path, grid) -> Path:
    """Binary portable graymap (P5, maxval 255) of a [0, 1] grid."""
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape
    pixels = np.rint(np.clip(grid, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise DataFormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    body = raw[pos + 1:pos + 1 + w * h]
    if len(body) != w * h:
        raise DataFormatError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float64) / maxval
