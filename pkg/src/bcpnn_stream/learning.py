"""BCPNN learning and activation rules.

Unit and joint probability traces are running averages of activity. Biases and
weights are read off them as log-probabilities::

    b_j  = log p_j
    w_ij = log p_ij - log p_i - log p_j

Every probability is floored at ``EPS`` (``EPS**2`` for joint traces) before
a logarithm is taken. The stored traces themselves are never clamped, which
keeps each hypercolumn's trace sum and the joint/unit marginals exact.

The step procedures work one hypercolumn block at a time and accumulate
support one packet at a time. The dataflow stages call the same block
functions, which makes the two execution paths agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bcpnn_stream import counting, kernels
from bcpnn_stream.data import encode_onehot
from bcpnn_stream.errors import InputError, NumericalError, ShapeError, StateError

EPS = 1e-6
EPS_JOINT = EPS * EPS


@dataclass
class TraceSchedule:
    """Step counter and trace rate ``max(1/(t+1), alpha_min)``."""

    t: int = 0
    alpha_min: float = 1e-4

    @property
    def alpha(self) -> float:
        return max(1.0 / (self.t + 1), self.alpha_min)

    def advance(self, n: int = 1):
        self.t += n


def clamp_prob(x, floor: float = EPS):
    if np.ndim(x) == 0:
        return min(max(float(x), floor), 1.0)
    return np.clip(x, floor, 1.0)


def bias(p_j):
    return np.log(clamp_prob(p_j))


def weight(p_i, p_j, p_ij):
    return np.log(clamp_prob(p_ij, EPS_JOINT)) - np.log(clamp_prob(p_i)) - np.log(clamp_prob(p_j))


def _check_len(vec, n, what):
    if vec.shape != (n,):
        raise ShapeError(f"{what} has shape {vec.shape}, expected ({n},)")


def update_unit_traces(pop, sched: TraceSchedule):
    """Move ``pop.p`` one step toward ``pop.act``."""
    kernels.ema(pop.p, pop.act, sched.alpha)


def update_joint_traces(proj, pre_act, post_act, sched: TraceSchedule):
    _check_len(pre_act, proj.n_pre, "pre activation")
    _check_len(post_act, proj.n_post, "post activation")
    alpha = sched.alpha
    xg = proj.gather(pre_act)
    a = post_act.reshape(proj.post_hc, proj.post_mc)
    proj.p_joint *= 1.0 - alpha
    proj.p_joint += alpha * xg[:, :, None] * a[:, None, :]


def pre_marginal(proj, pre):
    return pre.p if proj.pre_trace is None else proj.pre_trace


def refresh_weights(proj, pre, post):
    """Recompute cached weights of active connections and the post bias."""
    pi = pre_marginal(proj, pre)[proj.gather_index]
    pj = post.p.reshape(proj.post_hc, 1, proj.post_mc)
    proj.w[...] = weight(pi[:, :, None], pj, proj.p_joint)
    post.bias[...] = bias(post.p)


def support_block(proj, h, xg_h, bias_h, counter=None):
    """Support of post hypercolumn ``h`` from its gathered pre activity.

    Accumulates one packet of ``proj.chunk`` values at a time, in ascending
    index order, then adds the partial sums in order on top of the bias.
    """
    c = proj.chunk
    n_chunks = proj.rf_len // c
    w_h = proj.w[h]
    partials = np.empty((n_chunks, proj.post_mc))
    for i in range(n_chunks):
        partials[i] = kernels.packet_partial(xg_h[i * c:(i + 1) * c], w_h[i * c:(i + 1) * c])
    if counter is not None:
        counter.add(counting.support_packet(c, proj.post_mc), n_chunks)
        counter.add(counting.support_finalize(n_chunks, proj.post_mc))
    return kernels.reduce_partials(bias_h, partials)


def support(proj, pre_act, post_bias, counter=None):
    """``s_j = b_j + sum_i w_ij * x_i`` over each post unit's receptive field."""
    _check_len(pre_act, proj.n_pre, "pre activation")
    _check_len(post_bias, proj.n_post, "post bias")
    xg = proj.gather(pre_act)
    b = post_bias.reshape(proj.post_hc, proj.post_mc)
    return np.concatenate([support_block(proj, h, xg[h], b[h], counter) for h in range(proj.post_hc)])


def support_from_traces(proj, pre, post, pre_act):
    """Support computed directly from traces, bypassing the weight cache."""
    pi = pre_marginal(proj, pre)[proj.gather_index]
    pj = post.p.reshape(proj.post_hc, 1, proj.post_mc)
    w = weight(pi[:, :, None], pj, proj.p_joint)
    xg = proj.gather(pre_act)
    s = np.einsum("hk,hkj->hj", xg, w)
    return (bias(post.p).reshape(proj.post_hc, proj.post_mc) + s).ravel()


def softmax_block(s, temperature=1.0, where="softmax"):
    if not np.all(np.isfinite(s)):
        raise NumericalError(f"{where}: non-finite support {s[~np.isfinite(s)][:4]}")
    e = np.exp((s - s.max()) / temperature)
    return e / e.sum()


def softmax_hc(s, n_hc, n_mc, temperature=1.0):
    """Softmax applied independently to every hypercolumn slice of ``s``."""
    if temperature <= 0:
        raise InputError(f"temperature must be positive (got {temperature})")
    _check_len(s, n_hc * n_mc, "support")
    blocks = s.reshape(n_hc, n_mc)
    return np.concatenate(
        [softmax_block(blocks[h], temperature, where=f"softmax hypercolumn {h}") for h in range(n_hc)]
    )


# --- block-level pieces of the step procedures -------------------------------

def hidden_block(model, h, xg_h, noise=False, counter=None):
    """Activation of hidden hypercolumn ``h``; optionally with support noise."""
    cfg = model.cfg
    mc = cfg.hidden_mc
    s = support_block(model.ih, h, xg_h, model.hid.bias[h * mc:(h + 1) * mc], counter)
    if noise:
        s = s + model.rng.uniform(0.0, cfg.noise_amp, mc)
        if counter is not None:
            counter.add(counting.noise(mc))
    if counter is not None:
        counter.add(counting.softmax(mc, counter.costs))
    return softmax_block(s, cfg.temperature, where=f"hidden softmax hypercolumn {h}")


def begin_unsup_traces(model, x, alpha, counter=None):
    """Input unit traces; returns their clamped logs for the weight refresh."""
    kernels.ema(model.inp.p, x, alpha)
    model.inp.act[...] = x
    if counter is not None:
        counter.add(counting.unit_trace(x.shape[0], counter.costs))
    return kernels.clamped_log(model.inp.p, EPS)


def unsup_trace_block(model, h, x, xg_h, a_h, alpha, log_pi, counter=None):
    """Hidden traces, joint traces and cached weights of hidden hypercolumn ``h``."""
    hid, ih = model.hid, model.ih
    mc = hid.n_mc
    sl = slice(h * mc, (h + 1) * mc)
    p_h = hid.p[sl]
    kernels.ema(p_h, a_h, alpha)
    hid.act[sl] = a_h
    log_pj = kernels.clamped_log(p_h, EPS)
    hid.bias[sl] = log_pj
    kernels.joint_update_refresh(
        ih.p_joint[h], ih.w[h], xg_h, a_h, alpha, log_pi[ih.gather_index[h]], log_pj, EPS_JOINT
    )
    if ih.silent is not None:
        kernels.silent_update(ih.silent[h], x, a_h, alpha)
    if counter is not None:
        counter.add(counting.unit_trace(mc, counter.costs))
        counter.add(counting.bias_write(mc))
        counter.add(counting.joint_block(ih.rf_len, mc, counter.costs))
        if ih.silent is not None:
            counter.add(counting.silent_block(ih.n_pre, mc))


def sup_traces(model, a, label_act, alpha, counter=None):
    """Hidden-output traces and weights from a hidden activation and a one-hot label."""
    ho, out = model.ho, model.out
    kernels.ema(ho.pre_trace, a, alpha)
    kernels.ema(out.p, label_act, alpha)
    out.act[...] = label_act
    log_pi = kernels.clamped_log(ho.pre_trace, EPS)
    log_pk = kernels.clamped_log(out.p, EPS)
    out.bias[...] = log_pk
    kernels.joint_update_refresh(ho.p_joint[0], ho.w[0], a, label_act, alpha, log_pi, log_pk, EPS_JOINT)
    if counter is not None:
        counter.add(counting.unit_trace(a.shape[0], counter.costs))
        counter.add(counting.unit_trace(label_act.shape[0], counter.costs))
        counter.add(counting.bias_write(label_act.shape[0]))
        counter.add(counting.joint_block(a.shape[0], label_act.shape[0], counter.costs))


def output_distribution(model, a, counter=None):
    ho, out = model.ho, model.out
    s = support_block(ho, 0, a, out.bias, counter)
    if counter is not None:
        counter.add(counting.softmax(out.n_mc, counter.costs))
    return softmax_block(s, model.cfg.temperature, where="output softmax")


# --- step procedures -----------------------------------------------------------

def _forward_hidden(model, x, noise, counter):
    _check_len(x, model.ih.n_pre, "input activation")
    if counter is not None:
        counter.add(counting.fetch_input(x.shape[0]))
        if model.structural:
            counter.add(counting.fetch_receptive_field(model.ih.post_hc, model.ih.nact))
    xg = model.ih.gather(x)
    a = np.concatenate([hidden_block(model, h, xg[h], noise, counter) for h in range(model.ih.post_hc)])
    return xg, a


def unsupervised_step(model, input_act, sched: TraceSchedule, counter=None):
    """One online unsupervised update; returns the hidden activation."""
    xg, a = _forward_hidden(model, input_act, True, counter)
    alpha = sched.alpha
    log_pi = begin_unsup_traces(model, input_act, alpha, counter)
    mc = model.cfg.hidden_mc
    for h in range(model.ih.post_hc):
        unsup_trace_block(model, h, input_act, xg[h], a[h * mc:(h + 1) * mc], alpha, log_pi, counter)
    sched.advance()
    return a


def supervised_step(model, input_act, label, sched: TraceSchedule, counter=None):
    """Clamp the output to ``label`` and learn hidden-output traces only."""
    onehot = encode_onehot(label, model.cfg.n_classes)
    _, a = _forward_hidden(model, input_act, False, counter)
    model.hid.act[...] = a
    sup_traces(model, a, onehot, sched.alpha, counter)
    sched.advance()
    return a


def infer(model, input_act, counter=None):
    """Forward pass without plasticity; returns ``(class index, distribution)``."""
    if not model.trained:
        raise StateError("model has no supervised training; hidden-output weights are undefined")
    _, a = _forward_hidden(model, input_act, False, counter)
    dist = output_distribution(model, a, counter)
    return int(np.argmax(dist)), dist


def hidden_representation(model, input_act):
    """Noise-free hidden activation, without touching model state."""
    return _forward_hidden(model, input_act, False, None)[1]
