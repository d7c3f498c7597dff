"""Compiled inner loops shared by the sequential engine and the dataflow stages.

Both execution paths call these functions on identically shaped blocks, so
their floating-point results agree bit for bit.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def packet_partial(values, wblock):
    # Ascending-index accumulation; one partial sum per post unit.
    n, m = wblock.shape
    out = np.zeros(m)
    for k in range(n):
        v = values[k]
        for j in range(m):
            out[j] += v * wblock[k, j]
    return out


@njit(cache=True)
def reduce_partials(bias, partials):
    acc = partials[0].copy()
    for c in range(1, partials.shape[0]):
        for j in range(acc.shape[0]):
            acc[j] += partials[c, j]
    out = np.empty_like(acc)
    for j in range(acc.shape[0]):
        out[j] = bias[j] + acc[j]
    return out


@njit(cache=True)
def ema(p, x, alpha):
    beta = 1.0 - alpha
    for i in range(p.shape[0]):
        p[i] = p[i] * beta + alpha * x[i]


@njit(cache=True)
def clamped_log(p, floor):
    out = np.empty_like(p)
    for i in range(p.shape[0]):
        v = p[i]
        if v < floor:
            v = floor
        elif v > 1.0:
            v = 1.0
        out[i] = np.log(v)
    return out


@njit(cache=True)
def _joint_ema_clamped(joint, clamped, x, a, alpha, floor):
    beta = 1.0 - alpha
    n, m = joint.shape
    for k in range(n):
        ax = alpha * x[k]
        for j in range(m):
            v = joint[k, j] * beta + ax * a[j]
            joint[k, j] = v
            if v < floor:
                v = floor
            elif v > 1.0:
                v = 1.0
            clamped[k, j] = v


@njit(cache=True)
def _subtract_marginals(w, log_pi, log_pj):
    n, m = w.shape
    for k in range(n):
        li = log_pi[k]
        for j in range(m):
            w[k, j] = w[k, j] - li - log_pj[j]


def joint_update_refresh(joint, w, x, a, alpha, log_pi, log_pj, floor):
    """EMA of the outer product x*a into ``joint``, then the weight refresh.

    ``w[k, j] = log(clamp(joint[k, j])) - log_pi[k] - log_pj[j]``. ``w``
    doubles as scratch space for the clamped traces so the logarithm runs
    as one vectorized pass.
    """
    _joint_ema_clamped(joint, w, x, a, alpha, floor)
    np.log(w, out=w)
    _subtract_marginals(w, log_pi, log_pj)


@njit(cache=True)
def silent_update(store, x, a, alpha):
    # float32 store of joint traces for every (input unit, hidden unit) pair.
    beta = np.float32(1.0 - alpha)
    n, m = store.shape
    for k in range(n):
        ax = alpha * x[k]
        for j in range(m):
            store[k, j] = np.float32(store[k, j] * beta + np.float32(ax * a[j]))


@njit(cache=True)
def block_mutual_information(joint, pi, pj, floor_joint, floor):
    """Sum of p_ij*log(p_ij/(p_i p_j)) over one block of clamped traces."""
    n, m = joint.shape
    total = 0.0
    for k in range(n):
        vi = pi[k]
        if vi < floor:
            vi = floor
        elif vi > 1.0:
            vi = 1.0
        for j in range(m):
            vj = pj[j]
            if vj < floor:
                vj = floor
            elif vj > 1.0:
                vj = 1.0
            v = joint[k, j]
            if v < floor_joint:
                v = floor_joint
            elif v > 1.0:
                v = 1.0
            total += v * (np.log(v) - np.log(vi) - np.log(vj))
    return total


@njit(cache=True)
def hypercolumn_mi_scores(store, pi, pj, n_mc, floor_joint, floor):
    """Mutual-information score of every pre-hypercolumn against one post block.

    ``store`` holds joint traces for all pre units (rows) and the post
    hypercolumn's units (columns); rows are grouped ``n_mc`` per hypercolumn.
    """
    n, m = store.shape
    log_pj = np.empty(m)
    for j in range(m):
        vj = pj[j]
        if vj < floor:
            vj = floor
        elif vj > 1.0:
            vj = 1.0
        log_pj[j] = np.log(vj)
    scores = np.zeros(n // n_mc)
    for k in range(n):
        vi = pi[k]
        if vi < floor:
            vi = floor
        elif vi > 1.0:
            vi = 1.0
        li = np.log(vi)
        total = 0.0
        for j in range(m):
            v = np.float64(store[k, j])
            if v < floor_joint:
                v = floor_joint
            elif v > 1.0:
                v = 1.0
            total += v * (np.log(v) - li - log_pj[j])
        scores[k // n_mc] += total
    return scores
