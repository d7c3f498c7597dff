"""Floating-point operation and byte accounting.

Every kernel charges a fixed cost per invocation. The instrumented engines add
these costs as they run; the analytic roofline model multiplies them by the
number of invocations per image. Bytes count traffic to and from the large
memory-resident arrays (weights, traces, biases, the encoded input) at four
bytes per value; packets moving between stages stay on chip and are free.
"""

from __future__ import annotations

from dataclasses import dataclass

BYTES_PER_VALUE = 4


@dataclass(frozen=True)
class CostModel:
    exp_flops: int = 1
    log_flops: int = 1


DEFAULT_COSTS = CostModel()


def fetch_input(n_input):
    return 0, BYTES_PER_VALUE * n_input


def fetch_receptive_field(n_post_hc, nact):
    # Receptive-field index table, read every image when it is plastic.
    return 0, BYTES_PER_VALUE * n_post_hc * nact


def support_packet(packet_len, n_post_mc):
    return 2 * packet_len * n_post_mc, BYTES_PER_VALUE * packet_len * n_post_mc


def support_finalize(n_chunks, n_post_mc):
    return n_chunks * n_post_mc, BYTES_PER_VALUE * n_post_mc


def noise(n):
    return n, 0


def softmax(n, costs=DEFAULT_COSTS):
    return n * (4 + costs.exp_flops), 0


def unit_trace(n, costs=DEFAULT_COSTS):
    # EMA read-modify-write plus the log that refreshes the cached bias.
    return 3 * n + n * costs.log_flops, 2 * BYTES_PER_VALUE * n


def bias_write(n):
    return 0, BYTES_PER_VALUE * n


def joint_block(n_pre, n_post, costs=DEFAULT_COSTS):
    flops = n_pre + n_pre * n_post * (5 + costs.log_flops)
    return flops, 3 * BYTES_PER_VALUE * n_pre * n_post


def silent_block(n_pre, n_post):
    return n_pre + 3 * n_pre * n_post, 2 * BYTES_PER_VALUE * n_pre * n_post


class OpCounter:
    __slots__ = ("flops", "bytes", "costs")

    def __init__(self, costs: CostModel = DEFAULT_COSTS):
        self.flops = 0
        self.bytes = 0
        self.costs = costs

    def add(self, cost, times=1):
        f, b = cost
        self.flops += f * times
        self.bytes += b * times

    def merge(self, other: "OpCounter"):
        self.flops += other.flops
        self.bytes += other.bytes

    def snapshot(self):
        return self.flops, self.bytes

    def __repr__(self):
        return f"OpCounter(flops={self.flops}, bytes={self.bytes})"
