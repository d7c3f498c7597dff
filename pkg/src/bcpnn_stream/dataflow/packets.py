"""Fixed-width packets: the unit of transfer between pipeline stages."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bcpnn_stream.errors import ConfigError, SynchronizationError


@dataclass(frozen=True)
class Packet:
    values: np.ndarray
    base_index: int
    tag: int

    def __len__(self):
        return len(self.values)


def packetize(vector, packet_len: int, tag: int = 0) -> list[Packet]:
    vector = np.asarray(vector)
    n = len(vector)
    if packet_len < 1 or n % packet_len:
        raise ConfigError(f"packet length {packet_len} does not divide vector length {n}")
    return [Packet(vector[i:i + packet_len].copy(), i, tag) for i in range(0, n, packet_len)]


def depacketize(packets, length: int | None = None) -> np.ndarray:
    """Reassemble a vector; every index must be covered exactly once."""
    packets = sorted(packets, key=lambda p: p.base_index)
    if not packets:
        return np.empty(0)
    n = sum(len(p) for p in packets) if length is None else length
    out = np.empty(n, dtype=packets[0].values.dtype)
    covered = 0
    for p in packets:
        if p.base_index != covered:
            raise SynchronizationError(f"gap or overlap at index {covered} (packet starts at {p.base_index})")
        out[p.base_index:p.base_index + len(p)] = p.values
        covered += len(p)
    if covered != n:
        raise SynchronizationError(f"packets cover {covered} of {n} values")
    return out


def merge_packets(parts) -> Packet:
    """Join sub-packets carrying consecutive index ranges of one image."""
    tag = parts[0].tag
    base = parts[0].base_index
    pos = base
    for p in parts:
        if p.tag != tag:
            raise SynchronizationError(f"tag mismatch at merge: {[q.tag for q in parts]}")
        if p.base_index != pos:
            raise SynchronizationError(
                f"sub-packets not contiguous at merge: bases {[q.base_index for q in parts]}"
            )
        pos += len(p)
    return Packet(np.concatenate([p.values for p in parts]), base, tag)


def merge_channels(*streams) -> list[Packet]:
    """Zip N sub-streams (one per memory channel) into wide, index-ordered packets."""
    lengths = {len(s) for s in streams}
    if len(lengths) != 1:
        raise SynchronizationError(f"sub-streams carry different packet counts: {sorted(lengths)}")
    return [merge_packets(parts) for parts in zip(*streams)]


def split_packet(packet: Packet, n_parts: int) -> list[Packet]:
    n = len(packet)
    if n % n_parts:
        raise ConfigError(f"cannot split a {n}-value packet into {n_parts} parts")
    w = n // n_parts
    return [
        Packet(packet.values[i * w:(i + 1) * w].copy(), packet.base_index + i * w, packet.tag)
        for i in range(n_parts)
    ]


def partition(packets, n_parts: int) -> list[list[Packet]]:
    """Deal consecutive packets round-robin onto ``n_parts`` sub-streams."""
    streams = [[] for _ in range(n_parts)]
    for i, p in enumerate(packets):
        streams[i % n_parts].append(p)
    return streams


def split_channels(merged, n_parts: int) -> list[list[Packet]]:
    streams = [[] for _ in range(n_parts)]
    for p in merged:
        for i, part in enumerate(split_packet(p, n_parts)):
            streams[i].append(part)
    return streams
