"""Dataflow emulation of the accelerator and its sequential reference."""

from bcpnn_stream.dataflow.channel import Channel
from bcpnn_stream.dataflow.oracle import sequential_oracle
from bcpnn_stream.dataflow.packets import Packet, depacketize, merge_channels, packetize, split_channels
from bcpnn_stream.dataflow.pipeline import (
    MODES,
    DelaySpec,
    Pipeline,
    ChannelSpec,
    PipelineStats,
    StageSpec,
    StreamResult,
    build_pipeline,
    check_pipeline,
    run_stream,
)

__all__ = [
    "MODES",
    "Channel",
    "ChannelSpec",
    "DelaySpec",
    "Packet",
    "Pipeline",
    "PipelineStats",
    "StageSpec",
    "StreamResult",
    "build_pipeline",
    "check_pipeline",
    "depacketize",
    "merge_channels",
    "packetize",
    "run_stream",
    "sequential_oracle",
    "split_channels",
]
