"""Closed-form stage costs: compute time with KV offloading, per-hop
communication time, and the memory constraints that tie them together.

All times are milliseconds and all sizes are bytes.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple, Union

from .cluster import LinkProfile, ModelProfile, NodeProfile, interpolate_latency

MB = 1_000_000


class CommMode(Enum):
    """Which payload crosses a hop when the batch is split into micro-batches."""

    MICRO_BATCH = "micro"
    """Each micro-batch is sent on its own: b * d bytes per transfer."""

    WHOLE_BATCH = "batch"
    """Every transfer is charged the whole batch, B * d bytes."""


@dataclass(frozen=True)
class CostSettings:
    """Knobs of the cost model that are not part of the cluster description."""

    compression_ratio: float = 0.75
    """Compressed size over raw size, applied to payloads when compression is on."""

    codec_ms_per_mb: float = 0.0
    """CPU time to compress one raw MB. Charged to the communication lane."""

    comm_mode: CommMode = CommMode.MICRO_BATCH

    def __post_init__(self) -> None:
        assert 0 < self.compression_ratio <= 1
        assert self.codec_ms_per_mb >= 0


class InfeasibleReason(Enum):
    GPU_WEIGHT_OVERFLOW = "GpuWeightOverflow"
    """Weights plus activation workspace exceed GPU memory."""

    HOST_KV_OVERFLOW = "HostKvOverflow"
    """The offloaded KV cache does not fit in host memory."""


@dataclass(frozen=True)
class Infeasible:
    """A layer count that cannot be placed on a node."""

    reason: InfeasibleReason
    detail: str


@dataclass(frozen=True)
class StageCost:
    """The cost of one pipeline stage for one micro-batch."""

    t_comp: float
    t_comm: float
    alpha: float
    feasible: bool = True
    infeasible: Optional[Infeasible] = None


BlockLatencies = Tuple[float, float, float]
# (t_mlp, t_attn_gpu, t_attn_cpu) at one micro-batch size.


def block_latencies(node: NodeProfile, b: int) -> BlockLatencies:
    assert b >= 1
    return (
        interpolate_latency(node.t_mlp, b),
        interpolate_latency(node.t_attn_gpu, b),
        interpolate_latency(node.t_attn_cpu, b),
    )


def blend_block(lat: BlockLatencies, alpha: float) -> float:
    mlp, gpu, cpu = lat
    return mlp + (1 - alpha) * gpu + alpha * cpu


def t_block(node: NodeProfile, alpha: float, b: int) -> float:
    """Time for one block when a fraction `alpha` of the KV cache is in host
    memory: MLP on the GPU, attention split between GPU and CPU."""
    assert 0 <= alpha <= 1 and b >= 1
    return blend_block(block_latencies(node, b), alpha)


def stage_compute_time(node: NodeProfile, layers: int, alpha: float, b: int) -> float:
    assert layers >= 0
    if layers == 0:
        return 0.0
    return layers * t_block(node, alpha, b)


def hop_comm_time(link: LinkProfile, payload: float) -> float:
    """Propagation latency plus serialization of `payload` bytes."""
    assert payload >= 0
    return link.latency + payload / link.bytes_per_ms


def derive_offload_ratio(
    node: NodeProfile, model: ModelProfile, layers: int, B: int, b: int
) -> Union[float, Infeasible]:
    """The smallest fraction of KV cache that must move to host memory for
    `layers` blocks at batch size `B` (micro-batch `b`) to fit on the GPU."""
    assert layers >= 1 and B >= 1 and b >= 1
    weights = layers * model.weight_bytes_per_block
    workspace = model.act_workspace_factor * b * model.activation_bytes
    kv = layers * model.kv_bytes_per_block_per_token * B * model.seq_len

    if weights + workspace > node.gpu_mem:
        return Infeasible(
            InfeasibleReason.GPU_WEIGHT_OVERFLOW,
            f"{node.node_id}: {layers} blocks need {weights + workspace:.0f} bytes "
            f"of {node.gpu_mem} before any KV cache",
        )
    free = node.gpu_mem - weights - workspace
    alpha = min(max((kv - free) / kv, 0.0), 1.0)
    if alpha * kv > node.host_mem:
        return Infeasible(
            InfeasibleReason.HOST_KV_OVERFLOW,
            f"{node.node_id}: offloading {alpha * kv:.0f} KV bytes exceeds "
            f"host memory {node.host_mem}",
        )
    return alpha


def hop_payload(
    model: ModelProfile, B: int, M: int, compression: bool, settings: CostSettings
) -> float:
    """Bytes that cross one hop per transfer."""
    d = model.activation_bytes
    if M > 1 and settings.comm_mode is CommMode.MICRO_BATCH:
        payload = (B // M) * d
    else:
        payload = B * d
    return payload * (settings.compression_ratio if compression else 1.0)


def comm_time(
    link: Optional[LinkProfile],
    model: ModelProfile,
    B: int,
    M: int,
    compression: bool,
    settings: CostSettings,
) -> float:
    """T_comm for a hop over `link`; zero when there is no next stage."""
    if link is None:
        return 0.0
    t = hop_comm_time(link, hop_payload(model, B, M, compression, settings))
    if compression and settings.codec_ms_per_mb:
        raw = hop_payload(model, B, M, False, settings)
        t += settings.codec_ms_per_mb * raw / MB
    return t


def stage_cost(
    node: NodeProfile,
    link: Optional[LinkProfile],
    layers: int,
    alpha: Union[float, Infeasible],
    B: int,
    M: int,
    compression_ratio: float,
    model: ModelProfile,
    settings: CostSettings = CostSettings(),
) -> StageCost:
    """Combine compute and communication for one stage.

    `compression_ratio` of 1 means the payload travels uncompressed. An
    `Infeasible` alpha yields an infeasible cost with infinite times.
    """
    assert M >= 1 and B % M == 0
    assert 0 < compression_ratio <= 1
    if isinstance(alpha, Infeasible):
        return StageCost(math.inf, math.inf, 1.0, feasible=False, infeasible=alpha)

    b = B // M
    t_comp = stage_compute_time(node, layers, alpha, b)
    compression = compression_ratio < 1
    costed = CostSettings(
        compression_ratio=compression_ratio if compression else 1.0,
        codec_ms_per_mb=settings.codec_ms_per_mb,
        comm_mode=settings.comm_mode,
    )
    t_comm = comm_time(link, model, B, M, compression, costed)
    return StageCost(t_comp, t_comm, alpha)
