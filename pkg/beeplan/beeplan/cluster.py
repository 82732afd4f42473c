"""The cluster description: nodes, the links between them, and the model
being served. Every other module consumes a `ClusterSpec`.
"""

import json
import logging
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Mapping, Optional, Tuple

from .errors import ParseError, ValidationError

log = logging.getLogger(__name__)

LatencyTable = Dict[int, float]
# A latency table maps micro-batch sizes to milliseconds per block.

MIN_LATENCY_MS = 1e-9
# Extrapolation is clamped to this so latencies stay positive.


def interpolate_latency(table: LatencyTable, b: int) -> float:
    """Look up the latency for micro-batch size `b`.

    Exact at profiled keys, linear between them, and linearly extrapolated
    from the two nearest keys outside the profiled range. A table with a
    single entry is constant.
    """
    assert b >= 1 and table
    if b in table:
        return table[b]
    keys = sorted(table)
    if len(keys) == 1:
        return table[keys[0]]

    if b < keys[0]:
        lo, hi = keys[0], keys[1]
    elif b > keys[-1]:
        lo, hi = keys[-2], keys[-1]
    else:
        hi_idx = next(i for i, k in enumerate(keys) if k > b)
        lo, hi = keys[hi_idx - 1], keys[hi_idx]

    slope = (table[hi] - table[lo]) / (hi - lo)
    return max(table[lo] + slope * (b - lo), MIN_LATENCY_MS)


@dataclass(frozen=True)
class NodeProfile:
    """One machine in the pipeline, with its profiled per-block latencies."""

    node_id: str

    gpu_mem: int
    """GPU memory in bytes."""

    host_mem: int
    """Host memory available for offloaded KV cache, in bytes."""

    t_mlp: LatencyTable
    """MLP time per block per micro-batch."""

    t_attn_gpu: LatencyTable
    """Attention time per block per micro-batch, KV cache on the GPU."""

    t_attn_cpu: LatencyTable
    """Attention time per block per micro-batch, KV cache in host memory."""

    pcie_bw: Optional[float] = None
    """Host-to-device bandwidth in bytes/second. Recorded but unused."""


@dataclass(frozen=True)
class LinkProfile:
    """A directed network link between two nodes."""

    from_: str
    to_: str

    latency: float
    """One-way propagation latency in milliseconds."""

    bandwidth: float
    """Bandwidth in bits/second."""

    @property
    def bytes_per_ms(self) -> float:
        return self.bandwidth / 8 / 1000


@dataclass(frozen=True)
class ModelProfile:
    """The model being partitioned."""

    total_blocks: int
    hidden_dim: int

    elem_bytes: int
    """Bytes per activation element: 2 for FP16."""

    seq_len: int
    weight_bytes_per_block: int
    kv_bytes_per_block_per_token: int

    act_workspace_factor: float = 2.0
    """Activation workspace is this many times b * d bytes."""

    @property
    def activation_bytes(self) -> int:
        """d: the activation payload of one request."""
        return self.hidden_dim * self.elem_bytes


@dataclass(frozen=True)
class ClusterSpec:
    """Nodes in pipeline order, the links between them, and the model."""

    nodes: Tuple[NodeProfile, ...]
    links: Tuple[LinkProfile, ...]
    model: ModelProfile

    def __post_init__(self) -> None:
        # Stash a lookup table; the dataclass itself stays frozen.
        object.__setattr__(
            self, "_by_pair", {(ln.from_, ln.to_): ln for ln in self.links}
        )

    @property
    def n(self) -> int:
        return len(self.nodes)

    def link(self, src: str, dst: str) -> Optional[LinkProfile]:
        """The explicit link from `src` to `dst`, if the cluster lists one."""
        by_pair: Dict[Tuple[str, str], LinkProfile] = getattr(self, "_by_pair")
        return by_pair.get((src, dst))

    def with_bandwidth(self, mbps: float) -> "ClusterSpec":
        """A copy of this spec where every link runs at `mbps`."""
        links = tuple(replace(ln, bandwidth=mbps * 1e6) for ln in self.links)
        return ClusterSpec(self.nodes, links, self.model)

    @classmethod
    def parse(cls, text: str) -> "ClusterSpec":
        """Parse and validate a JSON cluster document."""
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ParseError("cluster document must be a JSON object")
        _check_keys(doc, "", required={"nodes", "links", "model"})

        nodes = tuple(
            _parse_node(obj, f"nodes[{i}]")
            for i, obj in enumerate(_array(doc["nodes"], "nodes"))
        )
        links = tuple(
            _parse_link(obj, f"links[{i}]")
            for i, obj in enumerate(_array(doc["links"], "links"))
        )
        model = _parse_model(doc["model"], "model")
        spec = cls(nodes, links, model)
        _validate(spec)
        log.debug("loaded cluster with %d nodes and %d links", spec.n, len(links))
        return spec

    def to_json(self) -> Dict[str, Any]:
        """The JSON document this spec was (or could have been) parsed from."""
        return {
            "nodes": [_emit_node(node) for node in self.nodes],
            "links": [
                {
                    "from": ln.from_,
                    "to": ln.to_,
                    "latency_ms": ln.latency,
                    "bandwidth_mbps": ln.bandwidth / 1e6,
                }
                for ln in self.links
            ],
            "model": _emit_model(self.model),
        }

    def emit(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def load_cluster_spec(text: str) -> ClusterSpec:
    return ClusterSpec.parse(text)


NODE_KEYS = {"node_id", "gpu_mem", "host_mem", "t_mlp", "t_attn_gpu", "t_attn_cpu"}
LINK_KEYS = {"from", "to", "latency_ms", "bandwidth_mbps"}
MODEL_KEYS = {
    "total_blocks",
    "hidden_dim",
    "elem_bytes",
    "seq_len",
    "weight_bytes_per_block",
    "kv_bytes_per_block_per_token",
}


def _check_keys(
    obj: Mapping[str, Any], where: str, required: set, optional: frozenset = frozenset()
) -> None:
    for key in obj:
        if key not in required and key not in optional:
            raise ValidationError(f"{where}{'.' if where else ''}{key}: unknown field")
    for key in required:
        if key not in obj:
            raise ValidationError(f"{where}{'.' if where else ''}{key}: missing field")


def _array(value: Any, where: str) -> List[Any]:
    if not isinstance(value, list):
        raise ValidationError(f"{where}: expected an array")
    return value


def _object(value: Any, where: str) -> Dict[str, Any]:
    if not isinstance(value, dict):
        raise ValidationError(f"{where}: expected an object")
    return value


def _number(value: Any, where: str, positive: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"{where}: expected a number")
    if value < 0 or (positive and value == 0):
        raise ValidationError(f"{where}: must be {'> 0' if positive else '>= 0'}")
    return value


def _integer(value: Any, where: str, minimum: int = 0) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"{where}: expected an integer")
    if value < minimum:
        raise ValidationError(f"{where}: must be >= {minimum}")
    return value


def _parse_table(value: Any, where: str) -> LatencyTable:
    obj = _object(value, where)
    if not obj:
        raise ValidationError(f"{where}: latency table is empty")
    table: LatencyTable = {}
    for key, ms in obj.items():
        try:
            b = int(key)
        except ValueError:
            raise ValidationError(f"{where}.{key}: micro-batch size must be an integer")
        if b < 1:
            raise ValidationError(f"{where}.{key}: micro-batch size must be >= 1")
        if b in table:
            raise ValidationError(f"{where}.{key}: duplicate micro-batch size {b}")
        table[b] =float(_number(ms, f"{where}.{key}", positive=True))
    return table


def _parse_node(value: Any, where: str) -> NodeProfile:
    obj = _object(value, where)
    _check_keys(obj, where, NODE_KEYS, frozenset({"pcie_bw"}))
    node_id = obj["node_id"]
    if not isinstance(node_id, str) or not node_id:
        raise ValidationError(f"{where}.node_id: expected a non-empty string")
    pcie = obj.get("pcie_bw")
    return NodeProfile(
        node_id=node_id,
        gpu_mem=_integer(obj["gpu_mem"], f"{where}.gpu_mem", minimum=1),
        host_mem=_integer(obj["host_mem"], f"{where}.host_mem"),
        t_mlp=_parse_table(obj["t_mlp"], f"{where}.t_mlp"),
        t_attn_gpu=_parse_table(obj["t_attn_gpu"], f"{where}.t_attn_gpu"),
        t_attn_cpu=_parse_table(obj["t_attn_cpu"], f"{where}.t_attn_cpu"),
        pcie_bw=None if pcie is None else _number(pcie, f"{where}.pcie_bw", True),
    )


def _parse_link(value: Any, where: str) -> LinkProfile:
    obj = _object(value, where)
    _check_keys(obj, where, LINK_KEYS)
    for end in ("from", "to"):
        if not isinstance(obj[end], str):
            raise ValidationError(f"{where}.{end}: expected a node id")
    return LinkProfile(
        from_=obj["from"],
        to_=obj["to"],
        latency=float(_number(obj["latency_ms"], f"{where}.latency_ms")),
        bandwidth=_number(obj["bandwidth_mbps"], f"{where}.bandwidth_mbps", True)
        * 1e6,
    )


def _parse_model(value: Any, where: str) -> ModelProfile:
    obj = _object(value, where)
    _check_keys(obj, where, MODEL_KEYS, frozenset({"act_workspace_factor"}))
    elem_bytes = _integer(obj["elem_bytes"], f"{where}.elem_bytes", minimum=1)
    if elem_bytes not in (1, 2, 4):
        raise ValidationError(f"{where}.elem_bytes: must be 1, 2 or 4")
    factor = obj.get("act_workspace_factor", 2.0)
    return ModelProfile(
        total_blocks=_integer(obj["total_blocks"], f"{where}.total_blocks", 1),
        hidden_dim=_integer(obj["hidden_dim"], f"{where}.hidden_dim", 1),
        elem_bytes=elem_bytes,
        seq_len=_integer(obj["seq_len"], f"{where}.seq_len", 1),
        weight_bytes_per_block=_integer(
            obj["weight_bytes_per_block"], f"{where}.weight_bytes_per_block", 1
        ),
        kv_bytes_per_block_per_token=_integer(
            obj["kv_bytes_per_block_per_token"],
            f"{where}.kv_bytes_per_block_per_token",
            1,
        ),
        act_workspace_factor=float(
            _number(factor, f"{where}.act_workspace_factor", positive=True)
        ),
    )


def _validate(spec: ClusterSpec) -> None:
    """Cross-field invariants: unique ids, consistent tables, adjacent links."""
    if not spec.nodes:
        raise ValidationError("nodes: at least one node is required")

    ids = [node.node_id for node in spec.nodes]
    seen = set()
    for node_id in ids:
        if node_id in seen:
            raise ValidationError(f"nodes: duplicate node_id {node_id!r}")
        seen.add(node_id)

    for i, node in enumerate(spec.nodes):
        keys = set(node.t_mlp)
        if set(node.t_attn_gpu) != keys or set(node.t_attn_cpu) != keys:
            raise ValidationError(
                f"nodes[{i}]: latency tables must share micro-batch sizes"
            )

    pairs = set()
    for i, ln in enumerate(spec.links):
        for end in (ln.from_, ln.to_):
            if end not in seen:
                raise ValidationError(f"links[{i}]: unknown node {end!r}")
        if (ln.from_, ln.to_) in pairs:
            raise ValidationError(f"links[{i}]: duplicate link {ln.from_}->{ln.to_}")
        pairs.add((ln.from_, ln.to_))

    for src, dst in zip(ids, ids[1:]):
        if (src, dst) not in pairs:
            raise ValidationError(f"links: missing link {src}->{dst}")


def _emit_table(table: LatencyTable) -> Dict[str, float]:
    return {str(b): ms for b, ms in sorted(table.items())}


def _emit_node(node: NodeProfile) -> Dict[str, Any]:
    out: Dict[str, Any] = {
        "node_id": node.node_id,
        "gpu_mem": node.gpu_mem,
        "host_mem": node.host_mem,
        "t_mlp": _emit_table(node.t_mlp),
        "t_attn_gpu": _emit_table(node.t_attn_gpu),
        "t_attn_cpu": _emit_table(node.t_attn_cpu),
    }
    if node.pcie_bw is not None:
        out["pcie_bw"] = node.pcie_bw
    return out


def _emit_model(model: ModelProfile) -> Dict[str, Any]:
    return {
        "total_blocks": model.total_blocks,
        "hidden_dim": model.hidden_dim,
        "elem_bytes": model.elem_bytes,
        "seq_len": model.seq_len,
        "weight_bytes_per_block": model.weight_bytes_per_block,
        "kv_bytes_per_block_per_token": model.kv_bytes_per_block_per_token,
        "act_workspace_factor": model.act_workspace_factor,
    }
