"""Contiguous layer assignment and the search over batch size, micro-batch
count, and compression.

A plan gives every node a (possibly empty) run of consecutive blocks. Nodes
with no blocks are skipped entirely: they compute nothing and the hop around
them is charged at the cost of the bypass link.
"""

import itertools
import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cluster import ClusterSpec, LinkProfile
from .cost import (
    CostSettings,
    Infeasible,
    StageCost,
    blend_block,
    block_latencies,
    comm_time,
    derive_offload_ratio,
    stage_cost,
)
from .errors import (
    InfeasiblePlan,
    NoFeasiblePlan,
    ParseError,
    TooLarge,
    ValidationError,
)

log = logging.getLogger(__name__)

MAX_COMPOSITIONS = 1_000_000
DEFAULT_BATCH_SET = (1, 2, 4, 8, 16, 32, 64, 128)


class Objective(Enum):
    SUM_OF_STAGES = "sum"
    """Every stage and hop in sequence: one batch, no overlap."""

    BOTTLENECK_CYCLE = "cycle"
    """Micro-batches overlap; the slowest compute or hop sets the pace, plus
    pipeline fill and drain."""


@dataclass
class Plan:
    """A complete pipeline configuration and its predicted performance."""

    layers: List[int]
    """Blocks per node, in pipeline order. Zero means the node is skipped."""

    alphas: List[float]
    """KV offload fraction per node; zero for skipped nodes."""

    B: int
    M: int
    compression: bool
    objective: Objective

    predicted_throughput: float
    """Generated tokens per second."""

    predicted_step_time: float
    """Milliseconds to generate one token for the whole batch."""

    sd: bool = False
    """Advisory: whether speculative decoding should be enabled."""

    def to_json(self) -> Dict[str, Any]:
        return {
            "layers": list(self.layers),
            "alphas": list(self.alphas),
            "B": self.B,
            "M": self.M,
            "compression": self.compression,
            "objective": self.objective.value,
            "predicted_throughput": self.predicted_throughput,
            "predicted_step_time": self.predicted_step_time,
            "sd": self.sd,
        }

    def emit(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    @classmethod
    def parse(cls, text: str) -> "Plan":
        """Read a plan printed by `beeplan plan`."""
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ParseError("plan document must be a JSON object")

        for key in doc:
            if key not in PLAN_KEYS:
                raise ValidationError(f"{key}: unknown field")
        for key in PLAN_KEYS:
            if key not in doc:
                raise ValidationError(f"{key}: missing field")

        try:
            objective = Objective(doc["objective"])
        except ValueError:
            raise ValidationError(f"objective: unknown objective {doc['objective']!r}")
        layers = doc["layers"]
        alphas = doc["alphas"]
        if not isinstance(layers, list) or not all(
            isinstance(n, int) and not isinstance(n, bool) and n >= 0 for n in layers
        ):
            raise ValidationError("layers: expected an array of non-negative integers")
        if not isinstance(alphas, list) or len(alphas) != len(layers):
            raise ValidationError("alphas: expected one fraction per node")
        B, M = doc["B"], doc["M"]
        if not isinstance(B, int) or not isinstance(M, int) or M < 1 or B % M:
            raise ValidationError("M: must be a positive divisor of B")
        return cls(
            layers=layers,
            alphas=[float(a) for a in alphas],
            B=B,
            M=M,
            compression=bool(doc["compression"]),
            objective=objective,
            predicted_throughput=float(doc["predicted_throughput"]),
            predicted_step_time=float(doc["predicted_step_time"]),
            sd=bool(doc["sd"]),
        )


PLAN_KEYS = (
    "layers",
    "alphas",
    "B",
    "M",
    "compression",
    "objective",
    "predicted_throughput",
    "predicted_step_time",
    "sd",
)


@dataclass
class SolverStats:
    combine_steps: int = 0
    """(state, last-stage size) pairs evaluated by the dynamic program."""

    table_cells: int = 0


def throughput(B: int, step_ms: float) -> float:
    """Tokens per second. Each step of `step_ms` milliseconds yields one
    token for each of `B` requests, so this is B / (step_ms / 1000): the
    step time in seconds, not milliseconds, divides the batch."""
    return B * 1000 / step_ms


def bypass_link(spec: ClusterSpec, src: int, dst: int) -> LinkProfile:
    """The link a transfer from node `src` to node `dst` travels over.

    Neighbors use their own link. Otherwise an explicit `src -> dst` link
    wins; failing that, the chain through the skipped nodes is treated as one
    link with the summed latency and the narrowest bandwidth.
    """
    assert 0 <= src < dst < spec.n
    a, b = spec.nodes[src].node_id, spec.nodes[dst].node_id
    direct = spec.link(a, b)
    if direct is not None:
        return direct
    chain = [
        spec.link(spec.nodes[k].node_id, spec.nodes[k + 1].node_id)
        for k in range(src, dst)
    ]
    assert all(ln is not None for ln in chain)
    return LinkProfile(
        from_=a,
        to_=b,
        latency=sum(ln.latency for ln in chain),  # type: ignore
        bandwidth=min(ln.bandwidth for ln in chain),  # type: ignore
    )


def _compressing(compression: bool, settings: CostSettings) -> bool:
    return compression and settings.compression_ratio < 1


def stage_costs(
    plan: Plan, spec: ClusterSpec, settings: CostSettings = CostSettings()
) -> List[StageCost]:
    """Costs of the active stages of `plan`, in pipeline order. Each hop is
    charged to the stage that sends it; the last stage sends nothing."""
    if len(plan.layers) != spec.n:
        raise InfeasiblePlan(f"plan has {len(plan.layers)} nodes, cluster has {spec.n}")
    if sum(plan.layers) != spec.model.total_blocks:
        raise InfeasiblePlan(
            f"plan places {sum(plan.layers)} blocks, "
            f"model has {spec.model.total_blocks}"
        )
    if plan.M < 1 or plan.B % plan.M:
        raise InfeasiblePlan(f"M={plan.M} does not divide B={plan.B}")

    ratio = settings.compression_ratio if plan.compression else 1.0
    b = plan.B // plan.M
    active = [i for i, n in enumerate(plan.layers) if n > 0]
    costs = []
    for pos, i in enumerate(active):
        link = bypass_link(spec, i, active[pos + 1]) if pos + 1 < len(active) else None
        alpha = derive_offload_ratio(
            spec.nodes[i], spec.model, plan.layers[i], plan.B, b
        )
        cost = stage_cost(
            spec.nodes[i],
            link,
            plan.layers[i],
            alpha,
            plan.B,
            plan.M,
            ratio,
            spec.model,
            settings,
        )
        if not cost.feasible:
            assert cost.infeasible is not None
            raise InfeasiblePlan(cost.infeasible.detail)
        costs.append(cost)
    return costs


def _step_time(costs: Sequence[StageCost], M: int, objective: Objective) -> float:
    # Accumulate in the same order as the dynamic program so the two agree
    # to the last bit.
    if objective is Objective.SUM_OF_STAGES:
        total = costs[0].t_comp
        for prev, cur in zip(costs, costs[1:]):
            total = total + prev.t_comm + cur.t_comp
        return M * total
    cycle = costs[0].t_comp
    for prev, cur in zip(costs, costs[1:]):
        cycle = max(cycle, prev.t_comm, cur.t_comp)
    return (M + len(costs) - 1) * cycle


def pipeline_time(
    plan: Plan, spec: ClusterSpec, settings: CostSettings = CostSettings()
) -> float:
    """Milliseconds for one token step of `plan` under its objective."""
    return _step_time(stage_costs(plan, spec, settings), plan.M, plan.objective)


class _Tables:
    """Per-node compute and per-pair hop costs for one (B, M, compression)."""

    def __init__(
        self,
        spec: ClusterSpec,
        B: int,
        M: int,
        compression: bool,
        settings: CostSettings,
    ):
        assert B >= 1 and M >= 1 and B % M == 0
        N, L = spec.n, spec.model.total_blocks
        b = B // M
        self.comp = np.full((N, L + 1), math.inf)
        self.alpha = np.zeros((N, L + 1))
        for i, node in enumerate(spec.nodes):
            lat = block_latencies(node, b)
            for ell in range(1, L + 1):
                alpha = derive_offload_ratio(node, spec.model, ell, B, b)
                if isinstance(alpha, Infeasible):
                    # More blocks only need more memory.
                    break
                self.comp[i, ell] = ell * blend_block(lat, alpha)
                self.alpha[i, ell] = alpha

        compress = _compressing(compression, settings)
        self.hop = np.full((N, N), math.inf)
        for p in range(N):
            for i in range(p + 1, N):
                link = bypass_link(spec, p, i)
                self.hop[p, i] = comm_time(link, spec.model, B, M, compress, settings)


def _final(value: float, M: int, k: int, objective: Objective) -> float:
    if objective is Objective.SUM_OF_STAGES:
        return M * value
    return (M + k - 1) * value


def solve_with_stats(
    spec: ClusterSpec,
    B: int,
    M: int,
    objective: Objective,
    compression: bool = False,
    settings: CostSettings = CostSettings(),
) -> Tuple[Plan, SolverStats]:
    """Optimal contiguous layer assignment by dynamic programming.

    D[i, k, j] is the best partial cost of placing `j` blocks on a chain of
    active nodes that ends at node `i`. A partial cost excludes the hop out
    of node `i`. The hop into `i` depends on which node was active before
    it, so each step first takes the best predecessor `p` for every chain
    (E[i, k, j], the chain extended by the hop p -> i) and then combines E
    with the compute of `ell` blocks on `i`: by addition for the sum
    objective, by max for the cycle objective.

    The cycle objective pays (M + k - 1) cycles, so it keeps the active
    count `k` in the state. The sum objective does not depend on `k` and
    keeps a single chain per (i, j).
    """
    N, L = spec.n, spec.model.total_blocks
    tables = _Tables(spec, B, M, compression, settings)
    comp = tables.comp
    cycle = objective is Objective.BOTTLENECK_CYCLE
    K = N if cycle else 1
    stats = SolverStats(table_cells=N * K * (L + 1))

    # The extra column L + 1 is always infinite; invalid lookups point there.
    D = np.full((N, K + 1, L + 2), math.inf)
    arg_p = np.full((N, K + 1, L + 1), -1, dtype=np.int64)
    arg_l = np.zeros((N, K + 1, L + 1), dtype=np.int64)

    js = np.arange(L + 1)
    ells = np.arange(L + 1)
    src = js[:, None] - ells[None, :]
    valid = (ells[None, :] >= 1) & (src >= 0)
    src = np.where(valid, src, L + 1)
    pairs = int(valid.sum())

    for i in range(N):
        D[i, 1, 1 : L + 1] = comp[i, 1:]
        arg_l[i, 1, :] = js
        stats.combine_steps += L

    for i in range(1, N):
        # Chains ending before i, with 1 .. i active nodes for the cycle
        # objective.
        before = slice(1, i + 1) if cycle else slice(1, 2)
        after = slice(2, i + 2) if cycle else slice(1, 2)
        prev = D[:i, before, : L + 1]
        hop = tables.hop[:i, i][:, None, None]
        via = np.maximum(prev, hop) if cycle else prev + hop
        best_p = np.argmin(via, axis=0)
        E = np.take_along_axis(via, best_p[None], axis=0)[0]
        E = np.concatenate([E, np.full((E.shape[0], 1), math.inf)], axis=1)

        # comp[i, 0] is infinite, so ell = 0 never wins.
        comp_i = comp[i]
        if cycle:
            cand = np.maximum(E[:, src], comp_i)
        else:
            cand = E[:, src] + comp_i
        best_l = np.argmin(cand, axis=2)
        best = np.take_along_axis(cand, best_l[..., None], axis=2)[..., 0]
        from_j = np.clip(js[None, :] - best_l, 0, L)
        from_p = np.take_along_axis(best_p, from_j, axis=1)

        cur = D[i, after, : L + 1]
        better = best < cur
        cur[better] = best[better]
        arg_p[i, after][better] = from_p[better]
        arg_l[i, after][better] = best_l[better]
        stats.combine_steps += E.shape[0] * pairs

    log.debug(
        "dp for B=%d M=%d: %d nodes, %d blocks, %d combine steps",
        B,
        M,
        N,
        L,
        stats.combine_steps,
    )

    best_val, best_i, best_k = math.inf, -1, -1
    for i in range(N):
        for k in range(1, min(i + 1, K) + 1):
            val = _final(float(D[i, k, L]), M, k, objective)
            if val < best_val:
                best_val, best_i, best_k = val, i, k
    if math.isinf(best_val):
        raise NoFeasiblePlan(
            f"no assignment of {L} blocks fits in memory at B={B}, M={M}"
        )

    layers = [0] * N
    i, k, j = best_i, best_k, L
    while True:
        ell = int(arg_l[i, k, j])
        layers[i] = ell
        p = int(arg_p[i, k, j])
        if p < 0:
            break
        i, j = p, j - ell
        if cycle:
            k -= 1
    assert sum(layers) == L

    alphas = [float(tables.alpha[i, n]) if n else 0.0 for i, n in enumerate(layers)]
    plan = Plan(
        layers=layers,
        alphas=alphas,
        B=B,
        M=M,
        compression=compression,
        objective=objective,
        predicted_throughput=throughput(B, best_val),
        predicted_step_time=best_val,
    )
    return plan, stats


def solve_layer_assignment(
    spec: ClusterSpec,
    B: int,
    M: int,
    objective: Objective,
    compression: bool = False,
    settings: CostSettings = CostSettings(),
) -> Plan:
    return solve_with_stats(spec, B, M, objective, compression, settings)[0]


def compositions(total: int, parts: int):
    """Every way to write `total` as an ordered sum of `parts` non-negative
    integers (stars and bars)."""
    for bars in itertools.combinations(range(total + parts - 1), parts - 1):
        prev = -1
        out = []
        for bar in bars:
            out.append(bar - prev - 1)
            prev = bar
        out.append(total + parts - 2 - prev)
        yield out


def brute_force_assignment(
    spec: ClusterSpec,
    B: int,
    M: int,
    objective: Objective,
    compression: bool = False,
    settings: CostSettings = CostSettings(),
) -> Plan:
    """Exhaustive search over every composition. Slow; for checking the
    dynamic program."""
    N, L = spec.n, spec.model.total_blocks
    count = math.comb(L + N - 1, N - 1)
    if count > MAX_COMPOSITIONS:
        raise TooLarge(f"{count} compositions of {L} blocks over {N} nodes")

    best: Optional[Plan] = None
    for layers in compositions(L, N):
        candidate = Plan(layers, [0.0] * N, B, M, compression, objective, 0.0, 0.0)
        try:
            costs = stage_costs(candidate, spec, settings)
        except InfeasiblePlan:
            continue
        value = _step_time(costs, M, objective)
        if best is None or value < best.predicted_step_time:
            active = iter(costs)
            candidate.alphas = [next(active).alpha if n else 0.0 for n in layers]
            candidate.predicted_step_time = value
            candidate.predicted_throughput = throughput(B, value)
            best = candidate
    if best is None:
        raise NoFeasiblePlan(
            f"no assignment of {L} blocks fits in memory at B={B}, M={M}"
        )
    return best


Solver = Callable[..., Plan]


@dataclass(frozen=True)
class Candidates:
    """The configurations `enumerate_plans` searches over."""

    batch_sizes: Tuple[int, ...] = DEFAULT_BATCH_SET
    max_micro_batches: int = 16
    """M ranges over the divisors of B up to this bound."""

    compression: Tuple[bool, ...] = (False, True)

    objective: Optional[Objective] = None
    """Force one objective. By default M = 1 uses the sum of stages and
    M > 1 the bottleneck cycle."""

    def micro_batches(self, B: int) -> List[int]:
        return [m for m in range(1, min(B, self.max_micro_batches) + 1) if B % m == 0]

    def configurations(self) -> List[Tuple[int, int, bool]]:
        return [
            (B, M, comp)
            for B in self.batch_sizes
            for M in self.micro_batches(B)
            for comp in self.compression
        ]


def _rank(plan: Plan) -> Tuple[float, int, int, bool]:
    return (-plan.predicted_throughput, plan.M, plan.B, plan.compression)


def enumerate_plans(
    spec: ClusterSpec,
    candidates: Candidates = Candidates(),
    settings: CostSettings = CostSettings(),
    solver: Solver = solve_layer_assignment,
) -> Plan:
    """The highest-throughput plan over every candidate batch size, micro-batch
    count, and compression setting. Ties go to fewer micro-batches, then the
    smaller batch, then no compression."""
    assert candidates.batch_sizes, "empty batch-size set"
    plans: List[Plan] = []
    for B, M, comp in candidates.configurations():
        objective = candidates.objective or (
            Objective.SUM_OF_STAGES if M == 1 else Objective.BOTTLENECK_CYCLE
        )
        try:
            plan = solver(spec, B, M, objective, comp, settings)
        except NoFeasiblePlan:
            log.debug("B=%d M=%d compression=%s: infeasible", B, M, comp)
            continue
        log.debug(
            "B=%d M=%d compression=%s: %s %.6g ms, %.6g tok/s",
            B,
            M,
            comp,
            plan.layers,
            plan.predicted_step_time,
            plan.predicted_throughput,
        )
        plans.append(plan)
    if not plans:
        raise NoFeasiblePlan("no candidate configuration fits in memory")
    return min(plans, key=_rank)
