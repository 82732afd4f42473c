"""Which technique wins in which network environment.

Runs the plan search once per bandwidth environment and labels each winner
by the techniques it uses.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Sequence, Tuple

from .cluster import ClusterSpec
from .config import logtime
from .cost import CostSettings
from .planner import Candidates, Plan, enumerate_plans

log = logging.getLogger(__name__)

Environment = Tuple[str, float]
# A name and the bandwidth in Mbps every link gets.

ENVIRONMENTS: Tuple[Environment, ...] = (
    ("E2", 500.0),
    ("E3", 250.0),
    ("E4", 125.0),
    ("E5", 20.0),
)


def technique(plan: Plan) -> str:
    if plan.compression and plan.M > 1:
        return "compression + micro-batching"
    if plan.compression:
        return "compression"
    if plan.M > 1:
        return "micro-batching"
    return "autoregressive"


@dataclass(frozen=True)
class Regime:
    environment: str
    bandwidth_mbps: float
    plan: Plan

    @property
    def technique(self) -> str:
        return technique(self.plan)

    def to_json(self) -> Dict[str, Any]:
        return {
            "environment": self.environment,
            "bandwidth_mbps": self.bandwidth_mbps,
            "technique": self.technique,
            "plan": self.plan.to_json(),
        }


def regime_sweep(
    spec: ClusterSpec,
    environments: Sequence[Environment] = ENVIRONMENTS,
    candidates: Candidates = Candidates(),
    settings: CostSettings = CostSettings(),
) -> List[Regime]:
    out = []
    for name, mbps in environments:
        with logtime(log, f"{name} ({mbps:g} Mbps)"):
            plan = enumerate_plans(spec.with_bandwidth(mbps), candidates, settings)
        log.info("%s: %s, %.1f tok/s", name, technique(plan), plan.predicted_throughput)
        out.append(Regime(name, mbps, plan))
    return out
