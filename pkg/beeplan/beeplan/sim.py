"""A deterministic discrete-event simulator of a micro-batched pipeline.

Each stage has a compute lane and a transfer lane. A micro-batch reserves
one of the stage's in-flight slots when its compute starts and gives it back
once its activations have reached the next stage, so compute can run ahead
of the network by at most `slots` micro-batches. The transfer lane first
spends the codec time on the CPU, then sends.

Every compute lane and every transfer lane is a station of its own, so one
step of identical micro-batches takes each lane once plus M - 1 passes of
the slowest lane (`fill_drain_ms`). For equal stages and free hops that is
the planner's (M + N - 1) cycles; in general the two differ by at most
N - 1 cycles.
"""

import heapq
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Deque, Dict, List, Optional, Sequence, Tuple

from .cluster import ClusterSpec
from .cost import MB, CostSettings, hop_payload
from .planner import Plan, stage_costs

log = logging.getLogger(__name__)


class EventKind(Enum):
    COMPUTE_DONE = "ComputeDone"
    CPU_LANE_DONE = "CpuLaneDone"
    TRANSFER_DONE = "TransferDone"


@dataclass(frozen=True)
class SimEvent:
    time: float
    kind: EventKind
    stage: int
    micro_batch: int
    step: int = 0


@dataclass
class RunMetrics:
    """Measurements of one run, simulated or real. Times in milliseconds."""

    throughput: float
    """Tokens per second."""

    completion_ms: float
    stage_busy_ms: List[float]
    stage_idle_ms: List[float]

    hop_transfer_ms: List[float]
    """Mean network time of one frame on each hop."""

    hop_transfer_total_ms: List[float]
    hop_codec_ms: List[float]
    """Total codec time spent on each hop."""

    step_ms: List[float] = field(default_factory=list)
    """Time from the end of one step to the end of the next."""

    extra: Dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> Dict[str, Any]:
        out = {
            "throughput": self.throughput,
            "completion_ms": self.completion_ms,
            "stage_busy_ms": self.stage_busy_ms,
            "stage_idle_ms": self.stage_idle_ms,
            "hop_transfer_ms": self.hop_transfer_ms,
            "hop_transfer_total_ms": self.hop_transfer_total_ms,
            "hop_codec_ms": self.hop_codec_ms,
            "step_ms": self.step_ms,
        }
        out.update(self.extra)
        return out


Item = Tuple[int, int]
# (step, micro-batch index)


class _Stage:
    def __init__(self) -> None:
        self.inbox: Deque[Item] = deque()
        self.outbox: Deque[Item] = deque()
        self.computing = False
        self.transferring = False
        self.slots_used = 0
        self.busy = 0.0
        self.transfer_total = 0.0
        self.codec_total = 0.0
        self.frames = 0


class Simulator:
    def __init__(
        self,
        comp_ms: Sequence[float],
        comm_ms: Sequence[float],
        M: int,
        steps: int = 1,
        slots: int = 2,
        codec_ms: Optional[Sequence[float]] = None,
        step_barrier: bool = True,
    ):
        assert len(comp_ms) == len(comm_ms) and comp_ms
        assert M >= 1 and steps >= 1 and slots >= 1
        self.comp = list(comp_ms)
        self.comm = list(comm_ms)
        self.codec = list(codec_ms) if codec_ms is not None else [0.0] * len(comp_ms)
        assert len(self.codec) == len(self.comp)
        self.M = M
        self.steps = steps
        self.slots = slots
        self.step_barrier = step_barrier

        self.stages = [_Stage() for _ in self.comp]
        self.queue: List[Tuple[float, int, SimEvent]] = []
        self.seq = 0
        self.now = 0.0
        self.events = 0
        self.done_in_step = [0] * steps
        self.step_end: List[float] = []

    @property
    def last(self) -> int:
        return len(self.stages) - 1

    def push(self, delay: float, kind: EventKind, stage: int, item: Item) -> None:
        event = SimEvent(self.now + delay, kind, stage, item[1], item[0])
        heapq.heappush(self.queue, (event.time, self.seq, event))
        self.seq += 1

    def try_compute(self, i: int) -> None:
        st = self.stages[i]
        if st.computing or not st.inbox:
            return
        if i != self.last and st.slots_used >= self.slots:
            return
        item = st.inbox.popleft()
        st.computing = True
        if i != self.last:
            st.slots_used += 1
        self.push(self.comp[i], EventKind.COMPUTE_DONE, i, item)

    def try_transfer(self, i: int) -> None:
        st = self.stages[i]
        if st.transferring or not st.outbox:
            return
        st.transferring = True
        self.push(self.codec[i], EventKind.CPU_LANE_DONE, i, st.outbox.popleft())

    def release(self, step: int) -> None:
        """Put every micro-batch of `step` in front of the first stage."""
        for k in range(self.M):
            self.stages[0].inbox.append((step, k))
        self.try_compute(0)

    def finished(self, item: Item) -> None:
        step, k = item
        self.done_in_step[step] += 1
        if self.done_in_step[step] == self.M:
            self.step_end.append(self.now)
        if step + 1 >= self.steps:
            return
        if self.step_barrier:
            if self.done_in_step[step] == self.M:
                self.release(step + 1)
        else:
            self.stages[0].inbox.append((step + 1, k))
            self.try_compute(0)

    def handle(self, ev: SimEvent) -> None:
        i, item = ev.stage, (ev.step, ev.micro_batch)
        st = self.stages[i]
        if ev.kind is EventKind.COMPUTE_DONE:
            st.computing = False
            st.busy += self.comp[i]
            if i == self.last:
                self.finished(item)
            else:
                st.outbox.append(item)
                self.try_transfer(i)
            self.try_compute(i)
        elif ev.kind is EventKind.CPU_LANE_DONE:
            st.codec_total += self.codec[i]
            self.push(self.comm[i], EventKind.TRANSFER_DONE, i, item)
        else:
            st.transferring = False
            st.slots_used -= 1
            st.transfer_total += self.comm[i]
            st.frames += 1
            self.stages[i + 1].inbox.append(item)
            self.try_compute(i + 1)
            self.try_transfer(i)
            self.try_compute(i)

    def run(self) -> Tuple[float, List[float]]:
        self.release(0)
        while self.queue:
            time, _, ev = heapq.heappop(self.queue)
            assert time >= self.now
            self.now = time
            self.events += 1
            self.handle(ev)
        assert len(self.step_end) == self.steps
        log.debug(
            "simulated %d stages, M=%d, %d steps: %d events",
            len(self.stages),
            self.M,
            self.steps,
            self.events,
        )
        prev, steps = 0.0, []
        for end in self.step_end:
            steps.append(end - prev)
            prev = end
        return self.now, steps


def fill_drain_ms(
    comp_ms: Sequence[float],
    comm_ms: Sequence[float],
    M: int,
    codec_ms: Optional[Sequence[float]] = None,
) -> float:
    """Completion time of one step of `M` micro-batches with at least two
    in-flight slots per stage."""
    codec = codec_ms if codec_ms is not None else [0.0] * len(comp_ms)
    lanes = list(comp_ms) + [t + c for t, c in zip(comm_ms[:-1], codec[:-1])]
    return sum(lanes) + (M - 1) * max(lanes)


def simulate_stages(
    comp_ms: Sequence[float],
    comm_ms: Sequence[float],
    M: int,
    steps: int = 1,
    slots: int = 2,
    codec_ms: Optional[Sequence[float]] = None,
    step_barrier: bool = True,
    batch: Optional[int] = None,
) -> RunMetrics:
    """Simulate stages with the given per-micro-batch costs. The last stage's
    communication time is ignored: it has no next stage.

    `batch` is the number of tokens a step produces (B); it defaults to M.
    """
    sim = Simulator(comp_ms, comm_ms, M, steps, slots, codec_ms, step_barrier)
    completion, step_ms = sim.run()
    hops = sim.stages[:-1]
    tokens = (batch if batch is not None else M) * steps
    return RunMetrics(
        throughput=tokens * 1000 / completion if completion > 0 else float("inf"),
        completion_ms=completion,
        stage_busy_ms=[st.busy for st in sim.stages],
        stage_idle_ms=[completion - st.busy for st in sim.stages],
        hop_transfer_ms=[st.transfer_total / st.frames for st in hops],
        hop_transfer_total_ms=[st.transfer_total for st in hops],
        hop_codec_ms=[st.codec_total for st in hops],
        step_ms=step_ms,
        extra={"events": sim.events},
    )


def simulate(
    plan: Plan,
    spec: ClusterSpec,
    steps: int = 1,
    settings: CostSettings = CostSettings(),
    slots: int = 2,
    step_barrier: bool = True,
) -> RunMetrics:
    """Simulate `plan` on `spec` using the cost model's stage costs. Codec
    time is split out of each hop and charged to the CPU lane."""
    costs = stage_costs(plan, spec, settings)
    codec = 0.0
    if plan.compression and settings.compression_ratio < 1:
        raw = hop_payload(spec.model, plan.B, plan.M, False, settings)
        codec = settings.codec_ms_per_mb * raw / MB
    comp = [c.t_comp for c in costs]
    comm = [c.t_comm - codec for c in costs[:-1]] + [0.0]
    codec_ms = [codec] * (len(costs) - 1) + [0.0]
    return simulate_stages(
        comp, comm, plan.M, steps, slots, codec_ms, step_barrier, batch=plan.B
    )
