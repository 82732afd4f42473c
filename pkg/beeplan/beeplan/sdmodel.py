"""Latency model for speculative decoding over slow links.

Autoregressive decoding pays one pipeline pass per token. Speculation pays
one pass per `a` accepted tokens, but every pass carries `N_tree` candidate
states across every hop. Whether that trade wins depends on bandwidth.

Times are milliseconds, sizes bytes, bandwidths bytes/second.
"""

import json
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ParseError, ValidationError

MB = 1_000_000


@dataclass(frozen=True)
class SdParams:
    L_tokens: int
    """Tokens to generate."""

    D: float
    """Hidden-state payload per token, bytes."""

    S: float
    """Link bandwidth, bytes/second."""

    t_rtt: float
    t_comp: float
    """Per-node compute time of one autoregressive pass."""

    m: float
    """Verification compute relative to an autoregressive pass."""

    c: float
    """Draft model compute per pass."""

    n: int
    """Nodes in the pipeline."""

    N_tree: int
    """Candidate tokens in the draft tree."""

    a: float
    """Mean tokens accepted per verification pass."""

    B: int = 1

    def __post_init__(self) -> None:
        assert self.a >= 1 and self.N_tree >= 1 and self.n >= 1
        assert self.S > 0 and self.m >= 1
        assert min(self.t_rtt, self.t_comp, self.c, self.D) >= 0

    def at_bandwidth(self, S: float) -> "SdParams":
        return replace(self, S=S)

    def at_level(self, N_tree: int, a: float) -> "SdParams":
        return replace(self, N_tree=N_tree, a=a)


def _transfer_ms(payload: float, S: float) -> float:
    return payload / S * 1000


def t_auto(p: SdParams) -> float:
    """Autoregressive decoding time for `L_tokens` tokens."""
    return p.L_tokens * (
        p.n * p.t_comp + p.n * _transfer_ms(p.B * p.D, p.S) + p.n * p.t_rtt
    )


def t_spec(p: SdParams) -> float:
    """Speculative decoding time for `L_tokens` tokens."""
    return (p.L_tokens / p.a) * (
        p.c
        + p.n * p.m * p.t_comp
        + p.n * _transfer_ms(p.B * p.N_tree * p.D, p.S)
        + p.n * p.t_rtt
    )


@dataclass(frozen=True)
class PenaltyTerms:
    """The per-pass, per-node terms of the enable condition. Speculation
    helps exactly when they sum to a negative number."""

    transfer: float
    compute: float
    rtt_saving: float
    draft: float

    @property
    def total(self) -> float:
        return self.transfer + self.compute + self.rtt_saving + self.draft

    @property
    def helps(self) -> bool:
        return self.total < 0


def penalty_terms(p: SdParams, S: Optional[float] = None) -> PenaltyTerms:
    S = p.S if S is None else S
    return PenaltyTerms(
        transfer=p.B * (p.N_tree - p.a) * _transfer_ms(p.D, S),
        compute=(p.m - p.a) * p.t_comp,
        rtt_saving=(1 - p.a) * p.t_rtt,
        draft=p.c / p.n,
    )


def _denominator(p: SdParams) -> float:
    return (p.a - 1) * p.t_rtt + (p.a - p.m) * p.t_comp - p.c / p.n


@dataclass(frozen=True)
class Threshold:
    """Speculation helps above this bandwidth."""

    bandwidth: float


@dataclass(frozen=True)
class HelpsBelow:
    """Speculation helps only below this bandwidth. Happens when fewer
    candidates are sent than are accepted but each pass costs more."""

    bandwidth: float


@dataclass(frozen=True)
class NeverHelps:
    pass


@dataclass(frozen=True)
class AlwaysHelps:
    pass


BreakEven = Union[Threshold, HelpsBelow, NeverHelps, AlwaysHelps]


def break_even_bandwidth(p: SdParams) -> BreakEven:
    """The bandwidth at which speculative and autoregressive decoding take
    the same time."""
    denom = _denominator(p)
    excess = p.N_tree - p.a
    if excess > 0:
        if denom <= 0:
            return NeverHelps()
        return Threshold(p.B * excess * p.D * 1000 / denom)
    if excess == 0:
        return AlwaysHelps() if denom > 0 else NeverHelps()
    if denom >= 0:
        return AlwaysHelps()
    return HelpsBelow(p.B * excess * p.D * 1000 / denom)


def break_even_json(result: BreakEven) -> Dict[str, Any]:
    if isinstance(result, Threshold):
        return {"kind": "threshold", "bytes_per_s": result.bandwidth}
    if isinstance(result, HelpsBelow):
        return {"kind": "helps_below", "bytes_per_s": result.bandwidth}
    if isinstance(result, NeverHelps):
        return {"kind": "never_helps"}
    return {"kind": "always_helps"}


Level = Tuple[int, float]
# A draft tree size and the acceptance it achieves: (N_tree, a).


@dataclass(frozen=True)
class Decision:
    enabled: bool
    level: Optional[int] = None
    """Index into the prune levels; 0 is the unpruned tree."""

    N_tree: Optional[int] = None
    a: Optional[float] = None

    def to_json(self) -> Dict[str, Any]:
        return {
            "enabled": self.enabled,
            "level": self.level,
            "N_tree": self.N_tree,
            "a": self.a,
        }


def decide_sd(
    p: SdParams, measured_S: float, prune_levels: Sequence[Level]
) -> Decision:
    """Pick the least-pruned draft tree that beats autoregressive decoding at
    `measured_S`, or fall back to autoregression."""
    assert prune_levels, "prune_levels must include the unpruned tree"
    assert all(
        prune_levels[i][0] >= prune_levels[i + 1][0]
        for i in range(len(prune_levels) - 1)
    ), "prune_levels must be ordered by decreasing tree size"
    base = p.at_bandwidth(measured_S)
    auto = t_auto(base)
    for idx, (N_tree, a) in enumerate(prune_levels):
        if t_spec(base.at_level(N_tree, a)) < auto:
            return Decision(True, idx, N_tree, a)
    return Decision(False)


@dataclass(frozen=True)
class SweepPoint:
    bandwidth: float
    t_auto: float
    t_spec: float
    decision: Decision

    def to_json(self) -> Dict[str, Any]:
        return {
            "bytes_per_s": self.bandwidth,
            "t_auto": self.t_auto,
            "t_spec": self.t_spec,
            "decision": self.decision.to_json(),
        }


def sweep(
    p: SdParams,
    lo: float,
    hi: float,
    steps: int,
    levels: Sequence[Level],
    log_scale: bool = False,
) -> List[SweepPoint]:
    """Evaluate both decoding modes and the decision at `steps` bandwidths
    between `lo` and `hi`."""
    assert 0 < lo <= hi and steps >= 1
    if log_scale:
        grid = np.geomspace(lo, hi, steps)
    else:
        grid = np.linspace(lo, hi, steps)
    points = []
    for S in grid:
        S = float(S)
        q = p.at_bandwidth(S)
        points.append(SweepPoint(S, t_auto(q), t_spec(q), decide_sd(p, S, levels)))
    return points


PARAM_KEYS = {"L", "D_mb", "S_mbs", "t_rtt", "t_comp", "m", "c", "n", "N", "a", "B"}


def _num(
    doc: Dict[str, Any], key: str, minimum: float = 0.0, strict: bool = False
) -> float:
    value = doc[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"{key}: expected a number")
    if value < minimum or (strict and value == minimum):
        raise ValidationError(f"{key}: must be {'>' if strict else '>='} {minimum}")
    return value


def load_sd_params(text: str) -> Tuple[SdParams, List[Level]]:
    """Read a parameter document. Sizes are in MB and bandwidth in MB/s.

    The returned levels always start with the unpruned tree, followed by the
    document's `prune_levels`.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ParseError("parameter document must be a JSON object")
    for key in doc:
        if key not in PARAM_KEYS and key != "prune_levels":
            raise ValidationError(f"{key}: unknown field")
    for key in PARAM_KEYS:
        if key not in doc:
            raise ValidationError(f"{key}: missing field")

    for key in ("L", "n", "N", "B"):
        if not isinstance(doc[key], int) or isinstance(doc[key], bool):
            raise ValidationError(f"{key}: expected an integer")
    params = SdParams(
        L_tokens=int(_num(doc, "L")),
        D=_num(doc, "D_mb") * MB,
        S=_num(doc, "S_mbs", strict=True) * MB,
        t_rtt=_num(doc, "t_rtt"),
        t_comp=_num(doc, "t_comp"),
        m=_num(doc, "m", 1.0),
        c=_num(doc, "c"),
        n=int(_num(doc, "n", 1)),
        N_tree=int(_num(doc, "N", 1)),
        a=_num(doc, "a", 1.0),
        B=int(_num(doc, "B", 1)),
    )

    levels: List[Level] = [(params.N_tree, params.a)]
    raw = doc.get("prune_levels", [])
    if not isinstance(raw, list):
        raise ValidationError("prune_levels: expected an array")
    for i, entry in enumerate(raw):
        if (
            not isinstance(entry, list)
            or len(entry) != 2
            or not isinstance(entry[0], int)
            or not isinstance(entry[1], (int, float))
            or entry[0] < 1
            or entry[1] < 1
        ):
            raise ValidationError(f"prune_levels[{i}]: expected [N, a] with N, a >= 1")
        if entry[0] > levels[-1][0]:
            raise ValidationError(
                f"prune_levels[{i}]: levels must shrink the tree monotonically"
            )
        levels.append((entry[0], float(entry[1])))
    return params, levels


def sd_report(
    p: SdParams,
    levels: Sequence[Level],
    bandwidths: Optional[Tuple[float, float, int]] = None,
    log_scale: bool = False,
) -> Dict[str, Any]:
    """Everything `beeplan analyze-sd` prints."""
    report: Dict[str, Any] = {
        "t_auto": t_auto(p),
        "t_spec": t_spec(p),
        "break_even": break_even_json(break_even_bandwidth(p)),
        "levels": [
            {
                "N_tree": N_tree,
                "a": a,
                "break_even": break_even_json(
                    break_even_bandwidth(p.at_level(N_tree, a))
                ),
            }
            for N_tree, a in levels
        ],
        "decision": decide_sd(p, p.S, levels).to_json(),
    }
    if bandwidths is not None:
        lo, hi, steps = bandwidths
        report["sweep"] = [
            pt.to_json() for pt in sweep(p, lo, hi, steps, levels, log_scale)
        ]
    return report
