"""Settings files and logging setup."""

import logging
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, Iterator, Mapping, Optional, Tuple

try:
    import tomllib
except ImportError:
    import tomli as tomllib  # type:ignore

from .codec import BACKENDS
from .cost import CommMode, CostSettings
from .errors import ParseError, ValidationError
from .planner import DEFAULT_BATCH_SET, Candidates

LOG_ENV = "BEEPLAN_LOG"
LOG_LEVELS = {
    "error": logging.ERROR,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


@dataclass(frozen=True)
class PlannerSettings:
    batch_set: Tuple[int, ...] = DEFAULT_BATCH_SET
    max_micro_batches: int = 16
    comm_mode: str = CommMode.MICRO_BATCH.value
    compression_ratio: float = 0.75


@dataclass(frozen=True)
class CostModelSettings:
    codec_ms_per_mb: float = 0.0


@dataclass(frozen=True)
class SimSettings:
    slots: int = 2
    step_barrier: bool = True


@dataclass(frozen=True)
class CodecSettings:
    backend: str = "zstd"


@dataclass(frozen=True)
class Settings:
    """Everything a `--config` file can set. Every section is optional."""

    planner: PlannerSettings = field(default_factory=PlannerSettings)
    cost: CostModelSettings = field(default_factory=CostModelSettings)
    sim: SimSettings = field(default_factory=SimSettings)
    codec: CodecSettings = field(default_factory=CodecSettings)

    def cost_settings(self) -> CostSettings:
        return CostSettings(
            compression_ratio=self.planner.compression_ratio,
            codec_ms_per_mb=self.cost.codec_ms_per_mb,
            comm_mode=CommMode(self.planner.comm_mode),
        )

    def candidates(self) -> Candidates:
        return Candidates(
            batch_sizes=self.planner.batch_set,
            max_micro_batches=self.planner.max_micro_batches,
        )

    def with_batch_set(self, batch_set: Tuple[int, ...]) -> "Settings":
        return replace(self, planner=replace(self.planner, batch_set=batch_set))


def _check_type(value: Any, expected: Any, where: str) -> None:
    if expected is bool:
        ok = isinstance(value, bool)
    elif expected is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif expected is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, expected)
    if not ok:
        raise ValidationError(f"{where}: expected {expected.__name__}")


def _section(cls: Any, table: Any, name: str) -> Any:
    if not isinstance(table, dict):
        raise ValidationError(f"[{name}]: expected a table")
    defaults = cls()
    known = {f.name for f in fields(cls)}
    values: Dict[str, Any] = {}
    for key, value in table.items():
        where = f"{name}.{key}"
        if key not in known:
            raise ValidationError(f"{where}: unknown key")
        default = getattr(defaults, key)
        if isinstance(default, tuple):
            if not isinstance(value, list) or not value:
                raise ValidationError(f"{where}: expected a non-empty array")
            for v in value:
                _check_type(v, int, where)
                if v < 1:
                    raise ValidationError(f"{where}: entries must be >= 1")
            value = tuple(value)
        else:
            _check_type(value, type(default), where)
        values[key] = value
    return cls(**values)


SECTIONS = {
    "planner": PlannerSettings,
    "cost": CostModelSettings,
    "sim": SimSettings,
    "codec": CodecSettings,
}


def parse_settings(text: str) -> Settings:
    """Read a settings TOML document."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"invalid TOML: {exc}") from exc
    sections = {}
    for name, table in doc.items():
        if name not in SECTIONS:
            raise ValidationError(f"[{name}]: unknown section")
        sections[name] = _section(SECTIONS[name], table, name)
    settings = Settings(**sections)

    p = settings.planner
    if p.comm_mode not in {m.value for m in CommMode}:
        raise ValidationError(f"planner.comm_mode: unknown mode {p.comm_mode!r}")
    if not 0 < p.compression_ratio <= 1:
        raise ValidationError("planner.compression_ratio: must be in (0, 1]")
    if p.max_micro_batches < 1:
        raise ValidationError("planner.max_micro_batches: must be >= 1")
    if settings.cost.codec_ms_per_mb < 0:
        raise ValidationError("cost.codec_ms_per_mb: must be >= 0")
    if settings.sim.slots < 1:
        raise ValidationError("sim.slots: must be >= 1")
    backend = settings.codec.backend
    if backend not in BACKENDS:
        raise ValidationError(f"codec.backend: unknown backend {backend!r}")
    return settings


def load_settings(path: str) -> Settings:
    with open(path, "r", encoding="utf-8") as f:
        return parse_settings(f.read())


def log_level(env: Optional[Mapping[str, str]] = None) -> int:
    """The level named by `BEEPLAN_LOG`; ERROR when unset."""
    env = os.environ if env is None else env
    name = env.get(LOG_ENV, "error").lower()
    if name not in LOG_LEVELS:
        raise ValueError(
            f"{LOG_ENV} must be one of {', '.join(LOG_LEVELS)}, not {name!r}"
        )
    return LOG_LEVELS[name]


def setup_logging(level: int) -> None:
    logger = logging.getLogger("beeplan")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(name)s: %(message)s"))
    logger.addHandler(handler)
    logger.setLevel(level)


@contextmanager
def logtime(log: logging.Logger, what: str) -> Iterator[None]:
    start = time.time()
    yield
    dur = time.time() - start
    log.info("%s done in %.1f seconds", what, dur)
