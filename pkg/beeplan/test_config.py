import logging

import pytest

from beeplan.config import (
    LOG_ENV,
    Settings,
    load_settings,
    log_level,
    logtime,
    parse_settings,
    setup_logging,
)
from beeplan.cost import CommMode
from beeplan.errors import ParseError, ValidationError

FULL = """
[planner]
batch_set = [4, 8]
max_micro_batches = 4
comm_mode = "batch"
compression_ratio = 0.5

[cost]
codec_ms_per_mb = 8

[sim]
slots = 3
step_barrier = false

[codec]
backend = "zlib"
"""


def test_empty_file_is_defaults():
    assert parse_settings("") == Settings()


def test_every_section():
    s = parse_settings(FULL)
    assert s.planner.batch_set == (4, 8)
    assert s.sim.slots == 3 and not s.sim.step_barrier
    assert s.codec.backend == "zlib"

    cost = s.cost_settings()
    assert cost.compression_ratio == 0.5
    assert cost.codec_ms_per_mb == 8
    assert cost.comm_mode is CommMode.WHOLE_BATCH

    candidates = s.candidates()
    assert candidates.batch_sizes == (4, 8)
    assert candidates.micro_batches(8) == [1, 2, 4]


def test_batch_set_override():
    s = parse_settings(FULL).with_batch_set((16,))
    assert s.candidates().batch_sizes == (16,)
    assert s.sim.slots == 3


@pytest.mark.parametrize(
    "text, message",
    [
        ("[network]\nx = 1", "unknown section"),
        ("[planner]\nbatch = [1]", "planner.batch: unknown key"),
        ("[planner]\nbatch_set = []", "non-empty array"),
        ("[planner]\nbatch_set = [0]", "entries must be >= 1"),
        ("[planner]\nbatch_set = [1.5]", "expected int"),
        ("[planner]\ncomm_mode = 'sometimes'", "unknown mode"),
        ("[planner]\ncompression_ratio = 0", "compression_ratio"),
        ("[planner]\nmax_micro_batches = 0", "max_micro_batches"),
        ("[cost]\ncodec_ms_per_mb = -1", "codec_ms_per_mb"),
        ("[sim]\nslots = 0", "sim.slots"),
        ("[sim]\nstep_barrier = 1", "expected bool"),
        ("[codec]\nbackend = 'lz4'", "unknown backend"),
        ("planner = 3", "expected a table"),
    ],
)
def test_invalid_settings(text, message):
    with pytest.raises(ValidationError, match=message):
        parse_settings(text)


def test_bad_toml():
    with pytest.raises(ParseError):
        parse_settings("[planner\n")


def test_load_settings(tmp_path):
    path = tmp_path / "beeplan.toml"
    path.write_text(FULL)
    assert load_settings(str(path)) == parse_settings(FULL)


def test_log_level():
    assert log_level({}) == logging.ERROR
    assert log_level({LOG_ENV: "debug"}) == logging.DEBUG
    assert log_level({LOG_ENV: "INFO"}) == logging.INFO
    with pytest.raises(ValueError, match=LOG_ENV):
        log_level({LOG_ENV: "chatty"})


def test_logging_goes_to_stderr(capsys):
    setup_logging(logging.INFO)
    setup_logging(logging.INFO)
    log = logging.getLogger("beeplan.test")
    with logtime(log, "nothing"):
        pass
    err = capsys.readouterr().err
    # Setting up twice does not duplicate the handler.
    assert err.count("beeplan.test: nothing done in") == 1
