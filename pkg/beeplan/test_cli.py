import json

import numpy as np
import pytest

from beeplan.__main__ import main
from beeplan.config import LOG_ENV

NODE = {
    "gpu_mem": 16_000_000_000,
    "host_mem": 64_000_000_000,
    "t_mlp": {"1": 2.0, "4": 5.0},
    "t_attn_gpu": {"1": 0.5, "4": 1.0},
    "t_attn_cpu": {"1": 1.0, "4": 3.0},
}
CLUSTER = {
    "nodes": [dict(NODE, node_id="a"), dict(NODE, node_id="b")],
    "links": [{"from": "a", "to": "b", "latency_ms": 2.0, "bandwidth_mbps": 100}],
    "model": {
        "total_blocks": 6,
        "hidden_dim": 1024,
        "elem_bytes": 2,
        "seq_len": 16,
        "weight_bytes_per_block": 1_000_000,
        "kv_bytes_per_block_per_token": 100,
    },
}
SD_PARAMS = {
    "L": 100,
    "D_mb": 0.016384,
    "S_mbs": 5,
    "t_rtt": 50,
    "t_comp": 10,
    "m": 1.1,
    "c": 5,
    "n": 4,
    "N": 64,
    "a": 4,
    "B": 1,
}


@pytest.fixture
def cluster(tmp_path):
    path = tmp_path / "cluster.json"
    path.write_text(json.dumps(CLUSTER))
    return str(path)


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_plan(capsys, cluster):
    code, out, _ = run(capsys, "plan", "--spec", cluster, "--batch-set", "1,4")
    assert code == 0
    plan = json.loads(out)
    assert sum(plan["layers"]) == 6
    assert plan["B"] in (1, 4)
    assert out.endswith("\n")


def test_plan_oracle_agrees(capsys, cluster):
    _, fast, _ = run(capsys, "plan", "--spec", cluster, "--batch-set", "4")
    _, slow, _ = run(capsys, "plan", "--spec", cluster, "--batch-set", "4", "--oracle")
    fast, slow = json.loads(fast), json.loads(slow)
    for key in ("predicted_step_time", "B", "M", "compression", "objective"):
        assert fast[key] == slow[key]


def test_plan_then_simulate(capsys, cluster, tmp_path):
    plan = str(tmp_path / "plan.json")
    code, out, _ = run(
        capsys,
        "plan",
        "--spec",
        cluster,
        "--batch-set",
        "4",
        "--objective",
        "cycle",
        "-o",
        plan,
    )
    assert code == 0 and out == ""
    code, out, _ = run(capsys, "simulate", "--spec", cluster, "--plan", plan)
    assert code == 0
    metrics = json.loads(out)
    layers = json.loads(open(plan).read())["layers"]
    assert len(metrics["stage_busy_ms"]) == sum(n > 0 for n in layers)
    assert metrics["throughput"] > 0


def test_sweep(capsys, cluster):
    code, out, _ = run(
        capsys,
        "sweep",
        "--spec",
        cluster,
        "--batch-set",
        "4",
        "--env",
        "lan=1000",
        "--env",
        "wan=10",
    )
    assert code == 0
    regimes = json.loads(out)
    assert [r["environment"] for r in regimes] == ["lan", "wan"]


def test_analyze_sd(capsys, tmp_path):
    params = tmp_path / "sd.json"
    params.write_text(json.dumps(SD_PARAMS))
    code, out, _ = run(
        capsys, "analyze-sd", "--params", str(params), "--bandwidth-sweep", "1:10:3"
    )
    assert code == 0
    assert len(json.loads(out)["sweep"]) == 3


def test_codec_round_trip(capsys, tmp_path):
    raw, packed, back = (str(tmp_path / n) for n in ("raw", "packed", "back"))
    assert main(["gen-activations", "--count", "5000", "--seed", "3", "-o", raw]) == 0
    assert main(["compress", "--backend", "zlib", raw, "-o", packed]) == 0
    assert main(["decompress", packed, "-o", back]) == 0
    assert open(back, "rb").read() == open(raw, "rb").read()
    assert len(open(raw, "rb").read()) == 10_000


def test_entropy(capsys, tmp_path):
    zeros = tmp_path / "zeros"
    zeros.write_bytes(bytes(64))
    code, out, _ = run(capsys, "entropy", str(zeros))
    assert (code, out) == (0, "0.0\n")
    code, out, _ = run(capsys, "entropy", "--report", str(zeros))
    assert json.loads(out)["raw_bytes"] == 64


def test_missing_file_is_an_error(capsys, tmp_path):
    code, out, err = run(capsys, "plan", "--spec", str(tmp_path / "nope.json"))
    assert code == 1 and out == ""
    assert json.loads(err)["error"] == "FileNotFoundError"


def test_invalid_cluster(capsys, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(dict(CLUSTER, links=[])))
    code, _, err = run(capsys, "plan", "--spec", str(path))
    assert code == 1
    report = json.loads(err)
    assert report["error"] == "ValidationError"
    assert "missing link a->b" in report["message"]


def test_corrupt_container(capsys, tmp_path):
    junk = tmp_path / "junk"
    junk.write_bytes(b"not a container")
    code, _, err = run(capsys, "decompress", str(junk))
    assert code == 1
    assert json.loads(err)["error"] == "CorruptContainer"


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["plan"],
        ["plan", "--spec", "x.json", "--batch-set", "0"],
        ["sweep", "--spec", "x.json", "--env", "slow"],
        ["simulate", "--spec", "x", "--plan", "y", "--steps", "0"],
        ["analyze-sd", "--params", "x", "--bandwidth-sweep", "5:1:3"],
        ["bench-wire", "--role", "stage", "--connect", "localhost:1"],
        ["bench-wire", "--role", "loopback", "--batch", "4", "--micro-batches", "3"],
        ["bench-wire", "--role", "loopback", "--shape", "fast"],
    ],
)
def test_usage_errors(capsys, argv):
    assert main(argv) == 2


def test_bad_log_level(capsys, cluster, monkeypatch):
    monkeypatch.setenv(LOG_ENV, "chatty")
    code, _, err = run(capsys, "plan", "--spec", cluster)
    assert code == 2
    assert LOG_ENV in err


def test_config_file(capsys, cluster, tmp_path):
    settings = tmp_path / "beeplan.toml"
    settings.write_text("[planner]\nbatch_set = [2]\nmax_micro_batches = 1\n")
    code, out, _ = run(capsys, "plan", "--spec", cluster, "--config", str(settings))
    assert code == 0
    plan = json.loads(out)
    assert (plan["B"], plan["M"]) == (2, 1)

    settings.write_text("[planner]\nbatch_set = 2\n")
    code, _, err = run(capsys, "plan", "--spec", cluster, "--config", str(settings))
    assert code == 1
    assert json.loads(err)["error"] == "ValidationError"


def test_bench_wire_loopback(capsys):
    code, out, _ = run(
        capsys,
        "bench-wire",
        "--role",
        "loopback",
        "--stages",
        "2",
        "--batch",
        "2",
        "--micro-batches",
        "2",
        "--hidden-dim",
        "256",
        "--steps",
        "2",
        "--compress",
    )
    assert code == 0
    metrics = json.loads(out)
    assert metrics["lossless"]
    assert len(metrics["hop_transfer_ms"]) == 3
    assert np.all(np.asarray(metrics["hop_codec_ms"]) > 0)
