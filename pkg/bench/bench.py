try:
    import tomllib
except ImportError:
    import tomli as tomllib  # type:ignore
import os
import subprocess
from shlex import quote
import json
import csv
import argparse
import datetime
import logging
from contextlib import contextmanager
import time
import platform

BASE = os.path.dirname(__file__)
CONFIG_TOML = os.path.join(BASE, "config.toml")
RESULTS_DIR = os.path.join(BASE, "results")
FIELDS = [
    "environment",
    "mbps",
    "technique",
    "throughput",
    "completion_ms",
    "lossless",
    "source",
]


@contextmanager
def logtime(log):
    start = time.time()
    yield
    dur = time.time() - start
    log.info("done in %.1f seconds", dur)


def run_json(cmd):
    """Run a beeplan command line and parse the JSON it prints."""
    proc = subprocess.run(cmd, shell=True, check=True, capture_output=True, text=True)
    return json.loads(proc.stdout)


class Runner:
    def __init__(self, config):
        self.config = config
        self.beeplan = config["tools"]["beeplan"]
        self.environments = config["environments"]

        self.log = logging.getLogger("beeplan-bench")
        self.log.addHandler(logging.StreamHandler())
        self.log.setLevel(logging.DEBUG)

    @classmethod
    def default(cls):
        with open(CONFIG_TOML, "rb") as f:
            config = tomllib.load(f)
        return cls(config)

    def wire(self, techniques):
        """Measure every technique over real shaped links in every
        environment."""
        mode = self.config["modes"]["wire"]
        for env, mbps in self.environments.items():
            for technique in techniques:
                flags = self.config["techniques"][technique]
                cmd = mode["cmd"].format(
                    beeplan=self.beeplan,
                    mbps=mbps,
                    latency_ms=mode["latency_ms"],
                    flags=flags,
                )
                self.log.info("%s at %s Mbps: %s", technique, mbps, env)
                with logtime(self.log):
                    metrics = run_json(cmd)
                yield {
                    "environment": env,
                    "mbps": mbps,
                    "technique": technique,
                    "throughput": metrics["throughput"],
                    "completion_ms": metrics["completion_ms"],
                    "lossless": metrics["lossless"],
                    "source": "wire",
                }

    def regimes(self, techniques):
        """Ask the planner which technique wins in each environment."""
        mode = self.config["modes"]["regimes"]
        envs = " ".join(
            f"--env {quote(f'{name}={mbps}')}"
            for name, mbps in self.environments.items()
        )
        for cluster in mode["clusters"]:
            cmd = mode["cmd"].format(
                beeplan=self.beeplan,
                cluster=quote(os.path.join(BASE, cluster)),
                settings=quote(os.path.join(BASE, mode["settings"])),
            )
            self.log.info("planning regimes for %s", cluster)
            with logtime(self.log):
                regimes = run_json(f"{cmd} {envs}")
            for regime in regimes:
                if techniques and regime["technique"] not in techniques:
                    continue
                plan = regime["plan"]
                yield {
                    "environment": regime["environment"],
                    "mbps": regime["bandwidth_mbps"],
                    "technique": regime["technique"],
                    "throughput": plan["predicted_throughput"],
                    "completion_ms": plan["predicted_step_time"],
                    "lossless": True,
                    "source": os.path.basename(cluster),
                }


def run_bench(mode, techniques, out_csv):
    runner = Runner.default()
    assert mode in runner.config["modes"], f"unknown mode {mode}"

    if techniques:
        for technique in techniques:
            assert (
                technique in runner.config["techniques"]
            ), f"unknown technique {technique}"
    elif mode == "wire":
        techniques = list(runner.config["techniques"].keys())

    runner.log.debug("writing results to %s", out_csv)
    os.makedirs(os.path.dirname(out_csv), exist_ok=True)
    with open(out_csv, "w") as f:
        writer = csv.DictWriter(f, FIELDS)
        writer.writeheader()
        rows = getattr(runner, mode)(techniques)
        for row in rows:
            writer.writerow(row)


def gen_csv_name(mode):
    host = platform.node().split(".")[0]
    ts = datetime.datetime.now().strftime("%Y-%m-%d-%H-%M-%S.%f")
    return os.path.join(RESULTS_DIR, f"{mode}-{host}-{ts}.csv")


def bench_main():
    parser = argparse.ArgumentParser(description="benchmarks for pipeline plans")
    parser.add_argument(
        "--mode",
        "-m",
        help="what to run",
        choices=["wire", "regimes"],
        required=True,
    )
    parser.add_argument(
        "--technique", "-t", help="only this technique", action="append"
    )
    parser.add_argument("--output", "-o", help="output CSV")

    args = parser.parse_args()

    run_bench(
        mode=args.mode,
        techniques=args.technique,
        out_csv=args.output or gen_csv_name(args.mode),
    )


if __name__ == "__main__":
    bench_main()
