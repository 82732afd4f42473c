import argparse
import json
import logging
import sys
from dataclasses import replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from . import codec, config, planner, sdmodel, sim, sweep, wire
from .cluster import load_cluster_spec
from .errors import BeeplanError

log = logging.getLogger("beeplan")


def _positive_ints(text: str) -> Tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers like 1,2,4, got {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("batch sizes must be positive")
    return values


def _bandwidth_sweep(text: str) -> Tuple[float, float, int]:
    try:
        lo, hi, steps = text.split(":")
        bounds = (float(lo), float(hi), int(steps))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI:STEPS, got {text!r}")
    if not 0 < bounds[0] <= bounds[1] or bounds[2] < 1:
        raise argparse.ArgumentTypeError("need 0 < LO <= HI and STEPS >= 1")
    return bounds


def _shape(text: str) -> wire.LinkShape:
    try:
        shape = wire.LinkShape.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))
    if shape.rate <= 0 or shape.latency < 0:
        raise argparse.ArgumentTypeError("rate must be positive, latency >= 0")
    return shape


def _address(text: str) -> wire.Address:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def _environment(text: str) -> sweep.Environment:
    name, _, mbps = text.partition("=")
    try:
        value = float(mbps)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected NAME=MBPS, got {text!r}")
    if not name or value <= 0:
        raise argparse.ArgumentTypeError(f"expected NAME=MBPS, got {text!r}")
    return name, value


def parse_args(
    argv: Optional[Sequence[str]] = None,
) -> Tuple[argparse.ArgumentParser, argparse.Namespace]:
    """Parse command line arguments and run the appropriate subcommand."""
    parser = argparse.ArgumentParser(prog="beeplan")

    subparsers = parser.add_subparsers(
        title="beeplan commands", metavar="COMMAND", dest="command", required=True
    )

    plan_parser = subparsers.add_parser(
        "plan", help="Finds the best pipeline configuration for a cluster."
    )
    plan_parser.add_argument(
        "--spec", required=True, help="Cluster description (JSON).", metavar="FILE"
    )
    plan_parser.add_argument(
        "--objective",
        choices=[o.value for o in planner.Objective],
        help="Force one objective instead of choosing it by micro-batch count.",
    )
    plan_parser.add_argument(
        "--batch-set",
        type=_positive_ints,
        help="Comma-separated batch sizes to consider.",
        metavar="B,B,...",
    )
    plan_parser.add_argument(
        "--oracle",
        action="store_true",
        help="Use exhaustive search instead of the dynamic program.",
    )

    sweep_parser = subparsers.add_parser(
        "sweep", help="Reports the winning technique in each bandwidth environment."
    )
    sweep_parser.add_argument(
        "--spec", required=True, help="Cluster description (JSON).", metavar="FILE"
    )
    sweep_parser.add_argument(
        "--env",
        type=_environment,
        action="append",
        help="An environment as NAME=MBPS. Repeatable; defaults to E2-E5.",
        metavar="NAME=MBPS",
    )
    sweep_parser.add_argument(
        "--batch-set", type=_positive_ints, help="Comma-separated batch sizes."
    )

    simulate_parser = subparsers.add_parser(
        "simulate", help="Runs a plan through the discrete-event simulator."
    )
    simulate_parser.add_argument(
        "--spec", required=True, help="Cluster description (JSON).", metavar="FILE"
    )
    simulate_parser.add_argument(
        "--plan", required=True, help="A plan printed by `plan`.", metavar="FILE"
    )
    simulate_parser.add_argument(
        "--steps", type=int, default=1, help="Decoding steps to simulate."
    )

    sd_parser = subparsers.add_parser(
        "analyze-sd",
        help="Compares speculative and autoregressive decoding latency.",
    )
    sd_parser.add_argument(
        "--params", required=True, help="SD parameters (JSON).", metavar="FILE"
    )
    sd_parser.add_argument(
        "--bandwidth-sweep",
        type=_bandwidth_sweep,
        help="Evaluate at STEPS bandwidths between LO and HI MB/s.",
        metavar="LO:HI:STEPS",
    )
    sd_parser.add_argument(
        "--log", action="store_true", help="Space the sweep logarithmically."
    )

    compress_parser = subparsers.add_parser(
        "compress", help="Compresses a raw FP16 file into a container."
    )
    compress_parser.add_argument(
        "--backend", choices=sorted(codec.BACKENDS), help="Lossless backend."
    )
    compress_parser.add_argument(
        "--no-split", action="store_true", help="Code the stream without lanes."
    )
    compress_parser.add_argument("input", help="Raw FP16 file.", metavar="FILE")

    decompress_parser = subparsers.add_parser(
        "decompress", help="Restores the raw FP16 file from a container."
    )
    decompress_parser.add_argument("input", help="Container file.", metavar="FILE")

    entropy_parser = subparsers.add_parser(
        "entropy", help="Shannon entropy of a file, in bits per byte."
    )
    entropy_parser.add_argument(
        "--report",
        action="store_true",
        help="Print lane entropies and compressed sizes too.",
    )
    entropy_parser.add_argument(
        "--backend", choices=sorted(codec.BACKENDS), help="Backend for --report."
    )
    entropy_parser.add_argument(
        "--timing", action="store_true", help="Time both modes for --report."
    )
    entropy_parser.add_argument("input", help="Raw FP16 file.", metavar="FILE")

    gen_parser = subparsers.add_parser(
        "gen-activations", help="Writes a synthetic FP16 activation file."
    )
    gen_parser.add_argument(
        "--count", type=int, required=True, help="Number of FP16 elements."
    )
    gen_parser.add_argument(
        "--dist", choices=codec.DISTRIBUTIONS, default="gaussian"
    )
    gen_parser.add_argument("--scale", type=float, default=1.0)

    wire_parser = subparsers.add_parser(
        "bench-wire", help="Runs a pipeline over TCP with shaped links."
    )
    wire_parser.add_argument(
        "--role",
        choices=["source", "stage", "sink", "loopback"],
        required=True,
        help="This process's place in the pipeline, or all of it.",
    )
    wire_parser.add_argument(
        "--shape",
        type=_shape,
        default=wire.LinkShape(),
        help="Outgoing link as RATE_MBPS,LATENCY_MS.",
        metavar="MBPS,MS",
    )
    wire_parser.add_argument("--listen", type=_address, metavar="HOST:PORT")
    wire_parser.add_argument("--connect", type=_address, metavar="HOST:PORT")
    wire_parser.add_argument("--batch", type=int, default=4)
    wire_parser.add_argument("--micro-batches", type=int, default=1)
    wire_parser.add_argument("--hidden-dim", type=int, default=4096)
    wire_parser.add_argument("--steps", type=int, default=1)
    wire_parser.add_argument(
        "--compress", action="store_true", help="Compress activations per hop."
    )
    wire_parser.add_argument("--no-split", action="store_true")
    wire_parser.add_argument("--backend", choices=sorted(codec.BACKENDS))
    wire_parser.add_argument(
        "--dist", choices=codec.DISTRIBUTIONS, default="gaussian"
    )
    wire_parser.add_argument(
        "--packed-tree",
        type=int,
        default=0,
        help="Send packed SD batches of up to this many candidates per request.",
        metavar="N",
    )
    wire_parser.add_argument(
        "--stages", type=int, default=1, help="Stages in a loopback run."
    )
    wire_parser.add_argument(
        "--per-block-ms",
        type=float,
        default=0.0,
        help="Synthetic compute per block per request.",
    )
    wire_parser.add_argument("--blocks", type=int, default=1)
    wire_parser.add_argument("--slots", type=int, help="In-flight micro-batches.")

    # Shared arguments come after the command name.
    for subparser in subparsers.choices.values():
        subparser.add_argument(
            "--seed", type=int, default=0, help="Seed for anything random."
        )
        subparser.add_argument(
            "--output", "-o", help="Write here instead of stdout.", metavar="FILE"
        )
        subparser.add_argument("--format", choices=["json"], default="json")
        subparser.add_argument(
            "--config", help="Settings file (TOML).", metavar="FILE"
        )

    args = parser.parse_args(argv)

    if args.command == "simulate" and args.steps < 1:
        parser.error("--steps must be at least 1")
    if args.command == "gen-activations" and args.count < 0:
        parser.error("--count must be non-negative")
    if args.command == "bench-wire":
        _check_wire_args(parser, args)

    return parser, args


def _check_wire_args(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    if args.batch < 1 or args.micro_batches < 1 or args.batch % args.micro_batches:
        parser.error("--micro-batches must divide --batch")
    if args.steps < 1 or args.hidden_dim < 1 or args.stages < 1:
        parser.error("--steps, --hidden-dim and --stages must be positive")
    if args.role in ("stage", "sink") and args.listen is None:
        parser.error(f"--role {args.role} needs --listen")
    if args.role in ("source", "stage") and args.connect is None:
        parser.error(f"--role {args.role} needs --connect")


def _read_text(path: str) -> str:
    with open(path, "r", encoding="utf-8") as f:
        return f.read()


def _read_bytes(path: str) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def _settings(args: argparse.Namespace) -> config.Settings:
    settings = config.load_settings(args.config) if args.config else config.Settings()
    batch_set = vars(args).get("batch_set")
    if batch_set:
        settings = settings.with_batch_set(batch_set)
    return settings


def _plan(args: argparse.Namespace, settings: config.Settings) -> Any:
    spec = load_cluster_spec(_read_text(args.spec))
    candidates = settings.candidates()
    if args.objective:
        candidates = replace(candidates, objective=planner.Objective(args.objective))
    solver = planner.solve_layer_assignment
    if args.oracle:
        solver = planner.brute_force_assignment
    with config.logtime(log, "plan search"):
        plan = planner.enumerate_plans(
            spec, candidates, settings.cost_settings(), solver
        )
    return plan.to_json()


def _sweep(args: argparse.Namespace, settings: config.Settings) -> Any:
    spec = load_cluster_spec(_read_text(args.spec))
    envs = args.env or sweep.ENVIRONMENTS
    regimes = sweep.regime_sweep(
        spec, envs, settings.candidates(), settings.cost_settings()
    )
    return [r.to_json() for r in regimes]


def _simulate(args: argparse.Namespace, settings: config.Settings) -> Any:
    spec = load_cluster_spec(_read_text(args.spec))
    plan = planner.Plan.parse(_read_text(args.plan))
    metrics = sim.simulate(
        plan,
        spec,
        args.steps,
        settings.cost_settings(),
        settings.sim.slots,
        settings.sim.step_barrier,
    )
    return metrics.to_json()


def _analyze_sd(args: argparse.Namespace, settings: config.Settings) -> Any:
    params, levels = sdmodel.load_sd_params(_read_text(args.params))
    bandwidths = None
    if args.bandwidth_sweep:
        lo, hi, steps = args.bandwidth_sweep
        bandwidths = (lo * sdmodel.MB, hi * sdmodel.MB, steps)
    return sdmodel.sd_report(params, levels, bandwidths, args.log)


def _compress(args: argparse.Namespace, settings: config.Settings) -> bytes:
    backend = args.backend or settings.codec.backend
    return codec.compress_bytes(_read_bytes(args.input), backend, not args.no_split)


def _decompress(args: argparse.Namespace, settings: config.Settings) -> bytes:
    return codec.decompress_bytes(_read_bytes(args.input))


def _entropy(args: argparse.Namespace, settings: config.Settings) -> Any:
    data = _read_bytes(args.input)
    if not args.report:
        return codec.entropy(data)
    backend = args.backend or settings.codec.backend
    return codec.analyze(data, backend, args.timing).to_json()


def _gen_activations(args: argparse.Namespace, settings: config.Settings) -> bytes:
    return codec.generate_activations(args.count, args.dist, args.seed, args.scale)


def _bench_wire(args: argparse.Namespace, settings: config.Settings) -> Any:
    cfg = wire.WireConfig(
        batch=args.batch,
        micro_batches=args.micro_batches,
        hidden_dim=args.hidden_dim,
        steps=args.steps,
        compression=args.compress,
        split=not args.no_split,
        backend=args.backend or settings.codec.backend,
        dist=args.dist,
        seed=args.seed,
        packed_tree=args.packed_tree,
    )
    stage = wire.StageConfig(
        per_block_ms=args.per_block_ms,
        blocks=args.blocks,
        slots=args.slots or settings.sim.slots,
    )
    with config.logtime(log, f"bench-wire {args.role}"):
        if args.role == "loopback":
            metrics = wire.run_loopback([stage] * args.stages, cfg, args.shape)
        else:
            metrics = wire.run_wire(
                args.role, cfg, args.shape, args.listen, args.connect, stage
            )
    return metrics.to_json()


Command = Callable[[argparse.Namespace, config.Settings], Any]

COMMANDS: Dict[str, Command] = {
    "plan": _plan,
    "sweep": _sweep,
    "simulate": _simulate,
    "analyze-sd": _analyze_sd,
    "compress": _compress,
    "decompress": _decompress,
    "entropy": _entropy,
    "gen-activations": _gen_activations,
    "bench-wire": _bench_wire,
}


def _write(result: Any, output: Optional[str]) -> None:
    if isinstance(result, bytes):
        if output:
            with open(output, "wb") as f:
                f.write(result)
        else:
            sys.stdout.buffer.write(result)
            sys.stdout.buffer.flush()
        return
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    if output:
        with open(output, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _report_error(exc: BaseException) -> int:
    print(
        json.dumps({"error": type(exc).__name__, "message": str(exc)}),
        file=sys.stderr,
    )
    return 1


def dispatch(args: argparse.Namespace) -> int:
    """Run the subcommand and write its output. Domain errors become one
    JSON line on stderr and exit code 1."""
    try:
        settings = _settings(args)
        result = COMMANDS[args.command](args, settings)
        _write(result, args.output)
    except BeeplanError as exc:
        log.debug("%s failed", args.command, exc_info=True)
        return _report_error(exc)
    except OSError as exc:
        return _report_error(exc)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    """Parse command line arguments and run the appropriate subcommand."""
    try:
        parser, args = parse_args(argv)
        try:
            level = config.log_level()
        except ValueError as exc:
            parser.error(str(exc))
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    config.setup_logging(level)
    return dispatch(args)


if __name__ == "__main__":
    sys.exit(main())
