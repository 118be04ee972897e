"""Command-line entry point: ``coinfer {gen-data,train,simulate,serve,device}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .core import ConfigError, Scheme, Strategy, SystemConfig
from .profiles import load_scenario


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {value}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def _address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=2))


# --------------------------------------------------------------------------- gen-data

def cmd_gen_data(args) -> int:
    from .dataset import generate_dataset
    manifest = generate_dataset(args.samples, args.seed, args.out, args.schemes_per_config,
                                (1, args.max_devices), (2, args.max_layers))
    _emit(manifest)
    return 0


# --------------------------------------------------------------------------- train

def cmd_train(args) -> int:
    from .dataset import read_dataset
    from .predictor import save_checkpoint, train_relative, train_throughput
    from .samples import make_pairs, split_groups
    if not Path(args.data).exists():
        print(f"error: data file {args.data!r} not found", file=sys.stderr)
        return 1
    samples = read_dataset(args.data)
    train, val = split_groups(samples, 0.7, args.seed)
    if args.head == "throughput":
        model, _ = train_throughput(train, epochs=args.epochs, lr=args.lr, seed=args.seed, hidden=args.hidden,
                                    val_samples=val)
        report = dict(model.metadata.get("validation", {}))
    else:
        model, acc = train_relative(make_pairs(train), epochs=args.epochs, lr=args.lr, seed=args.seed,
                                    hidden=args.hidden, val_pairs=make_pairs(val))
        report = {"accuracy": acc}
    report.update(head=args.head, n_train=len(train), n_val=len(val))
    if args.out:
        save_checkpoint(model, args.out)
        report["checkpoint"] = str(args.out)
    _emit(report)
    return 0


# --------------------------------------------------------------------------- simulate

def _fixed_scheme(text: str, config: SystemConfig) -> Scheme:
    if text == "all-dp":
        return Scheme.uniform(config.client_ids, Strategy.dp())
    if text.startswith("pp:"):
        return Scheme.uniform(config.client_ids, Strategy.parse(text))
    path = Path(text)
    if path.exists():
        body = path.read_text().strip()
        return Scheme.from_dict(json.loads(body)) if body.startswith("{") else Scheme.parse(body)
    return Scheme.parse(text)


def cmd_simulate(args) -> int:
    from .scheduler import SchedulerConfig, oracle_factory, run_adaptive
    from .simulator import SimConfig, Workload, simulate
    config, lut = load_scenario(args.config, args.lut)
    workload = Workload("open", rate_hz=args.rate) if args.rate else Workload()
    sim = SimConfig(config, lut, workload, max_tasks=args.horizon, seed=args.seed)
    if args.scheme == "auto":
        run = run_adaptive(sim, SchedulerConfig(iteration_limit=args.iteration_limit),
                           oracle_factory(seed=args.seed))
        result, timeline, triggers = run.result, run.timeline, run.triggers
    else:
        scheme = _fixed_scheme(args.scheme, config)
        result, timeline, triggers = simulate(sim, scheme), [(0.0, scheme)], []
    out = result.summary()
    out["scheme_log"] = [{"t_ms": t, "scheme": str(s)} for t, s in timeline]
    out["triggers_ms"] = triggers
    if args.csv:
        Path(args.csv).write_text(result.to_csv())
    _emit(out)
    return 0


# --------------------------------------------------------------------------- runtime

def cmd_serve(args) -> int:
    from .runtime.server import EdgeServer, ServerOptions
    from .scheduler import SchedulerConfig, predictor_factory
    import asyncio
    config, lut = load_scenario(args.config, args.lut)
    factory = None
    if args.model:
        from .predictor import load_checkpoint
        factory = predictor_factory(load_checkpoint(args.model))
    host, port = args.listen
    opts = ServerOptions(host, port, args.time_scale, args.max_sessions, args.csv,
                         scheduler=SchedulerConfig(iteration_limit=args.iteration_limit),
                         evaluator_factory=factory, seed=args.seed)
    server = EdgeServer(config, lut, opts)

    def ready(h, p):
        print(f"listening {h} {p}", flush=True)

    try:
        asyncio.run(server.serve(ready))
    except KeyboardInterrupt:
        pass
    received = sum(1 for _ in server.rows)
    summary = {"results": received, "errors": server.errors, "reschedules": len(server.reschedules)}
    print(json.dumps(summary, sort_keys=True), flush=True)
    return 0 if not server.errors else 1


def cmd_device(args) -> int:
    from .runtime.device import DeviceOptions, SessionError, run_device
    if args.tasks == 0:
        return 0
    config, lut = load_scenario(args.config, args.lut)
    host, port = args.connect
    opts = DeviceOptions(host, port, args.device_id, args.tasks, args.window, args.retries,
                         args.retry_delay, args.time_scale, args.csv, args.seed, args.timeout)
    try:
        stats = run_device(config, lut, opts)
    except SessionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    summary = {"device": stats.device_id, "sent": stats.sent, "completed": stats.completed,
               "conserved": stats.conserved, "errors": stats.errors, "updates": stats.updates}
    print(json.dumps(summary, sort_keys=True), flush=True)
    return 0 if stats.conserved else 1


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coinfer", description="Device-edge GNN co-inference toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="simulate a training set")
    g.add_argument("--samples", type=_positive_int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--schemes-per-config", type=_positive_int, default=8)
    g.add_argument("--max-devices", type=_positive_int, default=5)
    g.add_argument("--max-layers", type=int, default=8)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a predictor head")
    t.add_argument("--head", choices=("throughput", "relative"), required=True)
    t.add_argument("--epochs", type=_positive_int, default=None)
    t.add_argument("--lr", type=_positive_float, default=1e-3)
    t.add_argument("--hidden", type=_positive_int, default=64)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--data", required=True)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("simulate", help="simulate a scheme or the adaptive scheduler")
    s.add_argument("--config", required=True, help="config JSON path or fixture:NAME")
    s.add_argument("--lut")
    s.add_argument("--scheme", default="auto", help="auto | all-dp | pp:<s> | scheme file or text")
    s.add_argument("--horizon", type=_positive_int, default=500, help="completed tasks to simulate")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--rate", type=_positive_float, default=None, help="open-loop arrival rate per device (Hz)")
    s.add_argument("--iteration-limit", type=_nonneg_int, default=10)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("serve", help="run the edge server")
    v.add_argument("--listen", type=_address, default=("127.0.0.1", 7788))
    v.add_argument("--config", required=True)
    v.add_argument("--lut")
    v.add_argument("--model", help="relative-head checkpoint used as the scheduler's evaluator")
    v.add_argument("--csv")
    v.add_argument("--max-sessions", type=_positive_int, default=None)
    v.add_argument("--time-scale", type=_positive_float, default=1.0)
    v.add_argument("--iteration-limit", type=_nonneg_int, default=10)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_serve)

    d = sub.add_parser("device", help="run one device client")
    d.add_argument("--connect", type=_address, default=("127.0.0.1", 7788))
    d.add_argument("--config", required=True)
    d.add_argument("--lut")
    d.add_argument("--device-id", required=True)
    d.add_argument("--tasks", type=_nonneg_int, default=100)
    d.add_argument("--window", type=_positive_int, default=32)
    d.add_argument("--retries", type=_nonneg_int, default=3)
    d.add_argument("--retry-delay", type=float, default=0.2)
    d.add_argument("--time-scale", type=_positive_float, default=1.0)
    d.add_argument("--timeout", type=_positive_float, default=120.0)
    d.add_argument("--csv")
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_device)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "epochs", "unset") is None:
        args.epochs = 200 if args.head == "throughput" else 100
    try:
        return args.func(args)
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
