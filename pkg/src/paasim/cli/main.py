"""Command-line entry point.

Every command builds a fresh scenario from its flags and runs it to
completion, so ``(command line, seed)`` determines every table it writes.
``script`` replays a list of steps against one scenario.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import shlex
import sys
from pathlib import Path
from typing import Optional, TextIO

from ..cluster import Cluster, ClusterOptions, Mode, default_pool_config
from ..models import TaskApplicationHandle, mandelbrot_app
from ..provisioning import Algorithm, ProvisioningError
from .config import (
    ParseError,
    ServiceConfig,
    ValidationError,
    default_service_config,
    load_config,
    load_pool_config,
)
from .experiments import UnknownExperiment, Workload, run_experiment

ALGORITHMS = {"fixedqueue": Algorithm.FIXED_QUEUE, "deadline": Algorithm.DEADLINE_PRIORITY}


class ScriptError(ValueError):
    pass


SCRIPT_HELP = """steps, one per line ('#' starts a comment):
  deploy N | scale N | delete | provision fixedqueue|deadline [Q] [BASELINE]
  submit N COST [DEADLINE_MS] | mandelbrot W H TILES MAX_ITER [PPM_FILE]
  run MS | wait | kill INSTANCE_ID | status | accounting"""


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="paasim",
        description="Deterministic simulation of a master/worker application platform on a cloud: "
                    "deploy, scale, crash, bill and run the reference experiments.")
    p.add_argument("--mode", choices=["worker", "cloud"], default="cloud")
    p.add_argument("--workers", type=int, default=None, help="worker count (default: from config)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lan-ms", type=int, default=1)
    p.add_argument("--wan-ms", type=int, default=100)
    p.add_argument("--algorithm", choices=sorted(ALGORITHMS), default=None)
    p.add_argument("--capacity", type=int, default=None)
    p.add_argument("--config", type=Path, default=None, help="service configuration file")
    p.add_argument("--pool", type=Path, default=None, help="resource pool JSON file")
    p.add_argument("--out", type=Path, default=None, help="directory for tables and the trace")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("deploy", help="deploy and report membership")
    s = sub.add_parser("scale", help="deploy, then change the worker count")
    s.add_argument("count", type=int)
    s = sub.add_parser("status", help="deploy, optionally crash workers, report membership")
    s.add_argument("--kill", type=int, default=0, help="crash this many workers first")
    s = sub.add_parser("accounting", help="deploy, run for a while, delete and bill")
    s.add_argument("--minutes", type=float, default=60.0)
    s = sub.add_parser("run-experiment", help="run fig21, fig22, fig23 or fig24")
    s.add_argument("name")
    s.add_argument("--tiles", type=int, default=None)
    s.add_argument("--width", type=int, default=None)
    s.add_argument("--height", type=int, default=None)
    s.add_argument("--max-iter", type=int, default=None)
    s.add_argument("--uniform-cost", type=float, default=None)
    s = sub.add_parser("script", help="replay steps from a file ('-' for stdin)", epilog=SCRIPT_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("path")
    return p


def _service(args) -> ServiceConfig:
    cfg = load_config(args.config) if args.config else default_service_config()
    return cfg.validate(cloud_mode=args.mode == "cloud")


def make_cluster(args, cfg: ServiceConfig) -> Cluster:
    pool = load_pool_config(args.pool) if args.pool else default_pool_config()
    if args.capacity is not None:
        pool = dataclasses.replace(pool, capacity=args.capacity).validate()
    opts = ClusterOptions(mode=Mode.parse(args.mode), seed=args.seed, lan_ms=args.lan_ms,
                          wan_ms=args.wan_ms, shared_key=cfg.shared_key,
                          master_uri=str(cfg.index_server_uri))
    return Cluster(opts, pool)


def _workers(args, cfg: ServiceConfig) -> int:
    return args.workers if args.workers is not None else cfg.worker_count


def _write(out: Optional[Path], name: str, text: str) -> None:
    if out is None:
        return
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def _finish(args, cluster: Cluster, stdout: TextIO) -> None:
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        cluster.network.write_trace(args.out / "trace.jsonl")
        _write(args.out, "status.txt", cluster.status() + "\n")
    stdout.write(f"trace sha256 {cluster.network.trace_digest()}\n")


def _membership_csv(cluster: Cluster) -> str:
    lines = ["node,status,size,executed"]
    for m in cluster.master.status()["members"]:
        lines.append(f"{m['node']},{m['status']},{m['size']},{m['executed']}")
    return "\n".join(lines) + "\n"


def cmd_deploy(args, stdout: TextIO) -> Cluster:
    cfg = _service(args)
    cluster = make_cluster(args, cfg)
    cluster.deploy(_workers(args, cfg))
    if args.algorithm:
        cluster.enable_provisioning(ALGORITHMS[args.algorithm])
    stdout.write(cluster.status() + "\n")
    _write(args.out, "membership.csv", _membership_csv(cluster))
    return cluster


def cmd_scale(args, stdout: TextIO) -> Cluster:
    cfg = _service(args)
    cluster = make_cluster(args, cfg)
    cluster.deploy(_workers(args, cfg))
    cluster.scale(args.count)
    stdout.write(cluster.status() + "\n")
    _write(args.out, "membership.csv", _membership_csv(cluster))
    return cluster


def cmd_status(args, stdout: TextIO) -> Cluster:
    cfg = _service(args)
    cluster = make_cluster(args, cfg)
    cluster.deploy(_workers(args, cfg))
    for iid in sorted(cluster.workers)[:args.kill]:
        cluster.kill_worker(iid)
    if args.kill:
        # long enough for the failure detector to declare the silent nodes dead
        cluster.run_for(cluster.master.dead_timeout + 2 * cluster.master.heartbeat_ms)
    stdout.write(cluster.status() + "\n")
    _write(args.out, "membership.csv", _membership_csv(cluster))
    return cluster


def cmd_accounting(args, stdout: TextIO) -> Cluster:
    cfg = _service(args)
    cluster = make_cluster(args, cfg)
    cluster.deploy(_workers(args, cfg))
    cluster.run_for(int(args.minutes * 60_000))
    cluster.delete()
    table, total = cluster.accounting()
    stdout.write(table + f"total,{total}\n")
    _write(args.out, "accounting.csv", table)
    return cluster


def cmd_run_experiment(args, stdout: TextIO):
    wl = Workload()
    for attr in ("tiles", "width", "height", "max_iter", "uniform_cost"):
        value = getattr(args, attr)
        if value is not None:
            setattr(wl, attr, value)
    kwargs = {"lan_ms": args.lan_ms, "wan_ms": args.wan_ms, "keep_traces": args.out is not None}
    if args.name in ("fig21", "fig22", "fig23"):
        kwargs["workload"] = wl
        if args.workers is not None:
            kwargs["counts"] = list(range(1, args.workers + 1)) if args.name == "fig23" else [args.workers]
    elif args.workers is not None:
        kwargs["workers"] = args.workers
    result = run_experiment(args.name, seed=args.seed, **kwargs)
    stdout.write(result.csv())
    stdout.write(result.summary + "\n")
    _write(args.out, f"{result.name}.csv", result.csv())
    if args.out is not None:
        with open(args.out / "trace.jsonl", "w") as fh:
            for key, lines in result.traces.items():
                for line in lines:
                    fh.write(line + "\n")
    return result


# ─── scripted scenarios ──────────────────────────────────────────────────────




def run_script(args, lines, stdout: TextIO) -> Cluster:
    cfg = _service(args)
    cluster = make_cluster(args, cfg)
    pending = []
    for lineno, raw in enumerate(lines, 1):
        words = shlex.split(raw, comments=True)
        if not words:
            continue
        op, rest = words[0], words[1:]
        try:
            if op == "deploy":
                cluster.deploy(int(rest[0]) if rest else _workers(args, cfg))
            elif op == "scale":
                cluster.scale(int(rest[0]))
            elif op == "delete":
                cluster.delete()
            elif op == "provision":
                q = int(rest[1]) if len(rest) > 1 else 10
                baseline = int(rest[2]) if len(rest) > 2 else None
                cluster.enable_provisioning(ALGORITHMS[rest[0]], q, baseline)
            elif op == "submit":
                n, cost = int(rest[0]), float(rest[1])
                handle = TaskApplicationHandle(cluster.client)
                if len(rest) > 2:
                    handle.app.deadline = cluster.now + int(rest[2])
                for i in range(n):
                    handle.add_task("spin", {"tag": i}, cost)
                pending.append(handle.submit())
            elif op == "mandelbrot":
                w, h, tiles, it = (int(x) for x in rest[:4])
                run = mandelbrot_app(cluster.client, w, h, tiles, it).start()
                pending.append(run)
                if len(rest) > 4:
                    run.join()
                    target = Path(rest[4]) if args.out is None else args.out / rest[4]
                    target.parent.mkdir(parents=True, exist_ok=True)
                    run.write_ppm(target)
            elif op == "run":
                cluster.run_for(int(rest[0]))
            elif op == "wait":
                cluster.run_until(lambda: all(_done(p) for p in pending))
                for p in pending:
                    stdout.write(f"{_label(p)} elapsed_ms={p.elapsed}\n")
            elif op == "kill":
                cluster.kill_worker(rest[0])
            elif op == "status":
                stdout.write(cluster.status() + "\n")
            elif op == "accounting":
                table, total = cluster.accounting()
                stdout.write(table + f"total,{total}\n")
                _write(args.out, "accounting.csv", table)
            else:
                raise ScriptError(f"line {lineno}: unknown step {op!r}")
        except (IndexError, ValueError, KeyError) as exc:
            if isinstance(exc, ScriptError):
                raise
            raise ScriptError(f"line {lineno}: {raw.strip()!r}: {exc}") from None
    return cluster


def _done(p) -> bool:
    return p.done if hasattr(p, "done") else p.finished


def _label(p) -> str:
    return p.app.id if hasattr(p, "threads") else p.app_id


def main(argv=None, stdout: TextIO = sys.stdout, stderr: TextIO = sys.stderr) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=stderr)
    try:
        if args.command == "run-experiment":
            cmd_run_experiment(args, stdout)
            return 0
        if args.command == "script":
            fh = sys.stdin if args.path == "-" else open(args.path)
            with fh:
                cluster = run_script(args, fh.readlines(), stdout)
        else:
            handler = {"deploy": cmd_deploy, "scale": cmd_scale, "status": cmd_status,
                       "accounting": cmd_accounting}[args.command]
            cluster = handler(args, stdout)
        _finish(args, cluster, stdout)
        return 0
    except (ParseError, ValidationError, ProvisioningError, UnknownExperiment, ScriptError) as exc:
        stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
