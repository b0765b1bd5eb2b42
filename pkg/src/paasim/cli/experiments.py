"""The four reference experiments: Mandelbrot elapsed time in each deployment
mode, throughput against worker count, and per-worker job distribution."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from ..cluster import Cluster, ClusterOptions, Mode
from ..models import mandelbrot_app, task_app_submit

DEFAULT_TILES = 100
DEFAULT_WIDTH = 400
DEFAULT_HEIGHT = 200
DEFAULT_MAX_ITER = 256


class UnknownExperiment(LookupError):
    pass


@dataclass
class ExperimentResult:
    name: str
    columns: list[str]
    rows: list[list]
    summary: str = ""
    traces: dict[str, list[str]] = field(default_factory=dict)

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        w.writerows(self.rows)
        return buf.getvalue()

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]


@dataclass
class Workload:
    tiles: int = DEFAULT_TILES
    width: int = DEFAULT_WIDTH
    height: int = DEFAULT_HEIGHT
    max_iter: int = DEFAULT_MAX_ITER
    # set to give every tile the same cost (the histogram stays real)
    uniform_cost: Optional[float] = None


def mandelbrot_elapsed(options: ClusterOptions, workers: int, workload: Workload):
    """Deploy, render once, return (elapsed virtual ms, histogram, cluster)."""
    cluster = Cluster(options)
    cluster.deploy(workers)
    run = mandelbrot_app(cluster.client, workload.width, workload.height, workload.tiles,
                         workload.max_iter, uniform_cost=workload.uniform_cost).start()
    hist = run.join()
    return run.elapsed, hist, cluster, run


def _elapsed_table(name: str, mode: Mode, seed: int, counts: Sequence[int], workload: Workload,
                   lan_ms: int, wan_ms: int, keep_traces: bool) -> ExperimentResult:
    rows, traces = [], {}
    for w in counts:
        opts = ClusterOptions(mode=mode, seed=seed, lan_ms=lan_ms, wan_ms=wan_ms, trace=keep_traces)
        elapsed, hist, cluster, _ = mandelbrot_elapsed(opts, w, workload)
        rows.append([w, elapsed, round(elapsed / 1000, 3)])
        if keep_traces:
            traces[f"workers{w}"] = cluster.network.trace
    base = rows[0][1]
    summary = "; ".join(f"{r[0]} workers: {r[2]} s (speedup {base / r[1]:.2f})" for r in rows)
    return ExperimentResult(name, ["workers", "elapsed_ms", "elapsed_s"], rows,
                            f"{name} Mandelbrot {workload.tiles} tiles, {mode.value}: {summary}", traces)


def fig21(seed: int = 0, counts: Sequence[int] = (1, 5, 10), workload: Optional[Workload] = None,
          lan_ms: int = 1, wan_ms: int = 100, keep_traces: bool = False) -> ExperimentResult:
    """Elapsed time with the master on premises (worker deployment)."""
    return _elapsed_table("fig21", Mode.WORKER, seed, counts, workload or Workload(), lan_ms, wan_ms,
                          keep_traces)


def fig22(seed: int = 0, counts: Sequence[int] = (1, 5, 10), workload: Optional[Workload] = None,
          lan_ms: int = 1, wan_ms: int = 100, keep_traces: bool = False) -> ExperimentResult:
    """Elapsed time with the whole platform in the cloud."""
    return _elapsed_table("fig22", Mode.CLOUD, seed, counts, workload or Workload(), lan_ms, wan_ms,
                          keep_traces)


def fig23(seed: int = 0, counts: Sequence[int] = tuple(range(1, 17)), workload: Optional[Workload] = None,
          lan_ms: int = 1, wan_ms: int = 100, mode: Mode = Mode.CLOUD,
          keep_traces: bool = False) -> ExperimentResult:
    """Throughput (tiles per virtual second) against instance count."""
    workload = workload or Workload()
    rows, traces = [], {}
    for w in counts:
        opts = ClusterOptions(mode=mode, seed=seed, lan_ms=lan_ms, wan_ms=wan_ms, trace=keep_traces)
        elapsed, _, cluster, _ = mandelbrot_elapsed(opts, w, workload)
        rows.append([w, elapsed, round(workload.tiles * 1000 / elapsed, 4)])
        if keep_traces:
            traces[f"workers{w}"] = cluster.network.trace
    first, last = rows[0][2], rows[-1][2]
    return ExperimentResult("fig23", ["workers", "elapsed_ms", "units_per_s"], rows,
                            f"fig23 throughput {first} -> {last} units/s "
                            f"({last / first:.2f}x from {rows[0][0]} to {rows[-1][0]} workers)", traces)


def equal_units_throughput(seed: int, workers: int, units: int, cost: float = 1600,
                           mode: Mode = Mode.CLOUD, lan_ms: int = 1, wan_ms: int = 100) -> float:
    """Units per virtual second for ``units`` equal-cost tasks."""
    cluster = Cluster(ClusterOptions(mode=mode, seed=seed, lan_ms=lan_ms, wan_ms=wan_ms, trace=False))
    cluster.deploy(workers)
    handle = task_app_submit(cluster.client, [("spin", {"tag": i}, cost) for i in range(units)])
    handle.wait()
    return units * 1000 / handle.elapsed


def fig24(seed: int = 0, workers: int = 10, units: int = 100, cost: float = 1600,
          mode: Mode = Mode.CLOUD, lan_ms: int = 1, wan_ms: int = 100,
          keep_traces: bool = False) -> ExperimentResult:
    """Jobs executed by each worker for equal-cost units."""
    cluster = Cluster(ClusterOptions(mode=mode, seed=seed, lan_ms=lan_ms, wan_ms=wan_ms, trace=keep_traces))
    cluster.deploy(workers)
    handle = task_app_submit(cluster.client, [("spin", {"tag": i}, cost) for i in range(units)])
    handle.wait()
    rows = []
    for iid, w in sorted(cluster.workers.items(), key=lambda kv: int(kv[0].rsplit("_", 1)[1])):
        rows.append([iid, str(w.uri), w.state.executed_count])
    counts = [r[2] for r in rows]
    traces = {"run": cluster.network.trace} if keep_traces else {}
    return ExperimentResult("fig24", ["instance", "node", "executed_count"], rows,
                            f"fig24 {units} units on {workers} workers: min {min(counts)}, "
                            f"max {max(counts)} jobs per worker", traces)


EXPERIMENTS: dict[str, Callable[..., ExperimentResult]] = {
    "fig21": fig21, "fig22": fig22, "fig23": fig23, "fig24": fig24,
}


def run_experiment(name: str, seed: int = 0, **kwargs) -> ExperimentResult:
    try:
        fn = EXPERIMENTS[name]
    except KeyError:
        raise UnknownExperiment(f"{name!r}; choose one of {sorted(EXPERIMENTS)}") from None
    return fn(seed=seed, **kwargs)
