"""Benchmark harness: per-request overhead of the two paradigms.

Deploys the same echo handler once InProcess and once Subprocess, then
drives warm sequential requests through the full dispatcher path (closed
loop, one in flight) and compares the latency medians. Raw latencies are
written as newline-delimited integers (microseconds) so every report field
can be recomputed independently; the significance gate bootstraps the
standard error of each median from those files.
"""

from __future__ import annotations

import json
import random
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .dispatcher import Request
from .errors import BenchFailed
from .monitor import nearest_rank
from .paradigms import child_artifact
from .registry import ModuleDescriptor, Paradigm, ResourceQuota, RouteRule, Strategy

BOOTSTRAP_RESAMPLES = 1000


@dataclass
class BenchReport:
    scenario: str  # "InProcess" | "Subprocess"
    requests: int
    median_us: float
    p95_us: float
    mean_us: float
    errors: int
    wall_clock_s: float

    def validate(self) -> None:
        if self.median_us > self.p95_us:
            raise BenchFailed("median above p95: corrupt latency data")
        if self.errors > self.requests:
            raise BenchFailed("more errors than requests")

    def to_json(self) -> dict:
        return {"scenario": self.scenario, "requests": self.requests,
                "median_us": self.median_us, "p95_us": self.p95_us,
                "mean_us": self.mean_us, "errors": self.errors,
                "wall_clock_s": self.wall_clock_s}


def bench_descriptor(scenario: str) -> ModuleDescriptor:
    if scenario == "InProcess":
        paradigm, artifact = Paradigm.InProcess, "echo"
    else:
        paradigm, artifact = Paradigm.Subprocess, child_artifact("echo", "--plain")
    return ModuleDescriptor(
        module_id=f"bench.{scenario.lower()}",
        name=f"bench {scenario}",
        version="1.0.0",
        paradigm=paradigm,
        artifact_ref=artifact,
        routes=(RouteRule("*", f"/bench/{scenario.lower()}", Strategy.RoundRobin),),
        quota=ResourceQuota(max_memory_bytes=512 * 1024 * 1024,
                            max_concurrent_requests=64),
        replicas_desired=1,
    )


def _run_scenario(kernel, scenario: str, n_requests: int, warmup: int) -> list[int]:
    path = f"/bench/{scenario.lower()}"
    for _ in range(warmup):
        kernel.dispatch(Request(method="POST", path=path, body=b"bench"))
    latencies = []
    errors = 0
    for _ in range(n_requests):
        response = kernel.dispatch(Request(method="POST", path=path, body=b"bench"))
        if response.status != 200:
            errors += 1
        latencies.append(response.latency_us)
    if errors > max(1, n_requests // 1000):  # 0.1% error budget
        raise BenchFailed(f"{scenario}: {errors} errors in {n_requests} requests")
    return latencies


def summarize(scenario: str, latencies: list[int], errors: int,
              wall_clock_s: float) -> BenchReport:
    ordered = sorted(float(v) for v in latencies)
    report = BenchReport(
        scenario=scenario,
        requests=len(latencies),
        median_us=nearest_rank(ordered, 50.0),
        p95_us=nearest_rank(ordered, 95.0),
        mean_us=statistics.fmean(ordered),
        errors=errors,
        wall_clock_s=wall_clock_s,
    )
    report.validate()
    return report


def bootstrap_median_se(values: list[int], resamples: int = BOOTSTRAP_RESAMPLES,
                        seed: int = 20240601) -> float:
    rng = random.Random(seed)
    n = len(values)
    medians = []
    for _ in range(resamples):
        sample = sorted(rng.choice(values) for _ in range(n))
        medians.append(nearest_rank([float(v) for v in sample], 50.0))
    return statistics.pstdev(medians)


def compare(inproc: list[int], subproc: list[int]) -> dict:
    median_in = nearest_rank(sorted(float(v) for v in inproc), 50.0)
    median_sub = nearest_rank(sorted(float(v) for v in subproc), 50.0)
    se_in = bootstrap_median_se(inproc)
    se_sub = bootstrap_median_se(subproc, seed=20240602)
    se_combined = (se_in ** 2 + se_sub ** 2) ** 0.5
    gap = median_sub - median_in
    return {
        "inprocess_median_us": median_in,
        "subprocess_median_us": median_sub,
        "gap_us": gap,
        "se_inprocess_us": se_in,
        "se_subprocess_us": se_sub,
        "se_combined_us": se_combined,
        "ordering_holds": median_in < median_sub,
        "significant": gap > 3 * se_combined,
    }


def run_bench(kernel, n_requests: int = 1000, warmup: int = 100,
              out_dir: Optional[str] = None) -> dict:
    """Returns {"inprocess": report, "subprocess": report, "verdict": ...}."""
    raw: dict[str, list[int]] = {}
    reports = {}
    for scenario in ("InProcess", "Subprocess"):
        descriptor = bench_descriptor(scenario)
        if not kernel.registry.has_module(descriptor.module_id):
            kernel.register_module(descriptor)
        start = time.perf_counter()
        latencies = _run_scenario(kernel, scenario, n_requests, warmup)
        wall = time.perf_counter() - start
        raw[scenario] = latencies
        reports[scenario.lower()] = summarize(scenario, latencies, 0, wall)
        if out_dir:
            path = Path(out_dir) / f"bench_{scenario.lower()}_latencies_us.txt"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("\n".join(str(v) for v in latencies) + "\n")
    verdict = compare(raw["InProcess"], raw["Subprocess"])
    return {
        "inprocess": reports["inprocess"].to_json(),
        "subprocess": reports["subprocess"].to_json(),
        "verdict": verdict,
    }


def render_table(result: dict) -> str:
    rows = [("scenario", "requests", "median_us", "p95_us", "mean_us", "wall_s")]
    for key in ("inprocess", "subprocess"):
        report = result[key]
        rows.append((report["scenario"], str(report["requests"]),
                     f"{report['median_us']:.0f}", f"{report['p95_us']:.0f}",
                     f"{report['mean_us']:.1f}", f"{report['wall_clock_s']:.2f}"))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row))
             for row in rows]
    verdict = result["verdict"]
    lines.append("")
    lines.append(f"median gap: {verdict['gap_us']:.0f} us "
                 f"(3x combined SE = {3 * verdict['se_combined_us']:.0f} us); "
                 f"ordering holds: {verdict['ordering_holds']}, "
                 f"significant: {verdict['significant']}")
    return "\n".join(lines)
