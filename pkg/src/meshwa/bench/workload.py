"""Workload definitions, latency statistics, and report emission.

The infrastructure-tax metric treats the configured busy-spin per hop as the
only "useful" compute; everything else a request spends time on (dispatch,
copies, proxies, sockets) is overhead:

    infra_tax = 1 - compute_time / total_time   (clamped to [0, 1])

Payload contents come from an RNG seeded by MESHWA_BENCH_SEED (default 0) so
in-process and process-baseline runs issue identical request sequences.
"""

from __future__ import annotations

import math
import os
import platform
import random
import time
from dataclasses import dataclass, field

CSV_HEADER = "config,topology,payload_bytes,iterations,p50_ns,p90_ns,p99_ns,throughput_rps,infra_tax"
SEED_ENV = "MESHWA_BENCH_SEED"


class BenchError(Exception):
    pass


class ZeroIterations(BenchError):
    pass


class ZeroTotalTime(BenchError):
    pass


class EmptyReportSet(BenchError):
    pass


class SpawnFailure(BenchError):
    pass


class SocketError(BenchError):
    pass


class ChildCrashed(BenchError):
    def __init__(self, child: str):
        super().__init__(f"child process {child!r} died mid-run")
        self.child = child


@dataclass(frozen=True)
class Chain:
    length: int

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("chain length must be >= 1")

    def describe(self) -> str:
        return f"chain{self.length}"

    @property
    def hops(self) -> int:
        return self.length


@dataclass(frozen=True)
class FanOut:
    width: int

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("fan-out width must be >= 1")

    def describe(self) -> str:
        return f"fanout{self.width}"

    @property
    def hops(self) -> int:
        return self.width


Topology = Chain | FanOut


@dataclass(frozen=True)
class WorkloadSpec:
    topology: Topology
    payload_bytes: int = 64
    iterations: int = 1000
    warmup_iterations: int = 0
    compute_spin_ns: int = 0

    def __post_init__(self):
        if self.payload_bytes < 0:
            raise ValueError("payload_bytes must be >= 0")
        if self.warmup_iterations < 0:
            raise ValueError("warmup_iterations must be >= 0")
        if self.compute_spin_ns < 0:
            raise ValueError("compute_spin_ns must be >= 0")

    @property
    def total_requests(self) -> int:
        return self.iterations + self.warmup_iterations


@dataclass(frozen=True)
class BaselineConfig:
    """Process-per-service baseline over local stream sockets with
    length-prefixed frames; sidecar adds one forwarder process per service."""

    sidecar: bool = True


@dataclass
class BenchReport:
    config: str
    topology: str
    payload_bytes: int
    iterations: int
    p50_ns: int
    p90_ns: int
    p99_ns: int
    throughput_rps: float
    total_time_ns: int
    compute_time_ns: int
    infra_tax: float
    hop_counts: tuple[int, ...] = ()
    env: dict = field(default_factory=dict)

    def csv_row(self) -> str:
        return (
            f"{self.config},{self.topology},{self.payload_bytes},{self.iterations},"
            f"{self.p50_ns},{self.p90_ns},{self.p99_ns},"
            f"{self.throughput_rps:.2f},{self.infra_tax:.4f}"
        )


def bench_seed() -> int:
    try:
        return int(os.environ.get(SEED_ENV, "0"))
    except ValueError:
        return 0


def payload_sequence(spec: WorkloadSpec, seed: int | None = None) -> list[bytes]:
    """Deterministic per-request payload contents (warmup first)."""
    rng = random.Random(bench_seed() if seed is None else seed)
    return [rng.randbytes(spec.payload_bytes) for _ in range(spec.total_requests)]


def spin(duration_ns: int) -> None:
    """Busy-wait standing in for business logic."""
    if duration_ns <= 0:
        return
    deadline = time.perf_counter_ns() + duration_ns
    while time.perf_counter_ns() < deadline:
        pass


def percentile(sorted_samples: list[int], q: float) -> int:
    """Nearest-rank percentile over pre-sorted samples."""
    if not sorted_samples:
        return 0
    rank = max(1, math.ceil(q * len(sorted_samples)))
    return sorted_samples[rank - 1]


def compute_infra_tax(compute_time_ns: int, total_time_ns: int) -> float:
    """Fraction of run time not spent in configured compute, clamped to [0, 1]."""
    if total_time_ns <= 0:
        raise ZeroTotalTime(f"total_time_ns must be > 0, got {total_time_ns}")
    if compute_time_ns < 0:
        raise ValueError("compute_time_ns must be >= 0")
    return min(1.0, max(0.0, 1.0 - compute_time_ns / total_time_ns))


def build_report(
    config: str,
    spec: WorkloadSpec,
    latencies_ns: list[int],
    total_time_ns: int,
    hop_counts: tuple[int, ...] = (),
) -> BenchReport:
    samples = sorted(latencies_ns)
    compute_ns = spec.compute_spin_ns * spec.topology.hops * spec.iterations
    throughput = spec.iterations / (total_time_ns / 1e9) if total_time_ns > 0 else 0.0
    return BenchReport(
        config=config,
        topology=spec.topology.describe(),
        payload_bytes=spec.payload_bytes,
        iterations=spec.iterations,
        p50_ns=percentile(samples, 0.50),
        p90_ns=percentile(samples, 0.90),
        p99_ns=percentile(samples, 0.99),
        throughput_rps=throughput,
        total_time_ns=total_time_ns,
        compute_time_ns=compute_ns,
        infra_tax=compute_infra_tax(compute_ns, total_time_ns),
        hop_counts=hop_counts,
        env={
            "host": platform.node(),
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "warmup_iterations": spec.warmup_iterations,
            "compute_spin_ns": spec.compute_spin_ns,
            "seed": bench_seed(),
        },
    )


def emit_report(reports: list[BenchReport], path) -> None:
    """Write the CSV (exact header, one row per config) and print a summary."""
    if not reports:
        raise EmptyReportSet("no reports to emit")
    lines = [CSV_HEADER] + [r.csv_row() for r in reports]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"wrote {len(reports)} config(s) to {path}")
    for r in reports:
        print(
            f"  {r.config:<24} {r.topology:<9} p50={r.p50_ns / 1000:9.1f}us "
            f"p99={r.p99_ns / 1000:9.1f}us {r.throughput_rps:10.1f} req/s "
            f"infra_tax={r.infra_tax:.4f}"
        )
