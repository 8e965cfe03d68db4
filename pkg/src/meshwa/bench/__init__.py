"""Benchmark harness: in-process runs vs. a process-per-service baseline."""

from .inproc import run_inproc
from .procbase import BaselineCluster, run_process_baseline
from .workload import (
    BaselineConfig,
    BenchError,
    BenchReport,
    Chain,
    ChildCrashed,
    EmptyReportSet,
    FanOut,
    SocketError,
    SpawnFailure,
    WorkloadSpec,
    ZeroIterations,
    ZeroTotalTime,
    compute_infra_tax,
    emit_report,
)

__all__ = [
    "run_inproc",
    "BaselineCluster",
    "run_process_baseline",
    "BaselineConfig",
    "BenchError",
    "BenchReport",
    "Chain",
    "ChildCrashed",
    "EmptyReportSet",
    "FanOut",
    "SocketError",
    "SpawnFailure",
    "WorkloadSpec",
    "ZeroIterations",
    "ZeroTotalTime",
    "compute_infra_tax",
    "emit_report",
]
