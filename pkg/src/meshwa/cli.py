"""Operator CLI: load a manifest, run an export, benchmark, or inspect state.

Exit codes: 0 success, 1 validation/usage failure, 2 sandbox trap,
3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bench import (
    BaselineConfig,
    BenchError,
    Chain,
    FanOut,
    WorkloadSpec,
    emit_report,
    run_inproc,
    run_process_baseline,
)
from .manifest import Manifest, ManifestError, parse_manifest
from .mesh import MeshError
from .registry import RegistryError
from .runtime import DeployError, ManifestInvalid, Runtime
from .sandbox import SandboxError, Trap
from .xcall import CalleeTrapped, XcallError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_TRAP = 2
EXIT_IO = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meshwa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="load all services and invoke one export once")
    run.add_argument("manifest", help="manifest JSON path")
    run.add_argument("--service", required=True)
    run.add_argument("--export", required=True)
    run.add_argument("--args", nargs="*", type=int, default=[])

    bench = sub.add_parser("bench", help="benchmark in-process vs. process baseline")
    bench.add_argument("manifest", help="manifest JSON path")
    topo = bench.add_mutually_exclusive_group()
    topo.add_argument("--chain", type=int, default=None, metavar="N")
    topo.add_argument("--fanout", type=int, default=None, metavar="N")
    bench.add_argument("--payload", type=int, default=64)
    bench.add_argument("--iters", type=int, default=10000)
    bench.add_argument("--warmup", type=int, default=100)
    bench.add_argument("--spin", type=int, default=0, help="busy-work per hop, ns")
    bench.add_argument("--mesh", choices=["none", "intercept", "elide"], default="none")
    bench.add_argument("--elide-after", type=int, default=3)
    bench.add_argument("--baseline", action="store_true", help="also run the process+sidecar baseline")
    bench.add_argument("--no-sidecar", dest="sidecar", action="store_false", default=True)
    bench.add_argument("--out", default="bench.csv")

    inspect = sub.add_parser("inspect", help="dump registry/mesh/allocator state as JSON")
    inspect.add_argument("manifest", help="manifest JSON path")
    return parser


def _load_manifest(path: str) -> Manifest:
    text = Path(path).read_text(encoding="utf-8")
    return parse_manifest(text)


def _deploy(path: str) -> tuple[Runtime, Manifest]:
    manifest = _load_manifest(path)
    runtime = Runtime()
    runtime.load_manifest(manifest, Path(path).parent)
    return runtime, manifest


def cmd_run(args) -> int:
    runtime, _ = _deploy(args.manifest)
    try:
        value = runtime.invoke_export(args.service, args.export, args.args)
    except Trap as trap:
        print(trap.kind.value, file=sys.stderr)
        return EXIT_TRAP
    except CalleeTrapped as exc:
        print(exc.trap_kind.value, file=sys.stderr)
        return EXIT_TRAP
    print("ok" if value is None else value)
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.iters < 1:
        print("error: --iters must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    if args.warmup < 0 or args.payload < 0 or args.spin < 0:
        print("error: --warmup/--payload/--spin must be >= 0", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        if args.fanout is not None:
            topology = FanOut(args.fanout)
        else:
            topology = Chain(args.chain if args.chain is not None else 1)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    manifest = _load_manifest(args.manifest)
    spec = WorkloadSpec(
        topology=topology,
        payload_bytes=args.payload,
        iterations=args.iters,
        warmup_iterations=args.warmup,
        compute_spin_ns=args.spin,
    )
    reports = [
        run_inproc(
            spec,
            config_id=f"inproc_{args.mesh}",
            mesh=args.mesh,
            elide_n=args.elide_after,
            manifest=manifest,
            base_dir=Path(args.manifest).parent,
        )
    ]
    if args.baseline:
        name = "process_sidecar" if args.sidecar else "process_plain"
        reports.append(
            run_process_baseline(spec, BaselineConfig(sidecar=args.sidecar), config_id=name)
        )
    emit_report(reports, args.out)
    if len(reports) == 2:
        delta = reports[1].infra_tax - reports[0].infra_tax
        ratio = reports[1].p50_ns / reports[0].p50_ns if reports[0].p50_ns else float("inf")
        print(f"baseline vs in-process: p50 ratio {ratio:.1f}x, infra-tax delta {delta:+.4f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    runtime, _ = _deploy(args.manifest)
    print(json.dumps(runtime.inspect(), indent=2, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_VALIDATION

    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "bench":
            return cmd_bench(args)
        return cmd_inspect(args)
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ManifestInvalid as exc:
        print("manifest invalid:", file=sys.stderr)
        for v in exc.violations:
            print(f"  {v.code} {v.subject}: {v.detail}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ManifestError, DeployError, RegistryError, SandboxError, XcallError, MeshError, BenchError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    raise SystemExit(main())
