"""In-process benchmark runs over the single-address-space runtime.

The topology is built from native spin-then-forward services wired through
the mesh; a chain request travels driver -> s1 -> ... -> sN and echoes back,
a fan-out request visits each leaf once (closed loop, one in flight).
Intermediate hops borrow the payload object before forwarding it, matching
the ownership discipline, and every hop counts its requests so a baseline
run can be checked for identical work.
"""

from __future__ import annotations

import time

from ..mesh import MeshPolicy
from ..runtime import ObserverProxy, Runtime
from ..xcall import NativeCall, NativeService
from .workload import (
    BenchReport,
    Chain,
    WorkloadSpec,
    ZeroIterations,
    build_report,
    payload_sequence,
    spin,
)

DRIVER = "bench.driver"
PROXY = "bench.proxy"

MESH_MODES = ("none", "intercept", "elide")


class _Driver(NativeService):
    exports = ("noop",)

    def noop(self, ctx: NativeCall):
        return 0


class SpinHop(NativeService):
    """One topology hop: spin for the configured compute, then forward the
    payload downstream (or echo it back if terminal)."""

    exports = ("handle",)

    def __init__(self, runtime: Runtime, name: str, downstream: str | None, spin_ns: int):
        super().__init__()
        self.runtime = runtime
        self.name = name
        self.downstream = downstream
        self.spin_ns = spin_ns
        self.requests = 0

    def handle(self, ctx: NativeCall):
        self.requests += 1
        spin(self.spin_ns)
        if self.downstream is None:
            data = ctx.request()
            if data is None:
                return 0
            ctx.reply(data)
            return len(data)
        handle = ctx.payload_handle
        if handle is None:
            return self.runtime.mesh.dispatch(self.name, self.downstream, "handle").value
        token = self.runtime.ledger.borrow(handle, self.name)
        try:
            result = self.runtime.mesh.dispatch(self.name, self.downstream, "handle", (), handle)
        finally:
            self.runtime.ledger.release(token)
        if result.payload is not None:
            ctx.reply(result.payload)
        return result.value


def _build_topology(runtime: Runtime, spec: WorkloadSpec) -> list[SpinHop]:
    runtime.register_native(DRIVER, _Driver())
    hops: list[SpinHop] = []
    if isinstance(spec.topology, Chain):
        names = [f"bench.s{i + 1}" for i in range(spec.topology.length)]
        for i, name in enumerate(names):
            downstream = names[i + 1] if i + 1 < len(names) else None
            hops.append(SpinHop(runtime, name, downstream, spec.compute_spin_ns))
    else:
        names = [f"bench.f{i + 1}" for i in range(spec.topology.width)]
        for name in names:
            hops.append(SpinHop(runtime, name, None, spec.compute_spin_ns))
    for hop in hops:
        runtime.register_native(hop.name, hop)
    return hops


def _edges(spec: WorkloadSpec, hops: list[SpinHop]) -> list[tuple[str, str]]:
    if isinstance(spec.topology, Chain):
        edges = [(DRIVER, hops[0].name)]
        edges += [(hops[i].name, hops[i + 1].name) for i in range(len(hops) - 1)]
        return edges
    return [(DRIVER, h.name) for h in hops]


def run_inproc(
    spec: WorkloadSpec,
    *,
    config_id: str = "inproc",
    mesh: str = "none",
    elide_n: int = 3,
    manifest=None,
    base_dir: str = ".",
    runtime: Runtime | None = None,
) -> BenchReport:
    """Run the workload in one process and report latency and infra tax.

    ``mesh`` selects the edge policy: "none" (plain passthrough dispatch),
    "intercept" (an observer proxy on every edge), or "elide" (the proxy
    removes itself after ``elide_n`` intercepted calls; set warmups >= elide_n
    so measured iterations run direct).
    """
    if spec.iterations < 1:
        raise ZeroIterations("iterations must be >= 1")
    if mesh not in MESH_MODES:
        raise ValueError(f"mesh must be one of {MESH_MODES}")

    rt = runtime or Runtime()
    if manifest is not None:
        rt.load_manifest(manifest, base_dir)
    hops = _build_topology(rt, spec)

    if mesh != "none":
        rt.register_native(PROXY, ObserverProxy())
        for caller, callee in _edges(spec, hops):
            if mesh == "intercept":
                rt.mesh.install_policy(MeshPolicy.intercept(caller, callee, PROXY))
            else:
                rt.mesh.install_policy(MeshPolicy.elide_after(caller, callee, PROXY, elide_n))

    payloads = payload_sequence(spec)
    handle = None
    if spec.payload_bytes > 0:
        handle = rt.ledger.create_object(DRIVER, spec.payload_bytes)

    fan_targets = [] if isinstance(spec.topology, Chain) else [h.name for h in hops]
    first_hop = hops[0].name

    def one_request(data: bytes) -> None:
        if handle is not None:
            rt.ledger.write(handle, 0, data)
        if fan_targets:
            for target in fan_targets:
                result = rt.mesh.dispatch(DRIVER, target, "handle", (), handle)
                if handle is not None and result.payload != data:
                    raise AssertionError("echo mismatch in fan-out hop")
        else:
            result = rt.mesh.dispatch(DRIVER, first_hop, "handle", (), handle)
            if handle is not None and result.payload != data:
                raise AssertionError("echo mismatch in chain")

    for i in range(spec.warmup_iterations):
        one_request(payloads[i])

    latencies: list[int] = []
    t_begin = time.perf_counter_ns()
    for i in range(spec.iterations):
        t0 = time.perf_counter_ns()
        one_request(payloads[spec.warmup_iterations + i])
        latencies.append(time.perf_counter_ns() - t0)
    total = time.perf_counter_ns() - t_begin

    return build_report(
        config_id, spec, latencies, total, hop_counts=tuple(h.requests for h in hops)
    )
