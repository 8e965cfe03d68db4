"""In-address-space service mesh.

A mesh proxy here is just another registered service exporting ``on_call``;
interception routes a call through it before forwarding to the callee, all
within the same process.  Because each caller owns a private function table,
interception and its inverse are slot rewrites: installing an intercepting
policy wraps the edge's slots, and self-elision swaps the direct target back
in after a warm-up threshold, removing the proxy from the path entirely.

Proxies observe (caller, callee ordinals, slot, payload) but do not mutate
payloads; mutation would break the transparency guarantee that elision
relies on.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from enum import Enum

from .manifest import SafetyClass
from .registry import BindingMode, ExportTarget, NotFound, Registry, ServiceRecord, TableSlot
from .xcall import CallEngine, CalleeTrapped, CallResult, SlotOutOfRange

ON_CALL_EXPORT = "on_call"
HIST_BUCKETS = 64  # log2(ns) buckets


class MeshError(Exception):
    pass


class UnknownEndpoint(MeshError):
    pass


class ProxyMissingExport(MeshError):
    pass


class UnknownEdge(MeshError):
    pass


class ProxyTrapped(MeshError):
    def __init__(self, kind, detail: str = ""):
        super().__init__(f"mesh proxy trapped: {kind.value}{' ' + detail if detail else ''}")
        self.trap_kind = kind


class PolicyMode(Enum):
    PASSTHROUGH = "passthrough"
    INTERCEPT = "intercept"
    ELIDE_AFTER = "elide_after"


@dataclass(frozen=True)
class MeshPolicy:
    caller: str
    callee: str
    mode: PolicyMode
    proxy: str | None = None
    n: int | None = None

    def __post_init__(self):
        if self.mode is not PolicyMode.PASSTHROUGH and not self.proxy:
            raise ValueError(f"{self.mode.value} policy requires a proxy")
        if self.mode is PolicyMode.ELIDE_AFTER and (self.n is None or self.n < 1):
            raise ValueError("elide_after policy requires n >= 1")

    @classmethod
    def passthrough(cls, caller: str, callee: str) -> "MeshPolicy":
        return cls(caller, callee, PolicyMode.PASSTHROUGH)

    @classmethod
    def intercept(cls, caller: str, callee: str, proxy: str) -> "MeshPolicy":
        return cls(caller, callee, PolicyMode.INTERCEPT, proxy=proxy)

    @classmethod
    def elide_after(cls, caller: str, callee: str, proxy: str, n: int) -> "MeshPolicy":
        return cls(caller, callee, PolicyMode.ELIDE_AFTER, proxy=proxy, n=n)


@dataclass
class EdgeStats:
    calls_total: int = 0
    calls_intercepted: int = 0
    calls_direct: int = 0
    elided_at: int | None = None
    latency_hist: list[int] = field(default_factory=lambda: [0] * HIST_BUCKETS)

    def observe_latency(self, ns: int) -> None:
        self.latency_hist[min(max(ns, 0).bit_length(), HIST_BUCKETS - 1)] += 1

    def _quantile(self, q: float) -> int:
        total = sum(self.latency_hist)
        if total == 0:
            return 0
        need = q * total
        seen = 0
        for i, count in enumerate(self.latency_hist):
            seen += count
            if seen >= need:
                return 1 << (i - 1) if i else 0  # bucket lower bound
        return 1 << (HIST_BUCKETS - 1)

    @property
    def p50_ns(self) -> int:
        return self._quantile(0.50)

    @property
    def p99_ns(self) -> int:
        return self._quantile(0.99)

    def snapshot(self) -> "EdgeStats":
        return EdgeStats(
            calls_total=self.calls_total,
            calls_intercepted=self.calls_intercepted,
            calls_direct=self.calls_direct,
            elided_at=self.elided_at,
            latency_hist=list(self.latency_hist),
        )


@dataclass
class _Edge:
    caller: str
    callee: str
    policy: MeshPolicy
    stats: EdgeStats = field(default_factory=EdgeStats)
    intercept_seq: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock)


class InterceptTarget:
    """Slot wrapper: run the proxy's on_call, then forward to the callee."""

    def __init__(self, mesh: "Mesh", edge: _Edge, proxy_record: ServiceRecord, direct: ExportTarget):
        self.mesh = mesh
        self.edge = edge
        self.proxy_record = proxy_record
        self.direct = direct

    def invoke(self, engine: CallEngine, caller: str, slot: TableSlot, args: tuple, payload):
        payload_len = engine.ledger.size(payload) if payload is not None else 0
        try:
            caller_ordinal = engine.registry.get(caller).ordinal
        except NotFound:
            caller_ordinal = 0
        observe_args = (caller_ordinal, self.direct.record.ordinal, slot.index, payload_len)
        try:
            engine.dispatch_export(
                self.proxy_record,
                ON_CALL_EXPORT,
                _proxy_binding_mode(self.proxy_record),
                caller,
                observe_args,
                payload,
            )
        except CalleeTrapped as exc:
            raise ProxyTrapped(exc.trap_kind, str(exc)) from exc
        with self.edge.lock:
            self.edge.intercept_seq += 1
        try:
            return self.direct.invoke(engine, caller, slot, args, payload)
        finally:
            self.mesh.maybe_elide(self.edge.caller, self.edge.callee)

    def describe(self) -> str:
        return f"intercept:{self.proxy_record.name}->{self.direct.describe()}"


def _proxy_binding_mode(record: ServiceRecord) -> BindingMode:
    if record.safety_class is SafetyClass.OBJECT_GRANULAR:
        return BindingMode.DIRECT_CALL
    return BindingMode.PROXY_MEDIATED


class Mesh:
    """Per-edge policies over caller-private tables."""

    def __init__(self, registry: Registry, engine: CallEngine):
        self.registry = registry
        self.engine = engine
        self._edges: dict[tuple[str, str], _Edge] = {}
        self._lock = threading.Lock()

    def _edge(self, caller: str, callee: str, *, create: bool = False) -> _Edge:
        key = (caller, callee)
        with self._lock:
            edge = self._edges.get(key)
            if edge is None:
                if not create:
                    raise UnknownEdge(f"{caller}->{callee}")
                edge = _Edge(caller=caller, callee=callee, policy=MeshPolicy.passthrough(caller, callee))
                self._edges[key] = edge
            return edge

    def install_policy(self, policy: MeshPolicy) -> None:
        """Install (or replace) the policy for one edge; rewrites the caller's
        table slots to route through the proxy when intercepting."""
        try:
            self.registry.get(policy.caller)
            self.registry.get(policy.callee)
        except NotFound as exc:
            raise UnknownEndpoint(str(exc)) from None

        proxy_record = None
        if policy.mode is not PolicyMode.PASSTHROUGH:
            try:
                proxy_record = self.registry.get(policy.proxy)
            except NotFound as exc:
                raise UnknownEndpoint(str(exc)) from None
            if ON_CALL_EXPORT not in proxy_record.exports:
                raise ProxyMissingExport(f"{policy.proxy!r} does not export {ON_CALL_EXPORT!r}")

        table = self.registry.discover(policy.caller, policy.callee)
        edge = self._edge(policy.caller, policy.callee, create=True)
        with edge.lock:
            edge.policy = policy
            edge.stats = EdgeStats()
            edge.intercept_seq = 0
            for slot in table.slots:
                direct = slot.direct_target()
                if policy.mode is PolicyMode.PASSTHROUGH:
                    slot.target = direct
                else:
                    slot.target = InterceptTarget(self, edge, proxy_record, direct)

    def dispatch(self, caller: str, callee: str, export: str | int, args=(), payload=None) -> CallResult:
        """Dispatch a call over an edge, applying its policy and recording stats.

        ``export`` may be a slot index or an export name.  Edges without an
        installed policy default to passthrough.
        """
        table = self.registry.discover(caller, callee)
        if isinstance(export, int):
            slot_index = export
        else:
            slot_index = next((s.index for s in table.slots if s.export_name == export), -1)
        if not 0 <= slot_index < len(table.slots):
            raise SlotOutOfRange(f"{callee!r} has no slot {export!r}")
        edge = self._edge(caller, callee, create=True)
        with edge.lock:
            edge.stats.calls_total += 1
            if isinstance(table.slots[slot_index].target, InterceptTarget):
                edge.stats.calls_intercepted += 1
            else:
                edge.stats.calls_direct += 1
        start = time.perf_counter_ns()
        try:
            return self.engine.call(caller, table, slot_index, args, payload)
        finally:
            with edge.lock:
                edge.stats.observe_latency(time.perf_counter_ns() - start)

    def maybe_elide(self, caller: str, callee: str) -> bool:
        """Rewrite the edge's slots back to the direct target once the
        configured number of intercepted calls has happened."""
        edge = self._edge(caller, callee)
        with edge.lock:
            policy = edge.policy
            if policy.mode is not PolicyMode.ELIDE_AFTER:
                return False
            if edge.stats.elided_at is not None or edge.intercept_seq < (policy.n or 0):
                return False
            table = self.registry.discover(caller, callee)
            for slot in table.slots:
                if isinstance(slot.target, InterceptTarget):
                    slot.target = slot.target.direct
            edge.stats.elided_at = policy.n
            return True

    def edge_stats(self, caller: str, callee: str) -> EdgeStats:
        edge = self._edge(caller, callee)
        with edge.lock:
            return edge.stats.snapshot()

    def policies(self) -> list[MeshPolicy]:
        with self._lock:
            return [e.policy for e in self._edges.values()]

    def stats_csv(self) -> str:
        header = "caller,callee,total,intercepted,direct,elided_at,p50_ns,p99_ns"
        rows = [header]
        with self._lock:
            edges = list(self._edges.values())
        for edge in edges:
            with edge.lock:
                s = edge.stats
                elided = "" if s.elided_at is None else str(s.elided_at)
                rows.append(
                    f"{edge.caller},{edge.callee},{s.calls_total},{s.calls_intercepted},"
                    f"{s.calls_direct},{elided},{s.p50_ns},{s.p99_ns}"
                )
        return "\n".join(rows) + "\n"
