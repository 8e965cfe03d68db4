"""Service discovery: the runtime's only real entry point.

Services register their exports; a caller discovers a peer by name and gets
back a caller-private FunctionTable whose slots dispatch directly to the
callee.  Everything after discovery is a plain call through a slot — there
is no other way into the runtime.  Each slot carries the binding mode
negotiated from the two endpoints' safety classes.

Tables are memoized per (caller, target) so a mesh rewrite of one caller's
slot persists and never leaks to another caller.  Unregistering poisons
existing tables: calls through them fail with ServiceGone.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from .manifest import SafetyClass


class RegistryError(Exception):
    pass


class DuplicateName(RegistryError):
    pass


class EmptyExports(RegistryError):
    pass


class NotFound(RegistryError):
    pass


class UnknownCaller(RegistryError):
    pass


class UnknownService(RegistryError):
    pass


class BindingMode(Enum):
    DIRECT_CALL = "direct_call"
    PROXY_MEDIATED = "proxy_mediated"
    COPY_IN_OUT = "copy_in_out"


def negotiate(
    caller_class: SafetyClass, callee_class: SafetyClass, *, force_copy: bool = False
) -> BindingMode:
    """Pick the binding mode for a caller/callee safety-class pair.

    Two object-granular (trusted native) endpoints call directly.  Any pair
    involving region-granular code shares buffers through proxies, or through
    explicit copies when force_copy is set (the measurement baseline).
    """
    if caller_class is SafetyClass.OBJECT_GRANULAR and callee_class is SafetyClass.OBJECT_GRANULAR:
        return BindingMode.DIRECT_CALL
    return BindingMode.COPY_IN_OUT if force_copy else BindingMode.PROXY_MEDIATED


@dataclass
class ServiceRecord:
    name: str
    instance: Any
    exports: tuple[str, ...]
    safety_class: SafetyClass
    alive: bool = True
    in_flight: int = 0
    ordinal: int = 0


@dataclass
class ExportTarget:
    """Direct dispatch to one export of one service."""

    record: ServiceRecord
    export: str

    def invoke(self, engine, caller: str, slot: "TableSlot", args: tuple, payload):
        return engine.dispatch_export(self.record, self.export, slot.binding, caller, args, payload)

    def describe(self) -> str:
        return f"direct:{self.record.name}.{self.export}"


@dataclass
class TableSlot:
    index: int
    export_name: str
    binding: BindingMode
    target: Any  # ExportTarget, or a mesh interception wrapper around one

    def direct_target(self) -> ExportTarget:
        t = self.target
        while not isinstance(t, ExportTarget):
            t = t.direct
        return t


@dataclass
class FunctionTable:
    owner_service: str
    target_service: str
    slots: list[TableSlot] = field(default_factory=list)


class Registry:
    """Thread-safe name -> service registry with memoized function tables."""

    def __init__(self, *, force_copy: bool = False):
        self.force_copy = force_copy
        self._lock = threading.RLock()
        self._services: dict[str, ServiceRecord] = {}
        self._tables: dict[tuple[str, str], FunctionTable] = {}
        self._quiesce = threading.Condition(self._lock)
        self._next_ordinal = 0

    def register_service(
        self, name: str, instance: Any, exports: list[str] | tuple[str, ...], safety_class: SafetyClass
    ) -> None:
        if not exports:
            raise EmptyExports(name)
        with self._lock:
            if name in self._services:
                raise DuplicateName(name)
            record = ServiceRecord(
                name=name,
                instance=instance,
                exports=tuple(exports),
                safety_class=safety_class,
                ordinal=self._next_ordinal,
            )
            self._next_ordinal += 1
            self._services[name] = record

    def get(self, name: str) -> ServiceRecord:
        with self._lock:
            try:
                return self._services[name]
            except KeyError:
                raise NotFound(name) from None

    def names(self) -> list[str]:
        with self._lock:
            return list(self._services)

    def discover(self, caller: str, target: str) -> FunctionTable:
        """Return the caller-private table for target, building it on first use.

        Repeated calls return the same table object, so slot rewrites by the
        mesh persist for this caller without affecting any other caller.
        """
        with self._lock:
            if caller not in self._services:
                raise UnknownCaller(caller)
            callee = self._services.get(target)
            if callee is None or not callee.alive:
                raise NotFound(target)
            key = (caller, target)
            table = self._tables.get(key)
            if table is None:
                mode = negotiate(
                    self._services[caller].safety_class,
                    callee.safety_class,
                    force_copy=self.force_copy,
                )
                table = FunctionTable(owner_service=caller, target_service=target)
                for i, export in enumerate(callee.exports):
                    table.slots.append(
                        TableSlot(
                            index=i,
                            export_name=export,
                            binding=mode,
                            target=ExportTarget(record=callee, export=export),
                        )
                    )
                self._tables[key] = table
            return table

    def unregister(self, name: str) -> None:
        """Remove a service after in-flight calls drain; existing tables to it
        are left in place but poisoned (calls report ServiceGone)."""
        with self._lock:
            record = self._services.get(name)
            if record is None:
                raise UnknownService(name)
            while record.in_flight > 0:
                self._quiesce.wait()
            record.alive = False
            del self._services[name]
            for key in [k for k in self._tables if k[1] == name]:
                del self._tables[key]

    def enter_call(self, record: ServiceRecord) -> None:
        with self._lock:
            record.in_flight += 1

    def exit_call(self, record: ServiceRecord) -> None:
        with self._lock:
            record.in_flight -= 1
            self._quiesce.notify_all()

    def tables(self) -> list[FunctionTable]:
        with self._lock:
            return list(self._tables.values())

    def dump_state(self) -> dict:
        """JSON-ready snapshot of services and tables for debugging."""
        with self._lock:
            return {
                "services": [
                    {
                        "name": r.name,
                        "class": r.safety_class.value,
                        "exports": list(r.exports),
                        "alive": r.alive,
                    }
                    for r in self._services.values()
                ],
                "tables": [
                    {
                        "caller": t.owner_service,
                        "target": t.target_service,
                        "slots": [
                            {
                                "index": s.index,
                                "export": s.export_name,
                                "binding": s.binding.value,
                                "dispatch": s.target.describe(),
                            }
                            for s in t.slots
                        ],
                    }
                    for t in self._tables.values()
                ],
            }
