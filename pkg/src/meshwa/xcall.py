"""Cross-service invocation and shared-object plumbing.

Calls flow through FunctionTable slots.  Payload bytes never travel inline:
the caller creates a shared object (runtime-owned storage outside every
service region), passes its handle, and the binding mode decides how the
callee reaches the bytes:

  DirectCall     trusted native callee, handed a copy of the bytes;
  ProxyMediated  callee reads/writes through granted proxy functions, the
                 object is never mapped into its region;
  CopyInOut      bytes are physically copied into the callee's memory before
                 the call and back out after (the measurement baseline).

The ownership ledger tracks one owner plus any number of borrows per object
and destroys the storage exactly once: after the owner has released it and
the last borrow is gone.  Granting proxy access is orthogonal to ownership;
transfers do not revoke existing grants.

Sandboxed callees see payloads through a small ABI: the export is invoked
with the caller's args plus two extras (staging address or handle, then
length) and its return value is the response length.  Proxy access from MSB
code goes through the reserved imports ``xcall.proxy_read/4`` and
``xcall.proxy_write/4`` taking (handle, obj_off, mem_off, len) and returning
a status code (0 ok, 1 revoked, 2 not authorized, 3 object bounds, 4 grantee
bounds, 5 destroyed, 6 unknown handle).
"""

from __future__ import annotations

import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional, Sequence

from .registry import (
    BindingMode,
    ExportTarget,
    FunctionTable,
    Registry,
    ServiceRecord,
    TableSlot,
    UnknownService,
)
from .sandbox import ExportNotFound, ServiceInstance, Trap, TrapKind
from .sandbox.isa import to_signed

PROXY_READ_IMPORT = "xcall.proxy_read/4"
PROXY_WRITE_IMPORT = "xcall.proxy_write/4"

CHAIN_DEPTH_CAP = 512

# MSB-visible status codes for the proxy imports.
PROXY_OK = 0
PROXY_REVOKED = 1
PROXY_NOT_AUTHORIZED = 2
PROXY_OOB_OBJECT = 3
PROXY_OOB_GRANTEE = 4
PROXY_DESTROYED = 5
PROXY_UNKNOWN_HANDLE = 6


class XcallError(Exception):
    pass


class ZeroSize(XcallError):
    pass


class UnknownHandle(XcallError):
    pass


class NotOwner(XcallError):
    pass


class AlreadyDestroyed(XcallError):
    pass


class DoubleRelease(XcallError):
    pass


class NotAuthorized(XcallError):
    pass


class Revoked(XcallError):
    pass


class OutOfBounds(XcallError):
    def __init__(self, side: str, message: str):
        super().__init__(f"{side}: {message}")
        self.side = side


class ServiceGone(XcallError):
    pass


class SlotOutOfRange(XcallError):
    pass


class PayloadTooLarge(XcallError):
    pass


class BadReplyLength(XcallError):
    pass


class ChainDepthExceeded(XcallError):
    pass


class CalleeTrapped(XcallError):
    def __init__(self, kind: TrapKind, detail: str = ""):
        super().__init__(f"callee trapped: {kind.value}{' ' + detail if detail else ''}")
        self.trap_kind = kind


class ObjectState(Enum):
    LIVE = "live"
    PENDING_DESTROY = "pending_destroy"
    DESTROYED = "destroyed"


class ProxyState(Enum):
    ACTIVE = "active"
    REVOKED = "revoked"


@dataclass
class LedgerEntry:
    handle: int
    owner: str
    size: int
    borrowers: Counter = field(default_factory=Counter)
    state: ObjectState = ObjectState.LIVE
    owner_released: bool = False
    destroy_calls: int = 0  # observability: must end at exactly 1


@dataclass
class BorrowToken:
    handle: int
    service: str
    token_id: int


@dataclass
class ProxyBinding:
    handle: int
    grantee: str
    ops: frozenset[str]
    state: ProxyState = ProxyState.ACTIVE
    slots: tuple[int, ...] = ()  # grantee import slots the shims were installed into


@dataclass
class CallRecord:
    caller: str
    callee: str
    export: str
    binding: BindingMode
    payload_bytes: int
    start_ns: int
    end_ns: int

    @property
    def latency_ns(self) -> int:
        return self.end_ns - self.start_ns

    def csv_row(self) -> str:
        return (
            f"{self.caller},{self.callee},{self.export},{self.binding.value},"
            f"{self.payload_bytes},{self.latency_ns}"
        )


@dataclass
class CallResult:
    value: int | None
    payload: bytes | None = None


class ObjectLedger:
    """Shared objects plus their ownership/borrow/proxy bookkeeping.

    All operations are linearizable (one internal lock); copies performed by
    proxy reads/writes happen under that lock so no copy can race a destroy
    or revoke.
    """

    def __init__(self, registry: Registry):
        self._registry = registry
        self._lock = threading.RLock()
        self._storage: dict[int, Optional[bytearray]] = {}
        self._entries: dict[int, LedgerEntry] = {}
        self._bindings: dict[tuple[int, str], ProxyBinding] = {}
        self._released_tokens: set[int] = set()
        self._next_handle = 1
        self._next_token = 1

    # -- lifecycle -----------------------------------------------------------

    def create_object(self, owner: str, size: int) -> int:
        if size < 1:
            raise ZeroSize(f"object size must be >= 1, got {size}")
        self._registry.get(owner)  # raises NotFound for ghost services
        with self._lock:
            handle = self._next_handle
            self._next_handle += 1
            self._storage[handle] = bytearray(size)
            self._entries[handle] = LedgerEntry(handle=handle, owner=owner, size=size)
            return handle

    def entry(self, handle: int) -> LedgerEntry:
        with self._lock:
            entry = self._entries.get(handle)
            if entry is None:
                raise UnknownHandle(str(handle))
            return entry

    def transfer_ownership(self, handle: int, from_: str, to: str) -> None:
        with self._lock:
            entry = self.entry(handle)
            if entry.state is ObjectState.DESTROYED:
                raise AlreadyDestroyed(str(handle))
            if entry.state is not ObjectState.LIVE or entry.owner != from_:
                raise NotOwner(f"{from_!r} does not own object {handle}")
            self._registry.get(to)
            entry.owner = to

    def borrow(self, handle: int, service: str) -> BorrowToken:
        with self._lock:
            entry = self.entry(handle)
            if entry.state is not ObjectState.LIVE:
                raise AlreadyDestroyed(f"object {handle} is {entry.state.value}")
            entry.borrowers[service] += 1
            token = BorrowToken(handle=handle, service=service, token_id=self._next_token)
            self._next_token += 1
            return token

    def release(self, token: BorrowToken) -> None:
        with self._lock:
            entry = self.entry(token.handle)
            if token.token_id in self._released_tokens:
                raise DoubleRelease(f"token {token.token_id} already released")
            self._released_tokens.add(token.token_id)
            entry.borrowers[token.service] -= 1
            if entry.borrowers[token.service] <= 0:
                del entry.borrowers[token.service]
            self._maybe_destroy(entry)

    def owner_release(self, handle: int, owner: str) -> None:
        """The owner gives the object up; storage lives on until the last
        borrow is released, then is destroyed exactly once."""
        with self._lock:
            entry = self.entry(handle)
            if entry.state is ObjectState.DESTROYED:
                raise AlreadyDestroyed(str(handle))
            if entry.owner_released:
                raise DoubleRelease(f"owner already released object {handle}")
            if entry.owner != owner:
                raise NotOwner(f"{owner!r} does not own object {handle}")
            entry.owner_released = True
            self._maybe_destroy(entry)

    def _maybe_destroy(self, entry: LedgerEntry) -> None:
        if entry.state is ObjectState.DESTROYED or not entry.owner_released:
            return
        if sum(entry.borrowers.values()) == 0:
            entry.state = ObjectState.DESTROYED
            entry.destroy_calls += 1
            self._storage[entry.handle] = None
        else:
            entry.state = ObjectState.PENDING_DESTROY

    # -- proxy access ----------------------------------------------------------

    def binding_for(self, handle: int, grantee: str) -> ProxyBinding | None:
        with self._lock:
            return self._bindings.get((handle, grantee))

    def grant_proxy(self, handle: int, granter: str, grantee: str, ops) -> ProxyBinding:
        """Grant (or refresh) proxy read/write access on an object.

        The granter must be the current owner or hold an outstanding borrow.
        For a sandboxed grantee the proxy shims are installed into its
        reserved import slots; until then those slots trap UnreachableImport.
        """
        ops = frozenset(ops)
        if not ops or not ops <= {"read", "write"}:
            raise ValueError(f"ops must be a nonempty subset of {{'read', 'write'}}, got {set(ops)}")
        with self._lock:
            entry = self.entry(handle)
            if entry.state is ObjectState.DESTROYED:
                raise AlreadyDestroyed(str(handle))
            is_owner = entry.state is ObjectState.LIVE and entry.owner == granter
            if not is_owner and entry.borrowers[granter] <= 0:
                raise NotAuthorized(f"{granter!r} neither owns nor borrows object {handle}")
            try:
                record = self._registry.get(grantee)
            except Exception:
                raise UnknownService(grantee) from None
            binding = self._bindings.get((handle, grantee))
            if binding is None:
                binding = ProxyBinding(handle=handle, grantee=grantee, ops=ops)
                binding.slots = self._install_shims(record)
                self._bindings[(handle, grantee)] = binding
            else:
                binding.ops = ops
                binding.state = ProxyState.ACTIVE
            return binding

    def revoke_proxy(self, binding: ProxyBinding) -> None:
        with self._lock:
            binding.state = ProxyState.REVOKED

    def _install_shims(self, record: ServiceRecord) -> tuple[int, ...]:
        inst = record.instance
        if not isinstance(inst, ServiceInstance):
            return ()
        grantee = record.name
        installed = []
        for i, name in enumerate(inst.module.imports):
            if name == PROXY_READ_IMPORT and inst.import_bindings[i] is None:
                inst.import_bindings[i] = self._make_shim(grantee, write=False)
                installed.append(i)
            elif name == PROXY_WRITE_IMPORT and inst.import_bindings[i] is None:
                inst.import_bindings[i] = self._make_shim(grantee, write=True)
                installed.append(i)
        return tuple(installed)

    def _make_shim(self, grantee: str, *, write: bool):
        def shim(args: tuple[int, ...]) -> int:
            handle, obj_off, mem_off, length = (to_signed(a) for a in args)
            binding = self.binding_for(handle, grantee)
            if binding is None:
                with self._lock:
                    known = handle in self._entries
                return PROXY_NOT_AUTHORIZED if known else PROXY_UNKNOWN_HANDLE
            try:
                if write:
                    self.proxy_write(binding, obj_off, mem_off, length)
                else:
                    self.proxy_read(binding, obj_off, mem_off, length)
            except Revoked:
                return PROXY_REVOKED
            except NotAuthorized:
                return PROXY_NOT_AUTHORIZED
            except OutOfBounds as exc:
                return PROXY_OOB_OBJECT if exc.side == "object" else PROXY_OOB_GRANTEE
            except AlreadyDestroyed:
                return PROXY_DESTROYED
            except UnknownHandle:
                return PROXY_UNKNOWN_HANDLE
            return PROXY_OK

        return shim

    def _check_copy(self, binding: ProxyBinding, op: str, obj_off: int, mem_off: int, length: int):
        if binding.state is ProxyState.REVOKED:
            raise Revoked(f"binding for {binding.grantee!r} on object {binding.handle} revoked")
        if op not in binding.ops:
            raise NotAuthorized(f"binding for {binding.grantee!r} lacks {op!r}")
        entry = self.entry(binding.handle)
        storage = self._storage[binding.handle]
        if storage is None or entry.state is ObjectState.DESTROYED:
            raise AlreadyDestroyed(str(binding.handle))
        if length < 0:
            raise OutOfBounds("object", f"negative length {length}")
        if obj_off < 0 or obj_off + length > entry.size:
            raise OutOfBounds("object", f"[{obj_off}, {obj_off + length}) of {entry.size}")
        inst = self._registry.get(binding.grantee).instance
        mem_limit = inst.mem_size()
        if mem_off < 0 or mem_off + length > mem_limit:
            raise OutOfBounds("grantee", f"[{mem_off}, {mem_off + length}) of {mem_limit}")
        return storage, inst

    def proxy_read(self, binding: ProxyBinding, obj_off: int, mem_off: int, length: int) -> None:
        """Copy object bytes into the grantee's memory (never maps the object)."""
        with self._lock:
            storage, inst = self._check_copy(binding, "read", obj_off, mem_off, length)
            if length:
                inst.mem_write(mem_off, bytes(storage[obj_off : obj_off + length]))

    def proxy_write(self, binding: ProxyBinding, obj_off: int, mem_off: int, length: int) -> None:
        """Copy grantee memory bytes into the object."""
        with self._lock:
            storage, inst = self._check_copy(binding, "write", obj_off, mem_off, length)
            if length:
                storage[obj_off : obj_off + length] = inst.mem_read(mem_off, length)

    # -- runtime-trusted access -------------------------------------------------

    def size(self, handle: int) -> int:
        return self.entry(handle).size

    def read(self, handle: int, offset: int, length: int) -> bytes:
        with self._lock:
            entry = self.entry(handle)
            storage = self._storage[handle]
            if storage is None:
                raise AlreadyDestroyed(str(handle))
            if offset < 0 or length < 0 or offset + length > entry.size:
                raise OutOfBounds("object", f"[{offset}, {offset + length}) of {entry.size}")
            return bytes(storage[offset : offset + length])

    def write(self, handle: int, offset: int, data: bytes) -> None:
        with self._lock:
            entry = self.entry(handle)
            storage = self._storage[handle]
            if storage is None:
                raise AlreadyDestroyed(str(handle))
            if offset < 0 or offset + len(data) > entry.size:
                raise OutOfBounds("object", f"[{offset}, {offset + len(data)}) of {entry.size}")
            storage[offset : offset + len(data)] = data

    def authorized(self, handle: int, service: str) -> bool:
        with self._lock:
            entry = self.entry(handle)
            if entry.state is ObjectState.LIVE and entry.owner == service:
                return True
            return entry.borrowers[service] > 0


class NativeService:
    """Base class for trusted in-process services.

    Exported methods take one NativeCall argument and return an int (or
    None).  The scratch buffer stands in for a linear memory so proxy and
    copy-in/out bindings have a concrete destination to copy into.
    """

    scratch_bytes = 1 << 20

    def __init__(self):
        self._scratch = bytearray(self.scratch_bytes)

    def mem_size(self) -> int:
        return len(self._scratch)

    def mem_read(self, offset: int, length: int) -> bytes:
        return bytes(self._scratch[offset : offset + length])

    def mem_write(self, offset: int, data: bytes) -> None:
        self._scratch[offset : offset + len(data)] = data


class NativeCall:
    """Per-invocation context handed to native exported methods.

    ``request()`` materializes the payload per the negotiated binding mode;
    ``reply(data)`` publishes the response through the same channel.
    """

    def __init__(self, engine: CallEngine, caller: str, export: str, args: tuple[int, ...],
                 binding: BindingMode, service: NativeService,
                 payload: int | None, payload_len: int, proxy: ProxyBinding | None):
        self.caller = caller
        self.export = export
        self.args = args
        self.binding = binding
        self.payload_handle = payload
        self.payload_len = payload_len
        self._engine = engine
        self._service = service
        self._proxy = proxy
        self._reply: bytes | None = None
        self._out_len: int | None = None

    def request(self) -> bytes | None:
        if self.payload_handle is None:
            return None
        n = self.payload_len
        ledger = self._engine.ledger
        if self.binding is BindingMode.PROXY_MEDIATED:
            assert self._proxy is not None
            ledger.proxy_read(self._proxy, 0, 0, n)
            return self._service.mem_read(0, n)
        if self.binding is BindingMode.COPY_IN_OUT:
            return self._service.mem_read(0, n)  # staged copy
        return ledger.read(self.payload_handle, 0, n)  # direct: runtime hands a copy

    def reply(self, data: bytes) -> None:
        self._out_len = len(data)
        if self.payload_handle is not None and self.binding is BindingMode.PROXY_MEDIATED:
            assert self._proxy is not None
            self._service.mem_write(0, data)
            self._engine.ledger.proxy_write(self._proxy, 0, 0, len(data))
        elif self.payload_handle is not None and self.binding is BindingMode.COPY_IN_OUT:
            self._service.mem_write(0, data)
        else:
            self._reply = bytes(data)


class CallEngine:
    """Dispatches calls through table slots and records telemetry."""

    def __init__(self, registry: Registry, ledger: ObjectLedger):
        self.registry = registry
        self.ledger = ledger
        self._records: list[CallRecord] = []
        self._records_lock = threading.Lock()
        self._tls = threading.local()

    # -- public entry -----------------------------------------------------------

    def call(
        self,
        caller: str,
        table: FunctionTable,
        slot_index: int,
        args: Sequence[int] = (),
        payload: int | None = None,
    ) -> CallResult:
        """Dispatch one call through a table slot.

        DirectCall hands the callee a copy of the payload bytes; ProxyMediated
        passes the handle and scopes a read/write grant to the call;
        CopyInOut stages bytes into the callee's memory and copies the
        response back out.  A callee trap surfaces as CalleeTrapped without
        disturbing the caller's state.
        """
        if not 0 <= slot_index < len(table.slots):
            raise SlotOutOfRange(f"slot {slot_index} of {len(table.slots)}")
        slot = table.slots[slot_index]
        depth = getattr(self._tls, "depth", 0)
        if depth >= CHAIN_DEPTH_CAP:
            raise ChainDepthExceeded(f"cross-service call depth {depth}")
        self._tls.depth = depth + 1
        start = time.perf_counter_ns()
        try:
            value, out = slot.target.invoke(self, caller, slot, tuple(args), payload)
        finally:
            self._tls.depth = depth
        end = time.perf_counter_ns()
        payload_bytes = self.ledger.size(payload) if payload is not None else 0
        self._record(
            CallRecord(
                caller=caller,
                callee=table.target_service,
                export=slot.export_name,
                binding=slot.binding,
                payload_bytes=payload_bytes,
                start_ns=start,
                end_ns=end,
            )
        )
        return CallResult(value=value, payload=out)

    def call_export(
        self,
        caller: str,
        target: str,
        export: str,
        args: Sequence[int] = (),
        payload: int | None = None,
    ) -> CallResult:
        """Convenience: discover the target and call one export by name."""
        table = self.registry.discover(caller, target)
        for slot in table.slots:
            if slot.export_name == export:
                return self.call(caller, table, slot.index, args, payload)
        raise SlotOutOfRange(f"{target!r} exports no {export!r}")

    # -- dispatch internals -------------------------------------------------------

    def dispatch_export(
        self,
        record: ServiceRecord,
        export: str,
        binding: BindingMode,
        caller: str,
        args: tuple[int, ...],
        payload: int | None,
    ) -> tuple[int | None, bytes | None]:
        """Invoke one export of one service under a binding mode.

        Called by ExportTarget (and by mesh wrappers after interception).
        """
        if not record.alive:
            raise ServiceGone(record.name)
        if payload is not None and not self.ledger.authorized(payload, caller):
            raise NotAuthorized(f"{caller!r} neither owns nor borrows object {payload}")
        self.registry.enter_call(record)
        try:
            if isinstance(record.instance, ServiceInstance):
                return self._dispatch_sandboxed(record, export, binding, caller, args, payload)
            return self._dispatch_native(record, export, binding, caller, args, payload)
        finally:
            self.registry.exit_call(record)

    def _scoped_grant(self, payload: int, caller: str, callee: str):
        existing = self.ledger.binding_for(payload, callee)
        if existing is not None and existing.state is ProxyState.ACTIVE:
            return existing, False
        return self.ledger.grant_proxy(payload, caller, callee, {"read", "write"}), True

    def _dispatch_sandboxed(
        self,
        record: ServiceRecord,
        export: str,
        binding: BindingMode,
        caller: str,
        args: tuple[int, ...],
        payload: int | None,
    ) -> tuple[int | None, bytes | None]:
        inst: ServiceInstance = record.instance
        try:
            if payload is None:
                return inst.invoke(export, args), None

            size = self.ledger.size(payload)
            if binding is BindingMode.PROXY_MEDIATED:
                grant, scoped = self._scoped_grant(payload, caller, record.name)
                try:
                    value = inst.invoke(export, args + (payload, size))
                finally:
                    if scoped:
                        self.ledger.revoke_proxy(grant)
                out_len = size if value is None else to_signed(value)
                if not 0 <= out_len <= size:
                    raise BadReplyLength(f"reply of {out_len} bytes from object of {size}")
                return value, self.ledger.read(payload, 0, out_len)

            # CopyInOut (and DirectCall, should a hand-built table ask for it):
            # stage the bytes into the callee's linear memory at offset 0.
            if size > inst.mem_size():
                raise PayloadTooLarge(f"{size} bytes into memory of {inst.mem_size()}")
            inst.mem_write(0, self.ledger.read(payload, 0, size))
            value = inst.invoke(export, args + (0, size))
            out_len = size if value is None else to_signed(value)
            if not 0 <= out_len <= inst.mem_size():
                raise BadReplyLength(f"reply of {out_len} bytes from memory of {inst.mem_size()}")
            out = inst.mem_read(0, out_len)
            if out_len <= size:
                self.ledger.write(payload, 0, out)
            return value, out
        except Trap as trap:
            raise CalleeTrapped(trap.kind, str(trap)) from trap

    def _dispatch_native(
        self,
        record: ServiceRecord,
        export: str,
        binding: BindingMode,
        caller: str,
        args: tuple[int, ...],
        payload: int | None,
    ) -> tuple[int | None, bytes | None]:
        service: NativeService = record.instance
        try:
            method = getattr(service, export)
        except AttributeError:
            raise ExportNotFound(f"{record.name!r} declares but does not define {export!r}") from None
        size = self.ledger.size(payload) if payload is not None else 0
        grant = None
        scoped = False
        if payload is not None:
            if size > service.mem_size():
                raise PayloadTooLarge(f"{size} bytes into memory of {service.mem_size()}")
            if binding is BindingMode.PROXY_MEDIATED:
                grant, scoped = self._scoped_grant(payload, caller, record.name)
            elif binding is BindingMode.COPY_IN_OUT:
                service.mem_write(0, self.ledger.read(payload, 0, size))
        ctx = NativeCall(
            self, caller, export, args, binding, service, payload, size, grant
        )
        try:
            value = method(ctx)
        finally:
            if scoped and grant is not None:
                self.ledger.revoke_proxy(grant)

        if payload is None:
            return value, ctx._reply
        out_len = size if ctx._out_len is None else ctx._out_len
        if binding is BindingMode.PROXY_MEDIATED:
            return value, self.ledger.read(payload, 0, min(out_len, size))
        if binding is BindingMode.COPY_IN_OUT:
            out = service.mem_read(0, out_len)
            if out_len <= size:
                self.ledger.write(payload, 0, out)
            return value, out
        # DirectCall: the reply is the response; absent a reply the payload
        # bytes come back unchanged.
        if ctx._reply is not None:
            return value, ctx._reply
        return value, self.ledger.read(payload, 0, size)

    # -- telemetry ---------------------------------------------------------------

    def _record(self, record: CallRecord) -> None:
        with self._records_lock:
            self._records.append(record)

    def records(self) -> list[CallRecord]:
        with self._records_lock:
            return list(self._records)

    def clear_records(self) -> None:
        with self._records_lock:
            self._records.clear()

    def records_csv(self) -> str:
        header = "caller,callee,export,binding,payload_bytes,latency_ns"
        return "\n".join([header] + [r.csv_row() for r in self.records()]) + "\n"


def bind_import_slot(engine: CallEngine, caller: str, table: FunctionTable, slot_index: int):
    """Host shim for a sandboxed service's peer import: MSB args in, value out."""
    slot = table.slots[slot_index]

    def shim(args: tuple[int, ...]) -> int:
        result = engine.call(caller, table, slot.index, args)
        return 0 if result.value is None else result.value

    shim.table_slot = slot  # audit trail: the only host surface besides proxies
    return shim
