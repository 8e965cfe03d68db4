"""MSB execution: instantiation and the bounds-checked interpreter.

Every load/store checks ``0 <= addr`` and ``addr + 8 <= cur_pages * 65536``
before touching memory, so a running module can never observe or mutate
bytes outside its own region.  Traps abort only the current invocation; the
instance and the rest of the runtime stay serviceable.

Host functions bound to import slots receive a tuple of u64 argument values
and return one integer.  An unbound slot traps with UnreachableImport.
"""

from __future__ import annotations

import threading
from enum import Enum
from typing import Callable, Optional, Sequence

from ..sasmem import Region
from . import isa
from .verify import VerifiedModule

HostFn = Callable[[tuple[int, ...]], int]


class SandboxError(Exception):
    pass


class ExportNotFound(SandboxError):
    pass


class ArityMismatch(SandboxError):
    pass


class BindingArity(SandboxError):
    pass


class RegionTooSmall(SandboxError):
    pass


class RegionInUse(SandboxError):
    pass


class FuelExhausted(SandboxError):
    """Step budget exceeded; used to bound adversarial or mutated inputs."""


class TrapKind(Enum):
    OUT_OF_BOUNDS = "OutOfBounds"
    STACK_OVERFLOW = "StackOverflow"
    CALL_DEPTH_EXCEEDED = "CallDepthExceeded"
    UNREACHABLE_IMPORT = "UnreachableImport"
    GROW_FAILED = "GrowFailed"  # reserved
    DIV_BY_ZERO = "DivByZero"  # reserved; no division opcode yet


class Trap(Exception):
    def __init__(self, kind: TrapKind, detail: str = ""):
        super().__init__(f"{kind.value}{': ' + detail if detail else ''}")
        self.kind = kind


class ServiceInstance:
    """A verified module bound to a memory region and import slots.

    One invocation runs at a time (internal lock); distinct instances may
    run concurrently.  ``touched`` collects (offset, length, bound) for every
    memory access when tracing is enabled.
    """

    def __init__(
        self,
        module: VerifiedModule,
        region: Region,
        bindings: list[Optional[HostFn]],
        *,
        trace_touched: bool = False,
        name: str | None = None,
    ):
        self.module = module
        self.region = region
        self.cur_pages = module.image.mem_pages
        self.import_bindings = bindings
        self.name = name
        self.lock = threading.RLock()
        self.touched: list[tuple[int, int, int]] | None = [] if trace_touched else None
        self._view = region.view()

    # -- uniform memory surface (shared with native services) ---------------

    def mem_size(self) -> int:
        return self.cur_pages * isa.PAGE_SIZE

    def mem_read(self, offset: int, length: int) -> bytes:
        limit = self.cur_pages * isa.PAGE_SIZE
        if offset < 0 or length < 0 or offset + length > limit:
            raise Trap(TrapKind.OUT_OF_BOUNDS, f"host read [{offset}, {offset + length}) of {limit}")
        return bytes(self._view[offset : offset + length])

    def mem_write(self, offset: int, data: bytes) -> None:
        limit = self.cur_pages * isa.PAGE_SIZE
        if offset < 0 or offset + len(data) > limit:
            raise Trap(TrapKind.OUT_OF_BOUNDS, f"host write [{offset}, {offset + len(data)}) of {limit}")
        self._view[offset : offset + len(data)] = data

    def mem_grow(self, delta_pages: int) -> int:
        """Grow linear memory by delta pages; returns the previous page count
        or -1 when the growth would exceed max_pages.  New pages are zeroed."""
        if delta_pages < 0:
            raise ValueError("delta_pages must be >= 0")
        prev = self.cur_pages
        new = prev + delta_pages
        if new > self.module.image.max_pages:
            return -1
        if delta_pages:
            self._view[prev * isa.PAGE_SIZE : new * isa.PAGE_SIZE] = bytes(
                delta_pages * isa.PAGE_SIZE
            )
            self.cur_pages = new
        return prev

    # -- execution -----------------------------------------------------------

    def invoke(
        self, export: str, args: Sequence[int] = (), *, max_steps: int | None = None
    ) -> int | None:
        """Run an exported function to completion; returns its result value
        (None for nrets=0) or raises Trap."""
        with self.lock:
            return self._run(export, args, max_steps)

    def _run(self, export: str, args: Sequence[int], max_steps: int | None) -> int | None:
        image = self.module.image
        try:
            fidx = image.exports[export]
        except KeyError:
            raise ExportNotFound(export) from None
        func = image.functions[fidx]
        if len(args) != func.nargs:
            raise ArityMismatch(f"{export!r} takes {func.nargs} args, got {len(args)}")

        MASK = isa.U64_MASK
        PAGE = isa.PAGE_SIZE
        view = self._view
        touched = self.touched
        arities = self.module.import_arities
        functions = image.functions

        stack: list[int] = []
        # frame: [function, locals, pc, stack base]
        frames: list[list] = [[func, [a & MASK for a in args] + [0] * func.nlocals, 0, 0]]
        steps = 0

        while frames:
            fr = frames[-1]
            f, loc, pc, base = fr[0], fr[1], fr[2], fr[3]
            instrs = f.instructions

            while True:
                op, arg = instrs[pc]
                steps += 1
                if max_steps is not None and steps > max_steps:
                    fr[2] = pc
                    raise FuelExhausted(f"exceeded {max_steps} steps")

                if op == isa.OP_CONST:
                    if len(stack) >= isa.STACK_CAP:
                        raise Trap(TrapKind.STACK_OVERFLOW)
                    stack.append(arg & MASK)
                    pc += 1
                elif op == isa.OP_ADD:
                    b = stack.pop()
                    stack[-1] = (stack[-1] + b) & MASK
                    pc += 1
                elif op == isa.OP_SUB:
                    b = stack.pop()
                    stack[-1] = (stack[-1] - b) & MASK
                    pc += 1
                elif op == isa.OP_MUL:
                    b = stack.pop()
                    stack[-1] = (stack[-1] * b) & MASK
                    pc += 1
                elif op == isa.OP_AND:
                    b = stack.pop()
                    stack[-1] &= b
                    pc += 1
                elif op == isa.OP_OR:
                    b = stack.pop()
                    stack[-1] |= b
                    pc += 1
                elif op == isa.OP_XOR:
                    b = stack.pop()
                    stack[-1] ^= b
                    pc += 1
                elif op == isa.OP_EQ:
                    b = stack.pop()
                    stack[-1] = 1 if stack[-1] == b else 0
                    pc += 1
                elif op == isa.OP_LT_S:
                    b = isa.to_signed(stack.pop())
                    stack[-1] = 1 if isa.to_signed(stack[-1]) < b else 0
                    pc += 1
                elif op == isa.OP_LOAD:
                    addr = isa.to_signed(stack[-1])
                    limit = self.cur_pages * PAGE
                    if addr < 0 or addr + 8 > limit:
                        raise Trap(TrapKind.OUT_OF_BOUNDS, f"load at {addr} of {limit}")
                    if touched is not None:
                        touched.append((addr, 8, limit))
                    stack[-1] = int.from_bytes(view[addr : addr + 8], "little")
                    pc += 1
                elif op == isa.OP_STORE:
                    value = stack.pop()
                    addr = isa.to_signed(stack.pop())
                    limit = self.cur_pages * PAGE
                    if addr < 0 or addr + 8 > limit:
                        raise Trap(TrapKind.OUT_OF_BOUNDS, f"store at {addr} of {limit}")
                    if touched is not None:
                        touched.append((addr, 8, limit))
                    view[addr : addr + 8] = value.to_bytes(8, "little")
                    pc += 1
                elif op == isa.OP_LOCAL_GET:
                    if len(stack) >= isa.STACK_CAP:
                        raise Trap(TrapKind.STACK_OVERFLOW)
                    stack.append(loc[arg])
                    pc += 1
                elif op == isa.OP_LOCAL_SET:
                    loc[arg] = stack.pop()
                    pc += 1
                elif op == isa.OP_BR:
                    pc = arg
                elif op == isa.OP_BR_IF:
                    pc = arg if stack.pop() != 0 else pc + 1
                elif op == isa.OP_CALL:
                    if len(frames) >= isa.CALL_DEPTH_CAP:
                        raise Trap(TrapKind.CALL_DEPTH_EXCEEDED, f"at depth {len(frames)}")
                    callee = functions[arg]
                    if callee.nargs:
                        callee_args = stack[-callee.nargs :]
                        del stack[-callee.nargs :]
                    else:
                        callee_args = []
                    fr[2] = pc + 1
                    frames.append([callee, callee_args + [0] * callee.nlocals, 0, len(stack)])
                    break
                elif op == isa.OP_CALL_IMPORT:
                    host = self.import_bindings[arg]
                    if host is None:
                        raise Trap(TrapKind.UNREACHABLE_IMPORT, f"import slot {arg} unbound")
                    arity = arities[arg]
                    if arity:
                        host_args = tuple(stack[-arity:])
                        del stack[-arity:]
                    else:
                        host_args = ()
                    result = host(host_args)
                    if len(stack) >= isa.STACK_CAP:
                        raise Trap(TrapKind.STACK_OVERFLOW)
                    stack.append((result or 0) & MASK)
                    pc += 1
                elif op == isa.OP_RET:
                    ret = stack[-1] if f.nrets else None
                    del stack[base:]
                    frames.pop()
                    if not frames:
                        return ret
                    if f.nrets:
                        stack.append(ret)
                    break
                elif op == isa.OP_MEM_SIZE:
                    if len(stack) >= isa.STACK_CAP:
                        raise Trap(TrapKind.STACK_OVERFLOW)
                    stack.append(self.cur_pages)
                    pc += 1
                elif op == isa.OP_MEM_GROW:
                    delta = stack[-1]
                    if self.cur_pages + delta > self.module.image.max_pages:
                        stack[-1] = (-1) & MASK
                    else:
                        stack[-1] = self.mem_grow(delta)
                    pc += 1
                else:  # pragma: no cover - decode rejects unknown opcodes
                    raise SandboxError(f"unknown opcode 0x{op:02x}")

        return None  # pragma: no cover


def instantiate(
    module: VerifiedModule,
    bindings: Sequence[Optional[HostFn]],
    region: Region,
    *,
    trace_touched: bool = False,
    name: str | None = None,
) -> ServiceInstance:
    """Bind a verified module to a region and import slots.

    The region must cover max_pages and not already back another instance;
    the initial mem_pages are zeroed.  ``bindings`` must supply one slot per
    import, in import order (slots may be None until installed).
    """
    image = module.image
    if len(bindings) != len(image.imports):
        raise BindingArity(f"{len(image.imports)} imports, {len(bindings)} binding slots")
    need = image.max_pages * isa.PAGE_SIZE
    if region.length < need:
        raise RegionTooSmall(f"region of {region.length} bytes, module needs {need}")
    if region.claimed_by is not None:
        raise RegionInUse(f"region already backs {region.claimed_by!r}")
    region.claimed_by = name or f"instance-{id(module):x}"
    init = image.mem_pages * isa.PAGE_SIZE
    if init:
        region.view()[:init] = bytes(init)
    return ServiceInstance(
        module, region, list(bindings), trace_touched=trace_touched, name=name
    )


def invoke(
    inst: ServiceInstance, export: str, args: Sequence[int] = (), *, max_steps: int | None = None
) -> int | None:
    return inst.invoke(export, args, max_steps=max_steps)


def mem_grow(inst: ServiceInstance, delta_pages: int) -> int:
    return inst.mem_grow(delta_pages)
