"""Static verification of MSB images.

A module is accepted only when every rule below holds for every function:

  (a) br/br_if operands are instruction indices within the same function;
  (b) call operands name existing functions;
  (c) call_import operands name existing import slots;
  (d) local.get/local.set operands index declared args+locals;
  (e) a worklist pass over the instruction graph assigns every instruction
      exactly one operand-stack entry depth, never pops an empty stack, and
      reaches every ret at depth == nrets (so no path falls off the end and
      no instruction is dead);
  (f) module limits are within the format caps.

Import arity convention: an import named ``foo/N`` (N in 0..8) takes N
arguments; without the suffix it takes none.  Every import returns exactly
one value.  The suffix lives in the name so the fixed binary layout needs no
signature section.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import isa
from .image import FunctionBody, ModuleImage


class VerifyError(Exception):
    def __init__(self, rule: str, func_index: int, instr_index: int, message: str):
        super().__init__(f"rule ({rule}) at function {func_index} instr {instr_index}: {message}")
        self.rule = rule
        self.func_index = func_index
        self.instr_index = instr_index


@dataclass(frozen=True)
class VerifiedModule:
    """A ModuleImage that passed verification, with per-function entry depths
    and resolved import arities."""

    image: ModuleImage
    entry_depths: tuple[tuple[int, ...], ...]
    import_arities: tuple[int, ...]

    @property
    def exports(self) -> dict[str, int]:
        return self.image.exports

    @property
    def functions(self) -> tuple[FunctionBody, ...]:
        return self.image.functions

    @property
    def imports(self) -> tuple[str, ...]:
        return self.image.imports


def import_arity(name: str) -> int:
    """Arity declared by a ``/N`` name suffix; absent or malformed means 0."""
    head, sep, tail = name.rpartition("/")
    if sep and tail.isascii() and tail.isdigit():
        return int(tail)
    return 0


def _check_limits(image: ModuleImage) -> None:
    if image.max_pages > isa.MAX_PAGES:
        raise VerifyError("f", -1, -1, f"max_pages {image.max_pages} exceeds {isa.MAX_PAGES}")
    if image.mem_pages > image.max_pages:
        raise VerifyError("f", -1, -1, "mem_pages exceeds max_pages")
    if len(image.imports) > isa.MAX_IMPORTS:
        raise VerifyError("f", -1, -1, "too many imports")
    if len(image.functions) > isa.MAX_FUNCTIONS:
        raise VerifyError("f", -1, -1, "too many functions")
    for name, idx in image.exports.items():
        if not 0 <= idx < len(image.functions):
            raise VerifyError("f", idx, -1, f"export {name!r} references missing function")
    for fi, f in enumerate(image.functions):
        if f.nrets not in (0, 1):
            raise VerifyError("f", fi, -1, f"nrets {f.nrets} not in {{0, 1}}")
        if not f.instructions:
            raise VerifyError("f", fi, -1, "empty function body")
        if len(f.instructions) > isa.MAX_INSTRUCTIONS:
            raise VerifyError("f", fi, -1, "function body over instruction cap")


def _verify_function(
    image: ModuleImage, arities: tuple[int, ...], fi: int, f: FunctionBody
) -> tuple[int, ...]:
    n = len(f.instructions)
    local_slots = f.nargs + f.nlocals
    depths: list[int | None] = [None] * n
    depths[0] = 0
    work = [0]

    while work:
        i = work.pop()
        d = depths[i]
        assert d is not None
        op, arg = f.instructions[i]

        if op == isa.OP_CALL:
            if not 0 <= arg < len(image.functions):
                raise VerifyError("b", fi, i, f"call target {arg} of {len(image.functions)} functions")
            callee = image.functions[arg]
            pops, pushes = callee.nargs, callee.nrets
        elif op == isa.OP_CALL_IMPORT:
            if not 0 <= arg < len(image.imports):
                raise VerifyError("c", fi, i, f"import slot {arg} of {len(image.imports)} imports")
            pops, pushes = arities[arg], 1
        else:
            pops, pushes = isa.FIXED_EFFECTS[op]

        if op in (isa.OP_LOCAL_GET, isa.OP_LOCAL_SET) and not 0 <= arg < local_slots:
            raise VerifyError("d", fi, i, f"local {arg} of {local_slots} slots")
        if op in (isa.OP_BR, isa.OP_BR_IF) and not 0 <= arg < n:
            raise VerifyError("a", fi, i, f"branch target {arg} of {n} instructions")

        if d < pops:
            raise VerifyError("e", fi, i, f"pop of {pops} on stack depth {d}")
        nd = d - pops + pushes

        if op == isa.OP_RET:
            if d != f.nrets:
                raise VerifyError("e", fi, i, f"ret at depth {d}, expected nrets {f.nrets}")
            continue
        if op == isa.OP_BR:
            succs = (arg,)
        elif op == isa.OP_BR_IF:
            succs = (arg, i + 1)
        else:
            succs = (i + 1,)

        for s in succs:
            if s >= n:
                raise VerifyError("e", fi, i, "execution falls off the end of the function")
            if depths[s] is None:
                depths[s] = nd
                work.append(s)
            elif depths[s] != nd:
                raise VerifyError("e", fi, s, f"entry depth conflict: {depths[s]} vs {nd}")

    for i, d in enumerate(depths):
        if d is None:
            raise VerifyError("e", fi, i, "unreachable instruction")
    return tuple(depths)  # type: ignore[arg-type]


def verify_module(image: ModuleImage) -> VerifiedModule:
    """Verify every rule; returns the image annotated with entry depths."""
    _check_limits(image)
    arities = tuple(import_arity(name) for name in image.imports)
    for ii, a in enumerate(arities):
        if a > isa.MAX_IMPORT_ARGS:
            raise VerifyError("f", -1, ii, f"import {image.imports[ii]!r} declares {a} args (max {isa.MAX_IMPORT_ARGS})")
    entry_depths = tuple(
        _verify_function(image, arities, fi, f) for fi, f in enumerate(image.functions)
    )
    return VerifiedModule(image=image, entry_depths=entry_depths, import_arities=arities)
