"""Tiny line assembler for building MSB images in tests and demos.

Not a user-facing toolchain: one mnemonic per statement (newline or ';'
separated), decimal or hex operands, '#' comments.  Mnemonics follow the
canonical opcode names (``const 42``, ``load.i64``, ``br_if 3`` ...).
"""

from __future__ import annotations

from . import isa
from .image import FunctionBody, ModuleImage, encode_module


class AsmError(Exception):
    pass


def assemble(text: str) -> tuple[tuple[int, int], ...]:
    """Assemble statements into (opcode, operand) pairs."""
    out: list[tuple[int, int]] = []
    for raw in text.replace(";", "\n").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        name = parts[0]
        if name not in isa.NAME_OPS:
            raise AsmError(f"unknown mnemonic {name!r}")
        op = isa.NAME_OPS[name]
        if len(parts) == 1:
            operand = 0
        elif len(parts) == 2:
            try:
                operand = int(parts[1], 0)
            except ValueError:
                raise AsmError(f"bad operand {parts[1]!r} in {line!r}") from None
        else:
            raise AsmError(f"too many tokens in {line!r}")
        out.append((op, operand))
    return tuple(out)


def func(body: str, *, nargs: int = 0, nrets: int = 1, nlocals: int = 0) -> FunctionBody:
    return FunctionBody(nargs=nargs, nrets=nrets, nlocals=nlocals, instructions=assemble(body))


def build_image(
    functions: list[FunctionBody],
    *,
    exports: dict[str, int] | None = None,
    imports: tuple[str, ...] = (),
    mem_pages: int = 1,
    max_pages: int = 1,
) -> ModuleImage:
    return ModuleImage(
        version=isa.VERSION,
        mem_pages=mem_pages,
        max_pages=max_pages,
        imports=tuple(imports),
        functions=tuple(functions),
        exports=dict(exports) if exports is not None else {"main": 0},
    )


def build_module(
    functions: list[FunctionBody],
    *,
    exports: dict[str, int] | None = None,
    imports: tuple[str, ...] = (),
    mem_pages: int = 1,
    max_pages: int = 1,
) -> bytes:
    """Assemble a whole module straight to bytes."""
    return encode_module(
        build_image(
            functions, exports=exports, imports=imports, mem_pages=mem_pages, max_pages=max_pages
        )
    )
