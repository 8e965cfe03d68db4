"""MSB binary image codec.

Layout (little-endian throughout):

    magic "MSB1" | u32 version=1 | u32 mem_pages | u32 max_pages
    u32 import_count | per import:  u16 len, UTF-8 name
    u32 func_count   | per function: u8 nargs, u8 nrets, u8 nlocals,
                       u32 ninstr, ninstr x { u8 opcode, i64 operand }
    u32 export_count | per export:  u16 len, UTF-8 name, u32 func_idx

``decode_module`` is the exact inverse of ``encode_module``; trailing bytes
after the export section are rejected.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from . import isa


class DecodeError(Exception):
    pass


class BadMagic(DecodeError):
    pass


class Truncated(DecodeError):
    pass


class LimitExceeded(DecodeError):
    pass


class TrailingBytes(DecodeError):
    pass


@dataclass(frozen=True)
class FunctionBody:
    nargs: int
    nrets: int
    nlocals: int
    instructions: tuple[tuple[int, int], ...]  # (opcode, signed operand)


@dataclass(frozen=True)
class ModuleImage:
    version: int
    mem_pages: int
    max_pages: int
    imports: tuple[str, ...]
    functions: tuple[FunctionBody, ...]
    exports: dict[str, int] = field(default_factory=dict)


class _Cursor:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise Truncated(f"need {size} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def take_name(self) -> str:
        (length,) = self.take("<H")
        if self.pos + length > len(self.data):
            raise Truncated(f"name of {length} bytes at offset {self.pos} runs past end")
        raw = self.data[self.pos : self.pos + length]
        self.pos += length
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(f"name at offset {self.pos - length} is not UTF-8") from exc


def decode_module(data: bytes) -> ModuleImage:
    """Decode an MSB image; raises BadMagic/Truncated/LimitExceeded/DecodeError."""
    cur = _Cursor(bytes(data))
    if len(cur.data) < 4:
        raise Truncated("shorter than magic")
    if cur.data[:4] != isa.MAGIC:
        raise BadMagic(f"expected {isa.MAGIC!r}, got {cur.data[:4]!r}")
    cur.pos = 4

    (version, mem_pages, max_pages) = cur.take("<III")
    if version != isa.VERSION:
        raise DecodeError(f"unsupported version {version}")
    if max_pages > isa.MAX_PAGES:
        raise LimitExceeded(f"max_pages {max_pages} exceeds {isa.MAX_PAGES} (4 GiB)")
    if mem_pages > max_pages:
        raise LimitExceeded(f"mem_pages {mem_pages} exceeds max_pages {max_pages}")

    (import_count,) = cur.take("<I")
    if import_count > isa.MAX_IMPORTS:
        raise LimitExceeded(f"{import_count} imports exceeds cap {isa.MAX_IMPORTS}")
    imports = tuple(cur.take_name() for _ in range(import_count))

    (func_count,) = cur.take("<I")
    if func_count > isa.MAX_FUNCTIONS:
        raise LimitExceeded(f"{func_count} functions exceeds cap {isa.MAX_FUNCTIONS}")
    functions = []
    for fi in range(func_count):
        (nargs, nrets, nlocals, ninstr) = cur.take("<BBBI")
        if nrets > 1:
            raise LimitExceeded(f"function {fi}: nrets {nrets} > 1")
        if ninstr < 1:
            raise LimitExceeded(f"function {fi}: empty body")
        if ninstr > isa.MAX_INSTRUCTIONS:
            raise LimitExceeded(f"function {fi}: {ninstr} instructions exceeds cap")
        instrs = []
        for _ in range(ninstr):
            (op, operand) = cur.take("<Bq")
            if op not in isa.OP_NAMES:
                raise DecodeError(f"function {fi}: unknown opcode 0x{op:02x}")
            instrs.append((op, operand))
        functions.append(
            FunctionBody(nargs=nargs, nrets=nrets, nlocals=nlocals, instructions=tuple(instrs))
        )

    (export_count,) = cur.take("<I")
    if export_count > isa.MAX_EXPORTS:
        raise LimitExceeded(f"{export_count} exports exceeds cap {isa.MAX_EXPORTS}")
    exports: dict[str, int] = {}
    for _ in range(export_count):
        name = cur.take_name()
        (func_idx,) = cur.take("<I")
        if func_idx >= func_count:
            raise DecodeError(f"export {name!r} references function {func_idx} of {func_count}")
        if name in exports:
            raise DecodeError(f"duplicate export {name!r}")
        exports[name] = func_idx

    if cur.pos != len(cur.data):
        raise TrailingBytes(f"{len(cur.data) - cur.pos} bytes after export section")

    return ModuleImage(
        version=version,
        mem_pages=mem_pages,
        max_pages=max_pages,
        imports=imports,
        functions=tuple(functions),
        exports=exports,
    )


def encode_module(image: ModuleImage) -> bytes:
    """Serialize a ModuleImage back to the binary layout."""
    out = bytearray(isa.MAGIC)
    out += struct.pack("<III", image.version, image.mem_pages, image.max_pages)
    out += struct.pack("<I", len(image.imports))
    for name in image.imports:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
    out += struct.pack("<I", len(image.functions))
    for f in image.functions:
        out += struct.pack("<BBBI", f.nargs, f.nrets, f.nlocals, len(f.instructions))
        for op, operand in f.instructions:
            out += struct.pack("<Bq", op, operand)
    out += struct.pack("<I", len(image.exports))
    for name, idx in image.exports.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<I", idx)
    return bytes(out)
