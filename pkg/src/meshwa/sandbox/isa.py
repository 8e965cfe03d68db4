"""Minimal Service Bytecode (MSB) instruction set and limits.

MSB is a region-granular sandbox format: one linear memory per module,
software bounds checks on every access, and branch/call targets validated
before execution.  Instructions are fixed-width (1-byte opcode + 8-byte
signed operand) so every instruction index is a valid landing target.
"""

from __future__ import annotations

MAGIC = b"MSB1"
VERSION = 1

PAGE_SIZE = 65536
MAX_PAGES = 65536  # 4 GiB linear-memory ceiling

STACK_CAP = 4096  # operand-stack cells, shared across frames
CALL_DEPTH_CAP = 512  # live frames per invocation

# Decoder caps; anything past these is rejected as hostile or corrupt.
MAX_IMPORTS = 4096
MAX_FUNCTIONS = 65536
MAX_EXPORTS = 65536
MAX_INSTRUCTIONS = 1 << 20  # per function
MAX_IMPORT_ARGS = 8

OP_CONST = 0x01
OP_ADD = 0x02
OP_SUB = 0x03
OP_MUL = 0x04
OP_AND = 0x05
OP_OR = 0x06
OP_XOR = 0x07
OP_EQ = 0x08
OP_LT_S = 0x09
OP_LOAD = 0x0A
OP_STORE = 0x0B
OP_LOCAL_GET = 0x0C
OP_LOCAL_SET = 0x0D
OP_BR = 0x0E
OP_BR_IF = 0x0F
OP_CALL = 0x10
OP_CALL_IMPORT = 0x11
OP_RET = 0x12
OP_MEM_SIZE = 0x13
OP_MEM_GROW = 0x14

OP_NAMES = {
    OP_CONST: "const",
    OP_ADD: "add",
    OP_SUB: "sub",
    OP_MUL: "mul",
    OP_AND: "and",
    OP_OR: "or",
    OP_XOR: "xor",
    OP_EQ: "eq",
    OP_LT_S: "lt_s",
    OP_LOAD: "load.i64",
    OP_STORE: "store.i64",
    OP_LOCAL_GET: "local.get",
    OP_LOCAL_SET: "local.set",
    OP_BR: "br",
    OP_BR_IF: "br_if",
    OP_CALL: "call",
    OP_CALL_IMPORT: "call_import",
    OP_RET: "ret",
    OP_MEM_SIZE: "mem.size",
    OP_MEM_GROW: "mem.grow",
}
NAME_OPS = {name: op for op, name in OP_NAMES.items()}

# Stack effect (pops, pushes) for opcodes with a fixed signature; call and
# call_import depend on the target and are resolved by the verifier.
FIXED_EFFECTS = {
    OP_CONST: (0, 1),
    OP_ADD: (2, 1),
    OP_SUB: (2, 1),
    OP_MUL: (2, 1),
    OP_AND: (2, 1),
    OP_OR: (2, 1),
    OP_XOR: (2, 1),
    OP_EQ: (2, 1),
    OP_LT_S: (2, 1),
    OP_LOAD: (1, 1),
    OP_STORE: (2, 0),
    OP_LOCAL_GET: (0, 1),
    OP_LOCAL_SET: (1, 0),
    OP_BR: (0, 0),
    OP_BR_IF: (1, 0),
    OP_RET: (0, 0),
    OP_MEM_SIZE: (0, 1),
    OP_MEM_GROW: (1, 1),
}

U64_MASK = (1 << 64) - 1
SIGN_BIT = 1 << 63


def to_signed(v: int) -> int:
    return v - (1 << 64) if v & SIGN_BIT else v


def to_unsigned(v: int) -> int:
    return v & U64_MASK
