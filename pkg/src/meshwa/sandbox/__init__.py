"""Region-granular sandbox: the MSB bytecode format, verifier, and interpreter."""

from .image import (
    BadMagic,
    DecodeError,
    FunctionBody,
    LimitExceeded,
    ModuleImage,
    TrailingBytes,
    Truncated,
    decode_module,
    encode_module,
)
from .interp import (
    ArityMismatch,
    BindingArity,
    ExportNotFound,
    FuelExhausted,
    HostFn,
    RegionInUse,
    RegionTooSmall,
    SandboxError,
    ServiceInstance,
    Trap,
    TrapKind,
    instantiate,
    invoke,
    mem_grow,
)
from .isa import CALL_DEPTH_CAP, MAX_PAGES, PAGE_SIZE, STACK_CAP
from .verify import VerifiedModule, VerifyError, import_arity, verify_module

__all__ = [
    "BadMagic",
    "DecodeError",
    "FunctionBody",
    "LimitExceeded",
    "ModuleImage",
    "TrailingBytes",
    "Truncated",
    "decode_module",
    "encode_module",
    "ArityMismatch",
    "BindingArity",
    "ExportNotFound",
    "FuelExhausted",
    "HostFn",
    "RegionInUse",
    "RegionTooSmall",
    "SandboxError",
    "ServiceInstance",
    "Trap",
    "TrapKind",
    "instantiate",
    "invoke",
    "mem_grow",
    "CALL_DEPTH_CAP",
    "MAX_PAGES",
    "PAGE_SIZE",
    "STACK_CAP",
    "VerifiedModule",
    "VerifyError",
    "import_arity",
    "verify_module",
]
