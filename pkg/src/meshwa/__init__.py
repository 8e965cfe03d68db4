"""meshwa: a single-address-space, multi-service runtime.

Mutually isolated services share one process: sandboxed services run verified
MSB bytecode confined to buddy-allocated regions, trusted native services run
as plain objects, and all cross-service communication is a function call
through discovered tables — optionally observed by an in-process mesh proxy
that can elide itself.  The bench package quantifies the communication-cost
gap against a conventional process-per-service + sidecar deployment.
"""

from .manifest import (
    Manifest,
    ManifestError,
    SafetyClass,
    SchemaError,
    ServiceDescriptor,
    ServiceKind,
    Violation,
    parse_manifest,
    serialize_manifest,
    validate_manifest,
    verify_provenance,
)
from .registry import BindingMode, FunctionTable, Registry, TableSlot, negotiate
from .runtime import Runtime
from .xcall import CallEngine, CallResult, NativeCall, NativeService, ObjectLedger
from .mesh import Mesh, MeshPolicy

__version__ = "0.1.0"

__all__ = [
    "Manifest",
    "ManifestError",
    "SafetyClass",
    "SchemaError",
    "ServiceDescriptor",
    "ServiceKind",
    "Violation",
    "parse_manifest",
    "serialize_manifest",
    "validate_manifest",
    "verify_provenance",
    "BindingMode",
    "FunctionTable",
    "Registry",
    "TableSlot",
    "negotiate",
    "Runtime",
    "CallEngine",
    "CallResult",
    "NativeCall",
    "NativeService",
    "ObjectLedger",
    "Mesh",
    "MeshPolicy",
    "__version__",
]
