"""Deployment manifests: which services run, how big, how trusted, how wired.

A manifest is a JSON document declaring services (name, kind, memory limits,
toolchain, imports), mesh policies per caller/callee edge, and a toolchain
allowlist used as a stand-in for supply-chain attestation.  Parsing is strict:
unknown keys are rejected and every schema failure carries a JSON-pointer path.
Referential checks (dangling imports, dangling mesh endpoints) are reported by
``validate_manifest`` as data rather than raised, so callers can show all
problems at once.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum

NAME_RE = re.compile(r"^[a-z0-9_.-]+$")

# Sandboxed services address at most 4 GiB of linear memory.
SANDBOX_MEMORY_CAP = 1 << 32

SERVICE_KEYS = {"name", "kind", "image", "memory_bytes", "max_memory_bytes", "toolchain", "imports"}
MESH_KEYS = {"caller", "callee", "policy", "proxy", "elide_after"}
TOP_KEYS = {"services", "mesh", "allowlist"}
MESH_POLICIES = ("passthrough", "intercept", "elide_after")


class ManifestError(Exception):
    pass


class ManifestSyntaxError(ManifestError):
    """The document is not well-formed JSON."""


class SchemaError(ManifestError):
    """The document is JSON but violates the manifest schema.

    ``pointer`` is a JSON-pointer to the offending element.
    """

    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer}: {message}")
        self.pointer = pointer


class ServiceKind(Enum):
    SANDBOXED = "sandboxed"
    NATIVE = "native"


class SafetyClass(Enum):
    # Trusted native code: the host language polices individual objects.
    OBJECT_GRANULAR = "object_granular"
    # Sandboxed code: isolation holds only at the granularity of its region.
    REGION_GRANULAR = "region_granular"


def safety_class_of(kind: ServiceKind) -> SafetyClass:
    return SafetyClass.OBJECT_GRANULAR if kind is ServiceKind.NATIVE else SafetyClass.REGION_GRANULAR


@dataclass(frozen=True)
class ServiceDescriptor:
    name: str
    kind: ServiceKind
    image_path: str | None
    memory_bytes: int
    max_memory_bytes: int
    toolchain: str
    imports: tuple[str, ...]

    @property
    def safety_class(self) -> SafetyClass:
        return safety_class_of(self.kind)


@dataclass(frozen=True)
class MeshPolicyDecl:
    caller: str
    callee: str
    policy: str
    proxy: str | None = None
    elide_after: int | None = None


@dataclass(frozen=True)
class Manifest:
    services: tuple[ServiceDescriptor, ...]
    mesh_policies: tuple[MeshPolicyDecl, ...]
    allowlist: tuple[str, ...]

    def service(self, name: str) -> ServiceDescriptor:
        for d in self.services:
            if d.name == name:
                return d
        raise KeyError(name)


@dataclass(frozen=True)
class Violation:
    code: str
    subject: str
    detail: str


def _expect(value, typ, ptr: str, what: str):
    # bool is an int subclass; an explicit check keeps `true` out of integer fields
    if typ is int and isinstance(value, bool):
        raise SchemaError(ptr, f"{what} must be an integer")
    if not isinstance(value, typ):
        raise SchemaError(ptr, f"{what} must be {typ.__name__}")
    return value


def _parse_service(obj, ptr: str) -> ServiceDescriptor:
    _expect(obj, dict, ptr, "service")
    unknown = set(obj) - SERVICE_KEYS
    if unknown:
        raise SchemaError(f"{ptr}/{sorted(unknown)[0]}", "unknown service key")
    for key in ("name", "kind", "memory_bytes", "max_memory_bytes", "toolchain", "imports"):
        if key not in obj:
            raise SchemaError(f"{ptr}/{key}", "missing required key")

    name = _expect(obj["name"], str, f"{ptr}/name", "name")
    if not NAME_RE.match(name):
        raise SchemaError(f"{ptr}/name", f"invalid service name {name!r}")

    kind_str = _expect(obj["kind"], str, f"{ptr}/kind", "kind")
    try:
        kind = ServiceKind(kind_str)
    except ValueError:
        raise SchemaError(f"{ptr}/kind", f"kind must be 'sandboxed' or 'native', got {kind_str!r}") from None

    if kind is ServiceKind.SANDBOXED:
        if "image" not in obj:
            raise SchemaError(f"{ptr}/image", "sandboxed service requires image")
        image = _expect(obj["image"], str, f"{ptr}/image", "image")
    else:
        if "image" in obj:
            raise SchemaError(f"{ptr}/image", "native service must not declare image")
        image = None

    memory = _expect(obj["memory_bytes"], int, f"{ptr}/memory_bytes", "memory_bytes")
    max_memory = _expect(obj["max_memory_bytes"], int, f"{ptr}/max_memory_bytes", "max_memory_bytes")
    if memory < 0:
        raise SchemaError(f"{ptr}/memory_bytes", "memory_bytes must be >= 0")
    if memory > max_memory:
        raise SchemaError(f"{ptr}/memory_bytes", "memory_bytes exceeds max_memory_bytes")
    if kind is ServiceKind.SANDBOXED and max_memory > SANDBOX_MEMORY_CAP:
        raise SchemaError(f"{ptr}/max_memory_bytes", "exceeds 4 GiB cap for sandboxed service")

    toolchain = _expect(obj["toolchain"], str, f"{ptr}/toolchain", "toolchain")
    imports_raw = _expect(obj["imports"], list, f"{ptr}/imports", "imports")
    imports = []
    for i, item in enumerate(imports_raw):
        imports.append(_expect(item, str, f"{ptr}/imports/{i}", "import"))

    return ServiceDescriptor(
        name=name,
        kind=kind,
        image_path=image,
        memory_bytes=memory,
        max_memory_bytes=max_memory,
        toolchain=toolchain,
        imports=tuple(imports),
    )


def _parse_mesh(obj, ptr: str) -> MeshPolicyDecl:
    _expect(obj, dict, ptr, "mesh policy")
    unknown = set(obj) - MESH_KEYS
    if unknown:
        raise SchemaError(f"{ptr}/{sorted(unknown)[0]}", "unknown mesh key")
    for key in ("caller", "callee", "policy"):
        if key not in obj:
            raise SchemaError(f"{ptr}/{key}", "missing required key")

    caller = _expect(obj["caller"], str, f"{ptr}/caller", "caller")
    callee = _expect(obj["callee"], str, f"{ptr}/callee", "callee")
    policy = _expect(obj["policy"], str, f"{ptr}/policy", "policy")
    if policy not in MESH_POLICIES:
        raise SchemaError(f"{ptr}/policy", f"policy must be one of {MESH_POLICIES}, got {policy!r}")

    proxy = None
    elide_after = None
    if policy in ("intercept", "elide_after"):
        if "proxy" not in obj:
            raise SchemaError(f"{ptr}/proxy", f"proxy required for {policy} policy")
        proxy = _expect(obj["proxy"], str, f"{ptr}/proxy", "proxy")
    elif "proxy" in obj:
        raise SchemaError(f"{ptr}/proxy", "proxy only valid for intercept/elide_after")

    if policy == "elide_after":
        if "elide_after" not in obj:
            raise SchemaError(f"{ptr}/elide_after", "elide_after threshold required")
        elide_after = _expect(obj["elide_after"], int, f"{ptr}/elide_after", "elide_after")
        if elide_after < 1:
            raise SchemaError(f"{ptr}/elide_after", "elide_after must be >= 1")
    elif "elide_after" in obj:
        raise SchemaError(f"{ptr}/elide_after", "elide_after only valid for elide_after policy")

    return MeshPolicyDecl(caller=caller, callee=callee, policy=policy, proxy=proxy, elide_after=elide_after)


def parse_manifest(text: str) -> Manifest:
    """Parse a UTF-8 JSON manifest document into a Manifest.

    Raises ManifestSyntaxError on malformed JSON and SchemaError (with a
    JSON-pointer) on any schema violation, including duplicate service names.
    Referential integrity is not checked here; see validate_manifest.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestSyntaxError(f"malformed JSON: {exc}") from exc

    _expect(doc, dict, "", "manifest")
    unknown = set(doc) - TOP_KEYS
    if unknown:
        raise SchemaError(f"/{sorted(unknown)[0]}", "unknown top-level key")
    for key in TOP_KEYS:
        if key not in doc:
            raise SchemaError(f"/{key}", "missing required key")

    services_raw = _expect(doc["services"], list, "/services", "services")
    services = [_parse_service(obj, f"/services/{i}") for i, obj in enumerate(services_raw)]

    seen: set[str] = set()
    for i, d in enumerate(services):
        if d.name in seen:
            raise SchemaError(f"/services/{i}/name", f"duplicate service name {d.name!r}")
        seen.add(d.name)

    mesh_raw = _expect(doc["mesh"], list, "/mesh", "mesh")
    mesh = [_parse_mesh(obj, f"/mesh/{i}") for i, obj in enumerate(mesh_raw)]

    allow_raw = _expect(doc["allowlist"], list, "/allowlist", "allowlist")
    allowlist = [
        _expect(item, str, f"/allowlist/{i}", "allowlist entry") for i, item in enumerate(allow_raw)
    ]

    return Manifest(services=tuple(services), mesh_policies=tuple(mesh), allowlist=tuple(allowlist))


def serialize_manifest(m: Manifest) -> str:
    """Inverse of parse_manifest for valid manifests (round-trips exactly)."""
    services = []
    for d in m.services:
        obj: dict = {"name": d.name, "kind": d.kind.value}
        if d.kind is ServiceKind.SANDBOXED:
            obj["image"] = d.image_path
        obj.update(
            memory_bytes=d.memory_bytes,
            max_memory_bytes=d.max_memory_bytes,
            toolchain=d.toolchain,
            imports=list(d.imports),
        )
        services.append(obj)
    mesh = []
    for p in m.mesh_policies:
        obj = {"caller": p.caller, "callee": p.callee, "policy": p.policy}
        if p.proxy is not None:
            obj["proxy"] = p.proxy
        if p.elide_after is not None:
            obj["elide_after"] = p.elide_after
        mesh.append(obj)
    return json.dumps({"services": services, "mesh": mesh, "allowlist": list(m.allowlist)}, indent=2)


def validate_manifest(m: Manifest) -> list[Violation]:
    """Return every referential/bounds violation in the manifest (empty = valid)."""
    violations: list[Violation] = []
    names: set[str] = set()
    for d in m.services:
        if d.name in names:
            violations.append(Violation("duplicate_name", d.name, "service name declared twice"))
        names.add(d.name)

    for d in m.services:
        for imp in d.imports:
            if imp not in names:
                violations.append(
                    Violation("dangling_import", d.name, f"imports undeclared service {imp!r}")
                )
        if d.memory_bytes > d.max_memory_bytes:
            violations.append(
                Violation("memory_bound", d.name, "memory_bytes exceeds max_memory_bytes")
            )
        if d.kind is ServiceKind.SANDBOXED and d.max_memory_bytes > SANDBOX_MEMORY_CAP:
            violations.append(
                Violation("memory_cap", d.name, "max_memory_bytes exceeds 4 GiB sandbox cap")
            )

    for i, p in enumerate(m.mesh_policies):
        edge = f"mesh[{i}] {p.caller}->{p.callee}"
        if p.caller not in names:
            violations.append(
                Violation("dangling_mesh_endpoint", edge, f"caller {p.caller!r} undeclared")
            )
        if p.callee not in names:
            violations.append(
                Violation("dangling_mesh_endpoint", edge, f"callee {p.callee!r} undeclared")
            )
        if p.proxy is not None and p.proxy not in names:
            violations.append(
                Violation("dangling_mesh_endpoint", edge, f"proxy {p.proxy!r} undeclared")
            )

    return violations


def verify_provenance(d: ServiceDescriptor, allowlist: list[str] | tuple[str, ...]) -> bool:
    """True iff the descriptor's toolchain is an exact member of the allowlist.

    An empty allowlist rejects everything (reject-by-default); matching is
    case-sensitive.
    """
    return d.toolchain in tuple(allowlist)
