"""Runtime assembly: one arena, one registry, one ledger, one mesh.

``Runtime.load_manifest`` takes a validated manifest to a running system:
provenance-checks every service against the allowlist, decodes and verifies
sandboxed images before anything executes, carves their regions out of the
arena, registers everything, resolves peer imports into table-slot shims,
and installs the declared mesh policies.

Sandboxed peer imports follow the ``service.export[/arity]`` naming
convention; imports under the reserved ``xcall.`` prefix stay unbound until
a proxy grant installs them.  Native services come from a small catalog keyed
by service name (falling back to the name's first dot-segment), so manifests
can deploy e.g. ``echo`` or ``observer.a`` without shipping code.
"""

from __future__ import annotations

from pathlib import Path
from typing import Callable

from . import sandbox
from .manifest import (
    Manifest,
    SafetyClass,
    ServiceDescriptor,
    ServiceKind,
    validate_manifest,
    verify_provenance,
)
from .mesh import Mesh, MeshPolicy
from .registry import BindingMode, Registry
from .sasmem import AllocatorState
from .xcall import CallEngine, NativeCall, NativeService, ObjectLedger, bind_import_slot

DEFAULT_ARENA_BYTES = 1 << 26  # 64 MiB desk-scale arena


class DeployError(Exception):
    def __init__(self, service: str, reason: str):
        super().__init__(f"service {service!r}: {reason}")
        self.service = service
        self.reason = reason


class ManifestInvalid(Exception):
    def __init__(self, violations):
        super().__init__("; ".join(f"{v.code}({v.subject}): {v.detail}" for v in violations))
        self.violations = list(violations)


class EchoService(NativeService):
    exports = ("echo",)

    def echo(self, ctx: NativeCall):
        data = ctx.request()
        if data is None:
            return 0
        ctx.reply(data)
        return len(data)


class NullService(NativeService):
    exports = ("sink",)

    def sink(self, ctx: NativeCall):
        return 0


class ObserverProxy(NativeService):
    """Mesh proxy that records what it sees and forwards untouched."""

    exports = ("on_call",)

    def __init__(self):
        super().__init__()
        self.calls: list[tuple] = []

    def on_call(self, ctx: NativeCall):
        self.calls.append((ctx.caller, ctx.args, ctx.request()))
        return 0


BUILTIN_NATIVES: dict[str, Callable[[], NativeService]] = {
    "echo": EchoService,
    "null": NullService,
    "observer": ObserverProxy,
}


class Runtime:
    def __init__(self, *, arena_bytes: int = DEFAULT_ARENA_BYTES, force_copy: bool = False):
        self.arena = AllocatorState(arena_bytes, backed=True)
        self.registry = Registry(force_copy=force_copy)
        self.ledger = ObjectLedger(self.registry)
        self.engine = CallEngine(self.registry, self.ledger)
        self.mesh = Mesh(self.registry, self.engine)
        self._natives = dict(BUILTIN_NATIVES)

    # -- deployment ------------------------------------------------------------

    def register_native_factory(self, name: str, factory: Callable[[], NativeService]) -> None:
        self._natives[name] = factory

    def register_native(self, name: str, instance: NativeService, exports=None) -> None:
        self.registry.register_service(
            name, instance, tuple(exports or instance.exports), SafetyClass.OBJECT_GRANULAR
        )

    def deploy_sandboxed(
        self,
        name: str,
        data: bytes,
        *,
        max_memory_bytes: int | None = None,
        trace_touched: bool = False,
    ) -> sandbox.ServiceInstance:
        """Decode, verify, allocate, instantiate, and register one MSB image.

        Peer imports are left for resolve_imports (or bound lazily by
        load_manifest); proxy imports stay unbound until granted.
        """
        image = sandbox.decode_module(data)
        module = sandbox.verify_module(image)
        need = image.max_pages * sandbox.PAGE_SIZE
        region = self.arena.allocate_region(name, max(max_memory_bytes or 0, need, 1))
        if region.length < need:
            self.arena.free_region(name)
            raise DeployError(name, f"region of {region.length} bytes cannot hold {need}")
        inst = sandbox.instantiate(
            module, [None] * len(image.imports), region, trace_touched=trace_touched, name=name
        )
        try:
            self.registry.register_service(
                name, inst, tuple(image.exports.keys()), SafetyClass.REGION_GRANULAR
            )
        except Exception:
            region.claimed_by = None
            self.arena.free_region(name)
            raise
        return inst

    def resolve_imports(self, name: str, declared_imports: tuple[str, ...] = ()) -> None:
        """Bind a sandboxed service's peer imports to table-slot shims."""
        record = self.registry.get(name)
        inst = record.instance
        if not isinstance(inst, sandbox.ServiceInstance):
            return
        for i, import_name in enumerate(inst.module.imports):
            if import_name.startswith("xcall.") or inst.import_bindings[i] is not None:
                continue
            base = import_name.rpartition("/")[0] if "/" in import_name else import_name
            target, sep, export = base.rpartition(".")
            if not sep:
                raise DeployError(name, f"import {import_name!r} is not service.export[/arity]")
            if declared_imports and target not in declared_imports:
                raise DeployError(name, f"import of {target!r} not declared in manifest")
            table = self.registry.discover(name, target)
            slot_index = next((s.index for s in table.slots if s.export_name == export), None)
            if slot_index is None:
                raise DeployError(name, f"{target!r} does not export {export!r}")
            inst.import_bindings[i] = bind_import_slot(self.engine, name, table, slot_index)

    def load_manifest(self, manifest: Manifest, base_dir: Path | str = ".") -> None:
        violations = validate_manifest(manifest)
        if violations:
            raise ManifestInvalid(violations)
        for d in manifest.services:
            if not verify_provenance(d, manifest.allowlist):
                raise DeployError(d.name, f"toolchain {d.toolchain!r} not in allowlist")

        base = Path(base_dir)
        for d in manifest.services:
            if d.kind is ServiceKind.SANDBOXED:
                self._deploy_sandboxed_descriptor(d, base)
            else:
                self._deploy_native_descriptor(d)

        for d in manifest.services:
            if d.kind is ServiceKind.SANDBOXED:
                self.resolve_imports(d.name, d.imports)

        for decl in manifest.mesh_policies:
            if decl.policy == "passthrough":
                policy = MeshPolicy.passthrough(decl.caller, decl.callee)
            elif decl.policy == "intercept":
                policy = MeshPolicy.intercept(decl.caller, decl.callee, decl.proxy)
            else:
                policy = MeshPolicy.elide_after(decl.caller, decl.callee, decl.proxy, decl.elide_after)
            self.mesh.install_policy(policy)

    def _deploy_sandboxed_descriptor(self, d: ServiceDescriptor, base: Path) -> None:
        path = base / d.image_path
        data = path.read_bytes()
        try:
            image = sandbox.decode_module(data)
            sandbox.verify_module(image)
        except (sandbox.DecodeError, sandbox.VerifyError) as exc:
            raise DeployError(d.name, f"image rejected: {exc}") from exc
        need = image.max_pages * sandbox.PAGE_SIZE
        if need > d.max_memory_bytes:
            raise DeployError(
                d.name, f"image wants {need} bytes, manifest caps at {d.max_memory_bytes}"
            )
        self.deploy_sandboxed(d.name, data, max_memory_bytes=d.max_memory_bytes)

    def _deploy_native_descriptor(self, d: ServiceDescriptor) -> None:
        factory = self._natives.get(d.name) or self._natives.get(d.name.split(".", 1)[0])
        if factory is None:
            raise DeployError(d.name, "no native implementation in the catalog")
        self.register_native(d.name, factory())

    # -- operations -------------------------------------------------------------

    def unregister_service(self, name: str) -> None:
        record = self.registry.get(name)
        self.registry.unregister(name)
        if isinstance(record.instance, sandbox.ServiceInstance):
            self.arena.free_region(name)

    def invoke_export(self, service: str, export: str, args=()):
        """Operator-side invocation of one export (the CLI `run` path)."""
        record = self.registry.get(service)
        if isinstance(record.instance, sandbox.ServiceInstance):
            return record.instance.invoke(export, tuple(args))
        ctx = NativeCall(
            self.engine, "cli", export, tuple(args), BindingMode.DIRECT_CALL,
            record.instance, None, 0, None,
        )
        return getattr(record.instance, export)(ctx)

    def inspect(self) -> dict:
        frag = self.arena.fragmentation_report()
        return {
            "registry": self.registry.dump_state(),
            "mesh_policies": [
                {
                    "caller": p.caller,
                    "callee": p.callee,
                    "mode": p.mode.value,
                    "proxy": p.proxy,
                    "n": p.n,
                }
                for p in self.mesh.policies()
            ],
            "allocator": {
                "arena_bytes": self.arena.arena_size,
                "free_bytes": self.arena.free_bytes(),
                "allocated_bytes": self.arena.allocated_bytes(),
                "census": {str(c): list(fa) for c, fa in frag.items()},
                "regions": {
                    name: {"base": r.base, "length": r.length, "class": r.bucket_class}
                    for name, r in self.arena.regions().items()
                },
            },
        }
