from __future__ import annotations

import json

import pytest

from meshwa.runtime import Runtime
from meshwa.sandbox import asm


def manifest_doc(services=None, mesh=None, allowlist=None) -> str:
    return json.dumps(
        {
            "services": services if services is not None else [],
            "mesh": mesh or [],
            "allowlist": allowlist if allowlist is not None else ["msbc-1.0"],
        }
    )


def service_obj(name="echo", kind="sandboxed", **overrides) -> dict:
    obj = {
        "name": name,
        "kind": kind,
        "memory_bytes": 65536,
        "max_memory_bytes": 131072,
        "toolchain": "msbc-1.0",
        "imports": [],
    }
    if kind == "sandboxed":
        obj["image"] = f"{name}.msb"
    obj.update(overrides)
    return obj


@pytest.fixture
def runtime() -> Runtime:
    return Runtime(arena_bytes=1 << 24)


# -- canned MSB modules -------------------------------------------------------


def const42_module() -> bytes:
    return asm.build_module([asm.func("const 42\nret")])


def mul_module() -> bytes:
    # main(a, b) -> a * b
    return asm.build_module(
        [asm.func("local.get 0\nlocal.get 1\nmul\nret", nargs=2)]
    )


def echo_msb_module(*, pages: int = 2) -> bytes:
    """Copy-in/out style echo: main(ptr, len) returns len, bytes untouched."""
    return asm.build_module(
        [asm.func("local.get 1\nret", nargs=2)], mem_pages=pages, max_pages=pages
    )


def proxy_echo_module(*, pages: int = 2) -> bytes:
    """Proxy-mediated echo: main(handle, len) proxy-reads the object into
    memory, proxy-writes it back, and returns len."""
    body = """
    local.get 0   # handle
    const 0       # obj_off
    const 0       # mem_off
    local.get 1   # len
    call_import 0 # proxy_read
    local.set 2
    local.get 0
    const 0
    const 0
    local.get 1
    call_import 1 # proxy_write
    local.set 2
    local.get 1
    ret
    """
    return asm.build_module(
        [asm.func(body, nargs=2, nlocals=1)],
        imports=("xcall.proxy_read/4", "xcall.proxy_write/4"),
        mem_pages=pages,
        max_pages=pages,
    )


def trapping_module() -> bytes:
    # load far outside any possible memory
    return asm.build_module([asm.func("const 999999999\nload.i64\nret")])
