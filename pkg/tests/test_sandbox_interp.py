from __future__ import annotations

import pytest

from meshwa.sandbox import (
    ArityMismatch,
    BindingArity,
    ExportNotFound,
    PAGE_SIZE,
    RegionInUse,
    RegionTooSmall,
    Trap,
    TrapKind,
    decode_module,
    instantiate,
    verify_module,
)
from meshwa.sandbox import asm
from meshwa.sasmem import AllocatorState

from conftest import const42_module, mul_module


@pytest.fixture
def arena():
    return AllocatorState(1 << 24, backed=True)


def make_instance(arena, data: bytes, *, owner="svc", bindings=None, trace=False):
    image = decode_module(data)
    module = verify_module(image)
    region = arena.allocate_region(owner, image.max_pages * PAGE_SIZE)
    slots = bindings if bindings is not None else [None] * len(image.imports)
    return instantiate(module, slots, region, trace_touched=trace, name=owner)


def test_const42(arena):
    inst = make_instance(arena, const42_module())
    assert inst.invoke("main") == 42


def test_mul(arena):
    inst = make_instance(arena, mul_module())
    assert inst.invoke("main", [6, 7]) == 42


def test_mul_wraps_to_64_bits(arena):
    inst = make_instance(arena, mul_module())
    assert inst.invoke("main", [1 << 63, 2]) == 0
    assert inst.invoke("main", [(1 << 64) - 1, (1 << 64) - 1]) == 1  # (-1)*(-1)


def test_export_not_found_and_arity(arena):
    inst = make_instance(arena, const42_module())
    with pytest.raises(ExportNotFound):
        inst.invoke("nope")
    with pytest.raises(ArityMismatch):
        inst.invoke("main", [1])


def test_fresh_memory_is_zero(arena):
    data = asm.build_module([asm.func("const 0\nload.i64\nret")])
    inst = make_instance(arena, data)
    # dirty the arena first: allocate, scribble, free, reallocate
    assert inst.invoke("main") == 0


def test_zero_init_after_dirty_region(arena):
    region = arena.allocate_region("dirty", PAGE_SIZE)
    region.write(0, b"\xff" * 64)
    arena.free_region("dirty")
    data = asm.build_module([asm.func("const 0\nload.i64\nret")])
    inst = make_instance(arena, data)
    assert inst.invoke("main") == 0


def test_store_load_roundtrip(arena):
    body = "const 8\nconst 12345\nstore.i64\nconst 8\nload.i64\nret"
    inst = make_instance(arena, asm.build_module([asm.func(body)]))
    assert inst.invoke("main") == 12345


def test_store_order_addr_below_value(arena):
    # stack is [addr, value]; store writes value at addr
    body = "const 16\nconst 99\nstore.i64\nconst 16\nload.i64\nret"
    inst = make_instance(arena, asm.build_module([asm.func(body)]))
    assert inst.invoke("main") == 99


def test_boundary_store(arena):
    limit = PAGE_SIZE  # one page
    ok = asm.build_module([asm.func(f"const {limit - 8}\nconst 1\nstore.i64\nconst 0\nret")])
    inst = make_instance(arena, ok)
    assert inst.invoke("main") == 0

    bad = asm.build_module([asm.func(f"const {limit - 7}\nconst 1\nstore.i64\nconst 0\nret")])
    inst2 = make_instance(arena, bad, owner="svc2")
    with pytest.raises(Trap) as exc:
        inst2.invoke("main")
    assert exc.value.kind is TrapKind.OUT_OF_BOUNDS


def test_negative_address_traps(arena):
    data = asm.build_module([asm.func("const -8\nload.i64\nret")])
    inst = make_instance(arena, data)
    with pytest.raises(Trap) as exc:
        inst.invoke("main")
    assert exc.value.kind is TrapKind.OUT_OF_BOUNDS


def test_call_depth_cap(arena):
    # main calls itself unconditionally
    data = asm.build_module([asm.func("call 0\nret")])
    inst = make_instance(arena, data)
    with pytest.raises(Trap) as exc:
        inst.invoke("main")
    assert exc.value.kind is TrapKind.CALL_DEPTH_EXCEEDED
    assert "512" in str(exc.value)


def test_stack_overflow_cap(arena):
    # push forever: const, br back
    data = asm.build_module([asm.func("const 1\nbr 0\nret", nrets=0)])
    # note: 'ret' never reached but keeps the verifier's reachability happy?
    # it is unreachable -> build differently: a self-loop of pushes
    from meshwa.sandbox import VerifyError

    with pytest.raises(VerifyError):
        verify_module(decode_module(data))

    # growing depth via a consistent loop is impossible (depths must match),
    # so overflow comes from deep recursion carrying live operands instead
    body_leaf = asm.func("const 1\nconst 2\nconst 3\nconst 4\nconst 5\ncall 0\nret",)
    # each frame leaves 5 pending operands, recursion overflows operand stack
    # before the 512-frame cap: 512 * 5 > 4096? 2560 < 4096 -> raise operand
    # pressure to 9 per frame so the stack cap trips first.
    body = asm.func(
        "const 1\nconst 2\nconst 3\nconst 4\nconst 5\nconst 6\nconst 7\nconst 8\nconst 9\n"
        "call 0\nlocal.set 0\nlocal.set 0\nlocal.set 0\nlocal.set 0\nlocal.set 0\n"
        "local.set 0\nlocal.set 0\nlocal.set 0\nlocal.set 0\nret",
        nlocals=1,
    )
    del body_leaf
    data = asm.build_module([body])
    inst = make_instance(arena, data, owner="svc3")
    with pytest.raises(Trap) as exc:
        inst.invoke("main")
    assert exc.value.kind is TrapKind.STACK_OVERFLOW


def test_traps_abort_only_invocation(arena):
    data = asm.build_module(
        [asm.func("const 999999999\nload.i64\nret")]
    )
    inst = make_instance(arena, data)
    for _ in range(3):
        with pytest.raises(Trap):
            inst.invoke("main")
    ok = asm.build_module([asm.func("const 7\nret")])
    inst2 = make_instance(arena, ok, owner="svc2")
    assert inst2.invoke("main") == 7


def test_mem_grow_semantics(arena):
    data = asm.build_module([asm.func("const 0\nret")], mem_pages=1, max_pages=2)
    inst = make_instance(arena, data)
    assert inst.cur_pages == 1
    assert inst.mem_grow(1) == 1
    assert inst.cur_pages == 2
    assert inst.mem_grow(1) == -1
    assert inst.cur_pages == 2
    assert inst.mem_grow(0) == 2
    assert inst.cur_pages == 2


def test_mem_grow_opcode_and_grown_pages_zeroed(arena):
    body = """
    const 1
    mem.grow
    local.set 0
    mem.size
    ret
    """
    data = asm.build_module([asm.func(body, nlocals=1)], mem_pages=1, max_pages=4)
    inst = make_instance(arena, data)
    assert inst.invoke("main") == 2
    assert inst.mem_read(PAGE_SIZE, 8) == bytes(8)


def test_mem_grow_failure_returns_minus_one_in_band(arena):
    body = "const 100\nmem.grow\nret"
    data = asm.build_module([asm.func(body)], mem_pages=1, max_pages=2)
    inst = make_instance(arena, data)
    assert inst.invoke("main") == (1 << 64) - 1  # -1 as u64


def test_mem_size_opcode(arena):
    data = asm.build_module([asm.func("mem.size\nret")], mem_pages=3, max_pages=3)
    inst = make_instance(arena, data)
    assert inst.invoke("main") == 3


def test_binding_arity(arena):
    data = asm.build_module(
        [asm.func("const 1\nret")], imports=("a.f/1", "b.g/1")
    )
    image = decode_module(data)
    module = verify_module(image)
    region = arena.allocate_region("svc", PAGE_SIZE)
    with pytest.raises(BindingArity):
        instantiate(module, [None], region)


def test_region_too_small(arena):
    data = asm.build_module([asm.func("const 1\nret")], mem_pages=1, max_pages=2)
    image = decode_module(data)
    module = verify_module(image)
    region = arena.allocate_region("svc", PAGE_SIZE)  # 64 KiB but needs 128
    with pytest.raises(RegionTooSmall):
        instantiate(module, [], region)


def test_no_region_sharing(arena):
    image = decode_module(const42_module())
    module = verify_module(image)
    region = arena.allocate_region("svc", PAGE_SIZE)
    instantiate(module, [], region)
    with pytest.raises(RegionInUse):
        instantiate(module, [], region)


def test_unbound_import_traps(arena):
    data = asm.build_module(
        [asm.func("call_import 0\nret")], imports=("xcall.proxy_read/0",)
    )
    inst = make_instance(arena, data)
    with pytest.raises(Trap) as exc:
        inst.invoke("main")
    assert exc.value.kind is TrapKind.UNREACHABLE_IMPORT


def test_import_receives_args_and_returns_value(arena):
    seen = []

    def host(args):
        seen.append(args)
        return args[0] + args[1]

    data = asm.build_module(
        [asm.func("const 30\nconst 12\ncall_import 0\nret")], imports=("host.add/2",)
    )
    inst = make_instance(arena, data, bindings=[host])
    assert inst.invoke("main") == 42
    assert seen == [(30, 12)]


def test_determinism_and_touched_sets(arena):
    body = """
    const 64
    const 7
    store.i64
    const 64
    load.i64
    ret
    """
    data = asm.build_module([asm.func(body)])
    insts = [
        make_instance(arena, data, owner=f"d{i}", trace=True) for i in range(2)
    ]
    results = [i.invoke("main") for i in insts]
    assert results[0] == results[1] == 7
    assert insts[0].touched == insts[1].touched
    for off, length, limit in insts[0].touched:
        assert 0 <= off and off + length <= limit


def test_local_get_set_and_branching(arena):
    # sum 1..n iteratively
    body = """
    const 0        # 0: acc = 0
    local.set 1    # 1
    local.get 0    # 2: if n != 0 goto loop
    br_if 6        # 3
    local.get 1    # 4: return acc
    ret            # 5
    local.get 1    # 6: loop: acc += n
    local.get 0    # 7
    add            # 8
    local.set 1    # 9
    local.get 0    # 10: n -= 1
    const 1        # 11
    sub            # 12
    local.set 0    # 13
    local.get 0    # 14: if n != 0 goto loop
    br_if 6        # 15
    br 4           # 16
    """
    data = asm.build_module([asm.func(body, nargs=1, nlocals=1)])
    inst = make_instance(arena, data)
    assert inst.invoke("main", [10]) == 55
    assert inst.invoke("main", [0]) == 0
