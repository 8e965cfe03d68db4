from __future__ import annotations

import pytest

from meshwa.sandbox import VerifyError, import_arity, verify_module
from meshwa.sandbox import asm
from meshwa.sandbox.image import FunctionBody
from meshwa.sandbox.isa import (
    FIXED_EFFECTS,
    OP_BR,
    OP_BR_IF,
    OP_CALL,
    OP_CALL_IMPORT,
    OP_RET,
)


def oracle_entry_depths(image, arities, fi):
    """Brute-force path enumeration: collect every entry depth each
    instruction can be reached at, independent of the worklist verifier."""
    f = image.functions[fi]
    n = len(f.instructions)
    seen: dict[int, set[int]] = {i: set() for i in range(n)}
    frontier = [(0, 0)]
    visited = set()
    while frontier:
        i, d = frontier.pop()
        if i >= n or (i, d) in visited:
            continue
        visited.add((i, d))
        seen[i].add(d)
        op, arg = f.instructions[i]
        if op == OP_CALL:
            callee = image.functions[arg]
            pops, pushes = callee.nargs, callee.nrets
        elif op == OP_CALL_IMPORT:
            pops, pushes = arities[arg], 1
        else:
            pops, pushes = FIXED_EFFECTS[op]
        if d < pops:
            continue  # invalid path; verifier must have rejected
        nd = d - pops + pushes
        if op == OP_RET:
            continue
        if op == OP_BR:
            frontier.append((arg, nd))
        elif op == OP_BR_IF:
            frontier.append((arg, nd))
            frontier.append((i + 1, nd))
        else:
            frontier.append((i + 1, nd))
    return seen


def test_depth_annotations_match_oracle():
    image = asm.build_image([asm.func("const 6\nconst 7\nmul\nret")])
    vm = verify_module(image)
    assert vm.entry_depths[0] == (0, 1, 2, 1)
    oracle = oracle_entry_depths(image, vm.import_arities, 0)
    for i, depth in enumerate(vm.entry_depths[0]):
        assert oracle[i] == {depth}


def test_depth_oracle_on_branching_function():
    body = """
    local.get 0
    br_if 4
    const 10
    ret
    const 20
    ret
    """
    image = asm.build_image([asm.func(body, nargs=1)])
    vm = verify_module(image)
    oracle = oracle_entry_depths(image, vm.import_arities, 0)
    for i, depth in enumerate(vm.entry_depths[0]):
        assert oracle[i] == {depth}


def test_branch_target_out_of_range_rule_a():
    image = asm.build_image([asm.func("const 1\nbr_if 99\nret", nrets=0)])
    with pytest.raises(VerifyError) as exc:
        verify_module(image)
    assert exc.value.rule == "a"


def test_pop_on_empty_rule_e():
    image = asm.build_image([asm.func("add\nret")])
    with pytest.raises(VerifyError) as exc:
        verify_module(image)
    assert exc.value.rule == "e"


def test_ret_depth_mismatch_rule_e():
    image = asm.build_image([asm.func("const 1\nconst 2\nret")])  # depth 2, nrets 1
    with pytest.raises(VerifyError) as exc:
        verify_module(image)
    assert exc.value.rule == "e"


def test_fall_off_end_rule_e():
    image = asm.build_image([asm.func("const 1\nconst 2\nadd")])
    with pytest.raises(VerifyError) as exc:
        verify_module(image)
    assert exc.value.rule == "e"


def test_entry_depth_conflict_rule_e():
    # br_if joins index 3 at depth 1 (branch) vs depth 2 (fallthrough)
    body = "const 1\nbr_if 3\nconst 5\nret"
    image = asm.build_image([asm.func(body)])
    with pytest.raises(VerifyError) as exc:
        verify_module(image)
    assert exc.value.rule == "e"


def test_unreachable_instruction_rule_e():
    body = "const 1\nbr 3\nconst 9\nret"
    image = asm.build_image([asm.func(body)])
    with pytest.raises(VerifyError) as exc:
        verify_module(image)
    assert exc.value.rule == "e"
    assert "unreachable" in str(exc.value)


def test_call_target_rule_b():
    image = asm.build_image([asm.func("call 5\nret")])
    with pytest.raises(VerifyError) as exc:
        verify_module(image)
    assert exc.value.rule == "b"


def test_call_import_rule_c():
    image = asm.build_image([asm.func("call_import 0\nret")])
    with pytest.raises(VerifyError) as exc:
        verify_module(image)
    assert exc.value.rule == "c"


def test_local_index_rule_d():
    image = asm.build_image([asm.func("local.get 1\nret", nargs=1, nlocals=1)])
    verify_module(image)  # indices 0 and 1 exist
    image = asm.build_image([asm.func("local.get 2\nret", nargs=1, nlocals=1)])
    with pytest.raises(VerifyError) as exc:
        verify_module(image)
    assert exc.value.rule == "d"


def test_limits_rule_f():
    image = asm.build_image([asm.func("const 1\nret")], mem_pages=70000, max_pages=70000)
    with pytest.raises(VerifyError) as exc:
        verify_module(image)
    assert exc.value.rule == "f"


def test_call_stack_effect_uses_callee_signature():
    helper = asm.func("local.get 0\nlocal.get 1\nadd\nret", nargs=2)
    main = asm.func("const 3\nconst 4\ncall 1\nret")
    vm = verify_module(asm.build_image([main, helper], exports={"main": 0}))
    assert vm.entry_depths[0] == (0, 1, 2, 1)


def test_import_arity_convention():
    assert import_arity("xcall.proxy_read/4") == 4
    assert import_arity("peer.echo/2") == 2
    assert import_arity("plain_name") == 0
    assert import_arity("weird/suffix") == 0
    assert import_arity("name/12") == 12  # parsed; rejected by rule f below

    image = asm.build_image(
        [asm.func("call_import 0\nret")], imports=("too.many/12",)
    )
    with pytest.raises(VerifyError) as exc:
        verify_module(image)
    assert exc.value.rule == "f"


def test_import_call_stack_effect():
    body = "const 1\nconst 2\ncall_import 0\nret"
    image = asm.build_image([asm.func(body)], imports=("host.fn/2",))
    vm = verify_module(image)
    assert vm.entry_depths[0] == (0, 1, 2, 1)
    assert vm.import_arities == (2,)


def test_loop_with_consistent_depth_verifies():
    # count down from local 0 to zero: a backward branch at matching depth
    body = """
    local.get 0
    const 1
    sub
    local.set 0
    local.get 0
    br_if 0
    const 0
    ret
    """
    vm = verify_module(asm.build_image([asm.func(body, nargs=1)]))
    assert vm.entry_depths[0][0] == 0


def test_nrets_zero_function():
    image = asm.build_image([asm.func("const 1\nlocal.set 0\nret", nrets=0, nlocals=1)])
    vm = verify_module(image)
    assert vm.entry_depths[0] == (0, 1, 0)
