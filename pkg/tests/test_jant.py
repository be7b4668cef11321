import copy
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctwasm import corpus
from ctwasm.gen import gen
from ctwasm.jant.access import CASES, Matcher
from ctwasm.jant.spectre import check_spectre_structure
from ctwasm.jant.taint import propagate_taint
from ctwasm.jant.tree import build_tree
from ctwasm.jant.verify import check_branches, check_calls, module_safe, verify_program
from ctwasm.jant.view import build_view
from ctwasm.mir.core import MachineInst, PcodeOp, Varnode
from ctwasm.oracle.noninterference import divergences, noninterference_check
from ctwasm.oracle.reference import dynamic_taint
from ctwasm.pipeline import compile_source

from helpers import BRANCHY, compiled, two_target_program, wide_offset_program


def view_of(p, name):
    return build_view(p, p.function(name))


def statuses(p):
    return {v.function: v.status for v in verify_program(p)}


# -- whole-program verdicts ------------------------------------------------------------

@pytest.mark.parametrize("name", corpus.names())
@pytest.mark.parametrize("opt", ["none", "speed"])
def test_corpus_is_safe(name, opt):
    vs = verify_program(compiled(corpus.source(name), opt=opt))
    assert vs and module_safe(vs), [v.to_dict() for v in vs if v.status != "safe"]
    assert all(not v.warnings for v in vs)


def test_no_untrusted_functions_is_vacuously_safe():
    p = compiled("(module (func $f (param $s s32) (result i32) (i32.declassify (local.get $s))))")
    assert verify_program(p) == []
    assert module_safe([])


@pytest.mark.parametrize("name, text, headers", corpus.leaky(), ids=lambda x: x if isinstance(x, str) else "")
def test_leaky_sample_rejected_with_its_class(name, text, headers):
    p = compiled(text, permissive=True)
    v = verify_program(p, function=headers["entry"])[0]
    assert v.status == "unsafe"
    assert headers["expect"] in v.classes
    assert all(x.witness is not None for x in v.violations)


def test_safe_verdict_cannot_carry_violations():
    from ctwasm.jant.model import Verdict, Violation
    with pytest.raises(ValueError):
        Verdict("$f", "safe", [Violation("secret-branch", 0)])


# -- branches --------------------------------------------------------------------------

SSEL = """(module (memory $m secret 1)
 (func $f untrusted (param $s s32) (param $a s32) (param $b s32)
  (s32.store $m (i32.const 0) (s32.sselect (local.get $a) (local.get $b) (local.get $s)))))"""


def test_csel_on_secret_is_not_a_branch_but_taints_result():
    p = compiled(SSEL)
    view = view_of(p, "$f")
    st_ = propagate_taint(view)
    assert check_branches(view, st_) == []
    assert st_.preempted
    assert verify_program(p)[0].status == "safe"


def test_conditional_branch_on_secret_is_flagged():
    src = dict((n, t) for n, t, _ in corpus.leaky())["branch_if"]
    p = compiled(src, permissive=True)
    view = view_of(p, "$f")
    vs = check_branches(view, propagate_taint(view))
    assert vs and vs[0].cls == "secret-branch" and vs[0].witness


def test_public_counted_loop_is_fine():
    src = """(module (memory $m secret 1)
     (func $f untrusted (param $k s32)
      (local $i i32)
      (block (loop
        (br_if 1 (i32.ge_u (local.get $i) (i32.const 16)))
        (s32.store $m (i32.mul (local.get $i) (i32.const 4)) (s32.xor (local.get $k) (local.get $i)))
        (local.set $i (i32.add (local.get $i) (i32.const 1)))
        (br 0)))))"""
    p = compiled(src)
    view = view_of(p, "$f")
    assert check_branches(view, propagate_taint(view)) == []
    assert verify_program(p)[0].status == "safe"


# -- expression trees ------------------------------------------------------------------

def _loop_condition(p, name):
    view = view_of(p, name)
    for mi in view.insts:
        for op in mi.ops:
            if op.opcode == "CBRANCH" and op.inputs[0].space == "ram":
                return view, op.inputs[1]
    raise AssertionError("no conditional branch")


def test_tree_of_loop_counter_has_cycle_and_public_leaves():
    src = """(module (func $f untrusted (param $n i32) (result i32)
      (local $i i32)
      (block (loop
        (br_if 1 (i32.ge_u (local.get $i) (local.get $n)))
        (local.set $i (i32.add (local.get $i) (i32.const 1)))
        (br 0)))
      (local.get $i)))"""
    view, cond = _loop_condition(compiled(src, opt="none"), "$f")
    tree = build_tree(view, cond)
    assert tree.has_cycle()
    assert tree.leaf_kinds() <= {"constant", "param"}
    assert "param" in tree.leaf_kinds()
    nested = tree.to_nested()
    assert isinstance(nested, list) and nested


def test_tree_of_constant_is_single_leaf():
    view = view_of(compiled(BRANCHY), "$f")
    tree = build_tree(view, Varnode("const", 7, 4))
    assert len(tree.nodes) == 1 and tree.leaf_kinds() == {"constant"}


# -- address classification ------------------------------------------------------------

def _accesses(p, name):
    view = view_of(p, name)
    return view, propagate_taint(view).accesses


def test_linear_memory_pattern_recognised():
    p = compiled(BRANCHY)
    _, acc = _accesses(p, "$f")
    kinds = [a.kind for a in acc.values()]
    assert "linear-memory" in kinds and "memory-base" in kinds
    assert "unmatched" not in kinds


def test_indirect_call_pointer_is_constant_address():
    src = """(module (func $h untrusted (param $a i32) (result i32) (local.get $a))
     (func $f untrusted (param $x i32) (result i32) (call $h (local.get $x))))"""
    p = compiled(src, call_mode="indirect")
    _, acc = _accesses(p, "$f")
    assert "constant-addr" in [a.kind for a in acc.values()]
    assert statuses(p) == {"$h": "safe", "$f": "safe"}


def test_secret_offset_is_secret_address():
    src = dict((n, t) for n, t, _ in corpus.leaky())["load_table"]
    p = compiled(src, permissive=True)
    v = verify_program(p)[0]
    assert "secret-address" in v.classes


def test_restricting_cases_makes_accesses_unmatched():
    p = compiled(BRANCHY)
    view = view_of(p, "$f")
    m = Matcher(view, cases=("global",))
    acc = propagate_taint(view, m).accesses
    assert {a.kind for a in acc.values()} == {"unmatched"}


# -- taint -----------------------------------------------------------------------------

def test_secret_to_public_store():
    src = dict((n, t) for n, t, _ in corpus.leaky())["store_public_memory"]
    v = verify_program(compiled(src, permissive=True))[0]
    assert v.classes == {"secret-to-public-store"}


SPILL = """(module (memory $m 1) (memory $k secret 1)
 (func $h untrusted (param $a i32) (result i32) (i32.add (local.get $a) (i32.const 1)))
 (func $f untrusted (param $x i32) (param $s s32) (result i32)
  (local $y i32)
  (local.set $y (call $h (local.get $x)))
  (s32.store $k (i32.const 0) (s32.add (local.get $s) (local.get $s)))
  (i32.load $m (i32.add (local.get $x) (local.get $y)))))"""


def test_spill_and_reload_of_public_value_is_safe():
    p = compiled(SPILL)
    f = p.function("$f")
    stack_ops = [a.kind for a in propagate_taint(build_view(p, f)).accesses.values()]
    assert "stack-slot" in stack_ops
    assert statuses(p)["$f"] == "safe"


def test_spilled_secret_reloaded_as_address_is_caught():
    src = SPILL.replace("(i32.add (local.get $x) (local.get $y))",
                        "(s32.add (local.get $s) (local.get $y))")
    p = compiled(src, permissive=True)
    v = [v for v in verify_program(p) if v.function == "$f"][0]
    assert v.status == "unsafe" and "secret-address" in v.classes


# -- calls -----------------------------------------------------------------------------

def test_resolved_indirect_call_has_target():
    src = """(module (func $h untrusted (param $a i32) (result i32) (local.get $a))
     (func $f untrusted (param $x i32) (result i32) (call $h (local.get $x))))"""
    p = compiled(src, call_mode="indirect")
    view = view_of(p, "$f")
    st_ = propagate_taint(view)
    assert list(st_.call_targets.values()) == [p.function("$h").entry]
    vs, reasons = check_calls(view, st_)
    assert vs == [] and reasons == []


def test_secret_argument_to_public_parameter():
    src = dict((n, t) for n, t, _ in corpus.leaky())["call_argument"]
    p = compiled(src, permissive=True)
    view = view_of(p, "$f")
    vs, _ = check_calls(view, propagate_taint(view))
    assert [v.cls for v in vs] == ["interface-mismatch"]


def test_secret_return_used_as_branch():
    src = dict((n, t) for n, t, _ in corpus.leaky())["branch_callee_result"]
    assert statuses(compiled(src, permissive=True)) == {"$mix": "safe", "$f": "unsafe"}


def test_call_to_trusted_function_is_unsupported():
    src = dict((n, t) for n, t, _ in corpus.rule_samples())["untrusted_calls_trusted"]
    vs = verify_program(compiled(src, permissive=True))
    assert any(v.status == "unsupported" and v.reasons for v in vs)


# -- Spectre structure -----------------------------------------------------------------

@pytest.mark.parametrize("name", corpus.names())
def test_corpus_passes_spectre_checks(name):
    rep = check_spectre_structure(compiled(corpus.source(name)))
    assert rep.ok, rep.to_dict()


def test_wide_offset_fails_pht():
    rep = check_spectre_structure(wide_offset_program())
    assert not rep.pht_ok and rep.btb_ok


def test_two_target_branch_fails_btb():
    p, _, _ = two_target_program()
    rep = check_spectre_structure(p)
    assert not rep.btb_ok
    v = verify_program(p)[0]
    assert "unresolvable-branch" in v.classes


def test_close_memories_fail_pht():
    p = copy.deepcopy(compiled(BRANCHY))
    p.layout["separation"] = 1 << 20
    assert not check_spectre_structure(p).pht_ok


# -- soundness-style properties ------------------------------------------------------

def _programs(n=12, density=0.6):
    for seed in range(n):
        yield compile_source(gen(seed, 120, density, leak_rate=0.3).text, permissive=True).program


def test_fewer_patterns_only_make_verdicts_worse():
    order = {"safe": 0, "unsupported": 1, "unsafe": 2}
    subsets = [c for c in (CASES[:1], CASES[:3], tuple(c for c in CASES if c != "stack-slot"))]
    for p in list(_programs()) + [compiled(corpus.source(n)) for n in corpus.CRYPTO]:
        full = {v.function: v.status for v in verify_program(p)}
        for sub in subsets:
            for v in verify_program(p, cases=sub):
                assert v.status != "safe" or full[v.function] == "safe"
                if full[v.function] != "safe":
                    assert order[v.status] >= 1


@given(st.integers(0, 10_000))
@settings(max_examples=20)
def test_taint_is_a_fixpoint(seed):
    p = compile_source(gen(seed, 100, 0.5, leak_rate=0.3).text, permissive=True).program
    for f in p.functions:
        view = build_view(p, f)
        if view.problems:
            continue
        st_ = propagate_taint(view)
        again = propagate_taint(view, initial=st_.tainted)
        assert again.tainted == st_.tainted


def _insert_copy_chain(p, fname, rng):
    """Route one register operand through a fresh COPY pair inside its instruction."""
    q = copy.deepcopy(p)
    f = q.function(fname)
    cands = [(mi, k, j) for mi in f.insts for k, op in enumerate(mi.ops)
             for j, v in enumerate(op.inputs)
             if v.space == "reg" and op.opcode not in ("CALL", "CALLIND", "RETURN", "MULTIEQUAL")]
    if not cands:
        return q
    mi, k, j = rng.choice(cands)
    v = mi.ops[k].inputs[j]
    u1, u2 = Varnode("unique", 7001, v.size), Varnode("unique", 7002, v.size)
    mi.ops[k].inputs[j] = u2
    mi.ops[k:k] = [PcodeOp("COPY", u1, [v]), PcodeOp("COPY", u2, [u1])]
    return q


@given(st.integers(0, 10_000))
@settings(max_examples=25)
def test_copy_chains_do_not_change_verdicts(seed):
    rng = random.Random(seed)
    p = compile_source(gen(seed, 80, 0.5, leak_rate=0.3).text, permissive=True).program
    for f in p.functions:
        if p.manifest.functions[f.index].trusted:
            continue
        q = _insert_copy_chain(p, f.name, rng)
        a = verify_program(p, function=f.name)[0]
        b = verify_program(q, function=f.name)[0]
        assert (a.status, a.classes) == (b.status, b.classes)


@given(st.integers(0, 10_000), st.integers(0, 2**32 - 1))
@settings(max_examples=25)
def test_dynamic_taint_within_static_taint(seed, secret):
    p = compile_source(gen(seed, 80, 0.6).text).program
    f = p.function("$main")
    sig = p.manifest.functions[f.index]
    rng = random.Random(seed)
    args = [secret if s else rng.randrange(64) for s in sig.paramSecrecy]
    dyn = dynamic_taint(p, "$main", args)
    for fi, keys in dyn.tainted.items():
        view = build_view(p, p.functions[fi])
        static = propagate_taint(view).tainted
        extra = {k for k in keys if k[0] != "flag"} - static
        assert not extra, (p.functions[fi].name, sorted(extra)[:5])


def test_leaky_samples_diverge_dynamically():
    """Every rejected sample is really leaky: some secret pair changes its trace."""
    for name, text, h in corpus.leaky():
        p = compiled(text, permissive=True)
        pairs = noninterference_check(p, h["entry"], trials=64, seed=1, mem_bytes=4096)
        assert divergences(pairs), name


def test_replacing_csel_with_branch_is_rejected():
    p = copy.deepcopy(compiled(SSEL))
    f = p.function("$f")
    mi = next(m for m in f.insts if m.mnemonic == "cselDIT")
    # make the pcode-relative skip an inter-instruction branch
    cb = mi.ops[2]
    mi.ops[2] = PcodeOp("CBRANCH", None, [Varnode("ram", f.insts[-1].addr, 8), cb.inputs[1]])
    f.insts[f.insts.index(mi)] = MachineInst(mi.addr, "csel", mi.ops, text=mi.text)
    v = verify_program(p)[0]
    assert v.status == "unsafe" and "secret-branch" in v.classes


def test_plain_csel_with_secret_arm_is_red():
    # the pcode-relative skip inside csel must not exempt it from the red-op check
    src = """(module (func $f untrusted (param $c i32) (param $s s32) (result s32)
      (select (local.get $s) (i32.const 3) (local.get $c))))"""
    p = compiled(src)
    assert statuses(p)["$f"] == "safe"
    bad = copy.deepcopy(p)
    fn = bad.function("$f")
    hits = [mi for mi in fn.insts if mi.mnemonic == "cselDIT"]
    assert hits
    for mi in hits:
        mi.mnemonic = "csel"
    v = verify_program(bad)[0]
    assert v.status == "unsafe" and "secret-into-red-op" in v.classes
