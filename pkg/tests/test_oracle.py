import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctwasm import corpus
from ctwasm.gen import gen
from ctwasm.oracle.machine import run
from ctwasm.oracle.noninterference import (boundary_pairs, boundary_values, divergences, first_divergence,
                                           noninterference_check)
from ctwasm.oracle.reference import dynamic_taint, interpret
from ctwasm.pipeline import compile_source

from helpers import BRANCHY, compiled
from vectors import (SALSA_IN, SALSA_OUT, SHA_448, SHA_ABC, TEA_ZERO, run_salsa, run_sha256, run_tea,
                     salsa20_core, sha256_ref, tea_decrypt, tea_encrypt)

DIT_ONLY = """(module (memory $m secret 1)
 (func $f untrusted (param $a s32) (param $b s32) (result s32)
  (s32.store $m (i32.const 0) (s32.xor (s32.add (local.get $a) (local.get $b)) (local.get $a)))
  (s32.sselect (local.get $a) (local.get $b) (local.get $b))))"""

LEAKY_BRANCH = """(module (global $g (mut i32) (i32.const 0))
 (func $f untrusted (param $s s32)
  (if (s32.ne (local.get $s) (i32.const 0)) (then (global.set $g (i32.const 1))))))"""


def leaky(name):
    return dict((n, (t, h)) for n, t, h in corpus.leaky())[name]


# -- traces ----------------------------------------------------------------------------

def test_trace_is_deterministic():
    p = compiled(corpus.source("tea"))
    mem = bytes(range(64))
    a = run(p, "$encrypt", [0, 16], memories=[mem])
    b = run(p, "$encrypt", [0, 16], memories=[mem])
    assert a.trace == b.trace and a.value == b.value


def test_trace_event_kinds():
    res = run(compiled(BRANCHY), "$f", [3])
    kinds = {e[0] for e in res.trace}
    assert {"B", "M", "F", "P"} <= kinds
    assert res.trace[-1][0] == "P"


@given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
def test_dit_only_program_has_secret_independent_trace(a, b):
    p = compiled(DIT_ONLY)
    base = run(p, "$f", [0, 0]).trace
    t = run(p, "$f", [a, b]).trace
    # the return value is secret so it is not a public output
    assert t == base


def test_branch_on_secret_diverges():
    p = compiled(LEAKY_BRANCH, permissive=True)
    ta = run(p, "$f", [0]).trace
    tb = run(p, "$f", [1]).trace
    d = first_divergence(ta, tb)
    assert d is not None and ta[d][0] in ("O", "B")  # the compare leaks before the branch
    assert [e for e in ta if e[0] == "B"] != [e for e in tb if e[0] == "B"]


def test_first_divergence():
    assert first_divergence([1, 2], [1, 2]) is None
    assert first_divergence([1, 2], [1, 3]) == 1
    assert first_divergence([1], [1, 2]) == 1


def test_guard_and_fuel_traps_are_in_trace():
    p = compiled("""(module (memory $m 1)
      (func $f untrusted (param $x i32) (result i32) (i32.load $m (local.get $x))))""")
    r = run(p, "$f", [70000])
    assert r.trap == "guard" and ("T", "guard", r.steps) in r.trace
    loop = compiled("""(module (func $f untrusted (loop (br 0))))""")
    r = run(loop, "$f", [], fuel=1000)
    assert r.trap == "fuel" and r.trace[-1][:2] == ("T", "fuel")


# -- reference interpreter -------------------------------------------------------------

@pytest.mark.parametrize("name", corpus.CRYPTO)
def test_reference_matches_machine_on_corpus(name):
    p = compiled(corpus.source(name))
    entry = {"tea": "$encrypt", "sha256": "$sha256", "salsa20": "$core"}[name]
    args = {"tea": [0, 16], "sha256": [1024, 3], "salsa20": [0, 128]}[name]
    mems = [None, bytes(2048)] if name == "sha256" else [bytes(range(64))]
    a = run(p, entry, args, memories=mems)
    b = interpret(p, entry, args, memories=mems)
    assert a.value == b.value and a.trace == b.trace and a.trap is None


@given(st.integers(0, 10_000), st.integers(10, 150))
@settings(max_examples=25)
def test_reference_matches_machine_on_generated(seed, size):
    p = compile_source(gen(seed, size).text).program
    rng = random.Random(seed)
    f = p.function("$main")
    args = [rng.getrandbits(8 * s) for s in f.param_sizes]
    a = run(p, "$main", args, fuel=200_000)
    b = interpret(p, "$main", args, fuel=200_000)
    assert (a.value, a.trap, a.trace) == (b.value, b.trap, b.trace)


def test_dynamic_taint_of_csel_result():
    p = compiled(DIT_ONLY)
    r = dynamic_taint(p, "$f", [1, 2])
    assert r.value_tainted
    fi = p.functions.index(p.function("$f"))
    assert r.tainted[fi]


def test_constant_program_has_no_taint():
    p = compiled("(module (func $f untrusted (result i32) (i32.add (i32.const 2) (i32.const 3))))")
    r = dynamic_taint(p, "$f")
    assert r.value == 5 and not r.value_tainted
    assert not any(r.tainted.values())


# -- functional vectors ----------------------------------------------------------------

def test_reference_implementations_match_published_vectors():
    v, k, out = TEA_ZERO
    assert tea_encrypt(v, k) == out
    assert salsa20_core(SALSA_IN) == SALSA_OUT


@pytest.mark.parametrize("opt", ["none", "speed"])
def test_tea(opt):
    v, k, out = TEA_ZERO
    assert run_tea(v, k, opt) == out
    rng = random.Random(7)
    for _ in range(4):
        v = (rng.getrandbits(32), rng.getrandbits(32))
        k = tuple(rng.getrandbits(32) for _ in range(4))
        c = run_tea(v, k, opt)
        assert c == tea_encrypt(v, k)
        assert run_tea(c, k, opt, decrypt=True) == v == tea_decrypt(c, k)


@pytest.mark.parametrize("opt", ["none", "speed"])
def test_sha256(opt):
    assert run_sha256(SHA_ABC, opt).hex() == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    assert run_sha256(SHA_448, opt) == sha256_ref(SHA_448)


@given(st.binary(max_size=130))
@settings(max_examples=10)
def test_sha256_random_messages(msg):
    assert run_sha256(msg) == sha256_ref(msg)


@pytest.mark.parametrize("opt", ["none", "speed"])
def test_salsa20(opt):
    assert run_salsa(SALSA_IN, opt) == SALSA_OUT
    assert run_salsa(bytes(64), opt) == bytes(64)


# -- noninterference harness -----------------------------------------------------------

def test_boundary_pairs():
    assert boundary_values(4) == [0, 1, 0xFFFFFFFF, 0x80000000]
    assert len(boundary_pairs()) == 6


def test_table_lookup_leak_found():
    text, h = leaky("load_table")
    p = compiled(text, permissive=True)
    pairs = noninterference_check(p, h["entry"], trials=64, seed=0, mem_bytes=4096)
    bad = divergences(pairs)
    assert bad
    ev = bad[0].event_a()
    assert ev[0] == "M"
    assert bad[0].to_dict()["divergence"] == bad[0].divergence


def test_program_without_secrets_never_diverges():
    p = compiled(BRANCHY)
    pairs = noninterference_check(p, "$f", trials=20, seed=3)
    assert len(pairs) == 20 and not divergences(pairs)


@pytest.mark.parametrize("name", corpus.CRYPTO)
def test_corpus_noninterference(name):
    p = compiled(corpus.source(name))
    entry = {"tea": "$encrypt", "sha256": "$sha256", "salsa20": "$core"}[name]
    public = {"tea": [0, 16], "sha256": [1024, 40], "salsa20": [0, 128]}[name]
    pairs = noninterference_check(p, entry, trials=8, seed=1, public_args=public, mem_bytes=2048)
    assert not divergences(pairs)


def test_stop_at_first():
    text, h = leaky("branch_if")
    p = compiled(text, permissive=True)
    pairs = noninterference_check(p, h["entry"], trials=50, stop_at_first=True)
    assert pairs[-1].diverged and len(pairs) < 50
