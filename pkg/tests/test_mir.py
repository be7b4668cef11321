import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctwasm import corpus
from ctwasm.errors import ContainerError
from ctwasm.gen import gen
from ctwasm.jant.verify import verify_program
from ctwasm.layout import memory_base
from ctwasm.manifest import Manifest
from ctwasm.mir.container import (MAGIC, TAG_MANIFEST, decode_sections, emit_container, from_bytes,
                                  patch_manifest, patch_manifest_bytes, program_to_dict, read_container,
                                  read_manifest_text, to_bytes)
from ctwasm.mir.core import ARITY, HAS_OUTPUT, MEMORY_MNEMONICS, MirProgram
from ctwasm.mir.lower import lower
from ctwasm.mir.text import format_program
from ctwasm.opt.pipeline import optimize_module
from ctwasm.pipeline import compile_source

from helpers import ir_of

CALLS = """(module (memory $m secret 1) (global $g (mut s32) (s32.const 0))
 (func $h untrusted (param $a s32) (result s32) (local.get $a))
 (func $f untrusted (param $x i32) (param $s s32) (param $t s32) (result s32)
  (global.set $g (s32.add (local.get $s) (local.get $t)))
  (call $h (s32.sselect (local.get $s) (s32.load $m (local.get $x)) (local.get $t)))))"""

FIG_SHAPE = """(module (import "env" "memory" (memory $m 1))
 (func $a untrusted (param $s s32))
 (func $b untrusted (param $p i32)))"""


def corpus_programs(opt="speed"):
    for name in corpus.names():
        yield name, compile_source(corpus.source(name), opt=opt)


def inst_writing(f, regname):
    for mi in f.insts:
        for op in mi.ops:
            if op.output is not None and op.output.space == "reg" and op.output.name == regname:
                return mi
    return None


# -- instruction selection ------------------------------------------------------------

def test_secret_add_is_single_dit_add():
    f = compile_source(CALLS).program.function("$f")
    mi = f.insts[0]
    assert mi.mnemonic == "addDIT" and mi.dit
    assert [op.opcode for op in mi.ops] == ["INT_ADD"]
    assert mi.flags_written == []


def test_sselect_expands_to_intra_instruction_branch():
    f = compile_source(CALLS).program.function("$f")
    mi = next(m for m in f.insts if m.mnemonic == "cselDIT")
    assert [op.opcode for op in mi.ops] == ["BOOL_NEGATE", "COPY", "CBRANCH", "COPY", "MULTIEQUAL"]
    cb = mi.ops[2]
    assert cb.inputs[0].space == "rel" and cb.inputs[0].name == 4


def test_memory_load_uses_double_indirection():
    p = compile_source(CALLS).program
    f = p.function("$f")
    i = next(k for k, m in enumerate(f.insts) if m.mnemonic.startswith("ldr") and len(m.ops) == 3)
    base_ld, ld = f.insts[i - 1], f.insts[i]
    add, load = base_ld.ops
    assert add.opcode == "INT_ADD" and add.inputs[0].name == "x0"
    assert add.inputs[1].name == p.manifest.memoriesOffset
    assert load.opcode == "LOAD"
    zext, add2, load2 = ld.ops
    assert zext.opcode == "INT_ZEXT" and zext.inputs[0].size == 4
    assert add2.inputs == [load.output, zext.output]
    assert load2.opcode == "LOAD"


def test_direct_call_mode():
    p = compile_source(CALLS, call_mode="direct").program
    ops = [op.opcode for mi in p.function("$f").insts for op in mi.ops]
    assert "CALL" in ops and "CALLIND" not in ops
    p = compile_source(CALLS, call_mode="indirect").program
    ops = [op.opcode for mi in p.function("$f").insts for op in mi.ops]
    assert "CALLIND" in ops and "CALL" not in ops


def test_unknown_call_mode():
    with pytest.raises(ValueError):
        lower(ir_of(CALLS), call_mode="far")


# -- structural invariants over the corpus and generated programs ------------------------

def _programs():
    for name, res in corpus_programs():
        yield res.ir, res.program
    for seed in range(15):
        res = compile_source(gen(seed, 150, 0.6).text)
        yield res.ir, res.program


def test_dit_totality():
    for ir, p in _programs():
        for fi, f in enumerate(ir.functions):
            mf = p.functions[fi]
            for ins in f.instructions():
                if ins.dit and ins.result is not None:
                    mi = inst_writing(mf, f"r{f.resolve(ins.result)}")
                    if mi is not None and mi.mnemonic != "phi":
                        assert mi.dit, (f.name, ins, mi.text)


def test_micro_op_arity():
    for _, p in _programs():
        for f in p.functions:
            for mi in f.insts:
                for op in mi.ops:
                    n = ARITY[op.opcode]
                    if n is not None:
                        assert len(op.inputs) == n, mi.text
                    assert (op.output is not None) == (op.opcode in HAS_OUTPUT), mi.text


def test_indirect_follows_calls_only():
    for _, p in _programs():
        for f in p.functions:
            for mi in f.insts:
                for k, op in enumerate(mi.ops):
                    if op.opcode == "INDIRECT":
                        assert any(o.opcode in ("CALL", "CALLIND") for o in mi.ops[:k])
                        assert all(o.opcode == "INDIRECT" for o in mi.ops[k:])


def test_dit_instructions_have_no_outward_branches():
    for _, p in _programs():
        for f in p.functions:
            for mi in f.insts:
                if mi.dit:
                    for op in mi.ops:
                        if op.opcode == "CBRANCH":
                            assert op.inputs[0].space == "rel"
                        assert op.opcode not in ("BRANCH", "BRANCHIND", "CALL", "CALLIND")


def test_offsets_are_32_bit_before_extension():
    for _, p in _programs():
        for f in p.functions:
            for mi in f.insts:
                if mi.mnemonic not in MEMORY_MNEMONICS:
                    continue
                local = {op.output: op for op in mi.ops if op.output is not None}
                for op in mi.ops:
                    if op.opcode not in ("LOAD", "STORE"):
                        continue
                    addr = local.get(op.inputs[0])
                    if addr is None or addr.opcode != "INT_ADD":
                        continue
                    for x in addr.inputs:
                        ext = local.get(x)
                        if ext is not None and ext.opcode == "INT_ZEXT":
                            assert ext.inputs[0].size == 4, mi.text


def test_memories_far_apart():
    assert memory_base(1) - memory_base(0) >= 1 << 32
    p = compile_source(FIG_SHAPE.replace("(module", "(module (memory $x secret 1)")).program
    assert p.layout["separation"] >= 1 << 32


def _successors(f, k):
    mi = f.insts[k]
    pos = {x.addr: i for i, x in enumerate(f.insts)}
    out = []
    for op in mi.ops:
        if op.opcode in ("BRANCH", "CBRANCH") and op.inputs[0].space == "ram":
            out.append(pos[op.inputs[0].name])
    stops = any(op.opcode == "RETURN" or (op.opcode == "BRANCH" and op.inputs[0].space == "ram")
                for op in mi.ops)
    if not stops and k + 1 < len(f.insts):
        out.append(k + 1)
    return out


def _flags_clean_at_memory_ops(p: MirProgram) -> bool:
    # forward dataflow: are the live flags possibly written by a DIT instruction?
    for f in p.functions:
        n = len(f.insts)
        dirty_in = [False] * n
        work = list(range(n))
        while work:
            k = work.pop()
            mi = f.insts[k]
            d = mi.dit if mi.flags_written else dirty_in[k]
            for s in _successors(f, k):
                if d and not dirty_in[s]:
                    dirty_in[s] = True
                    work.append(s)
        if any(dirty_in[k] and mi.mnemonic in MEMORY_MNEMONICS for k, mi in enumerate(f.insts)):
            return False
    return True


@given(st.integers(0, 10_000), st.floats(0.3, 0.9))
def test_flag_hygiene(seed, density):
    src = gen(seed, 120, density).text
    assert _flags_clean_at_memory_ops(compile_source(src).program)


def test_flag_warning_without_scrubbing():
    p = lower(optimize_module(ir_of(CALLS)), scrub_flags=False)
    assert not _flags_clean_at_memory_ops(p)
    warnings = [w for v in verify_program(p) for w in v.warnings]
    assert any("flag" in w.lower() or "nzcv" in w.lower() for w in warnings)


def test_text_disassembly_lists_manifest():
    text = format_program(compile_source(CALLS).program)
    assert text.splitlines()[1].startswith("; manifest {")
    assert "cselDIT" in text and "MULTIEQUAL" in text


# -- container -------------------------------------------------------------------------

def test_manifest_section_is_canonical_json(tmp_path):
    p = compile_source(FIG_SHAPE).program
    data = emit_container(p, tmp_path / "m.ctw")
    assert data.startswith(MAGIC)
    text = read_manifest_text(data)
    assert text == p.manifest.to_json()
    d = Manifest.from_json(text).to_dict()
    assert d["functions"] == [
        {"paramSecrecy": [True], "returnSecrecy": [], "trusted": False},
        {"paramSecrecy": [False], "returnSecrecy": [], "trusted": False},
    ]
    assert d["globalsSecrecy"] == [] and d["memories"] == [{"imported": True, "secret": False}]
    assert " " not in text and text == Manifest.from_json(text).to_json()


def test_empty_module_container(tmp_path):
    p = compile_source("(module)").program
    data = emit_container(p, tmp_path / "e.ctw")
    q = read_container(tmp_path / "e.ctw")
    assert q.functions == [] and to_bytes(q) == data


@pytest.mark.parametrize("name", corpus.names())
def test_container_round_trip(name, tmp_path):
    p = compile_source(corpus.source(name)).program
    data = emit_container(p, tmp_path / "c.ctw")
    q = read_container(tmp_path / "c.ctw")
    assert program_to_dict(q) == program_to_dict(p)
    assert to_bytes(q) == data


@given(st.integers(0, 10_000), st.integers(10, 150))
def test_container_round_trip_generated(seed, size):
    p = compile_source(gen(seed, size).text).program
    data = to_bytes(p)
    assert to_bytes(from_bytes(data)) == data


def test_identity_patch_is_byte_identical(tmp_path):
    path = tmp_path / "t.ctw"
    data = emit_container(compile_source(corpus.source("tea")).program, path)
    assert patch_manifest(path, read_container(path).manifest) == data
    assert path.read_bytes() == data


def test_patch_replaces_manifest_only():
    p = compile_source(corpus.source("tea")).program
    data = to_bytes(p)
    man = p.manifest.copy()
    man.functions[0].paramSecrecy[0] = True
    patched = patch_manifest_bytes(data, man)
    old = dict(decode_sections(data))
    new = dict(decode_sections(patched))
    assert {k: v for k, v in old.items() if k != TAG_MANIFEST} == {k: v for k, v in new.items() if k != TAG_MANIFEST}
    assert new[TAG_MANIFEST].decode() == man.to_json()


def test_flipping_param_secrecy_flips_verdict():
    src = """(module (memory $m 1)
      (func $f untrusted (param $i i32) (result i32) (i32.load $m (local.get $i))))"""
    p = compile_source(src).program
    assert [v.status for v in verify_program(p)] == ["safe"]
    man = p.manifest.copy()
    man.functions[0].paramSecrecy[0] = True
    q = from_bytes(patch_manifest_bytes(to_bytes(p), man))
    v = verify_program(q)[0]
    assert v.status == "unsafe" and "secret-address" in v.classes


def test_marking_trusted_skips_function():
    src = dict((n, t) for n, t, _ in corpus.leaky())["branch_if"]
    p = compile_source(src, permissive=True).program
    assert verify_program(p)[0].status == "unsafe"
    man = p.manifest.copy()
    for fs in man.functions:
        fs.trusted = True
    q = from_bytes(patch_manifest_bytes(to_bytes(p), man))
    assert verify_program(q) == []


@pytest.mark.parametrize("mangle", [
    lambda d: b"XXXX" + d[4:],
    lambda d: d[:-3],
    lambda d: d[:8],
    lambda d: d[:4] + (99).to_bytes(4, "little") + d[8:],
])
def test_malformed_containers_rejected(mangle):
    data = to_bytes(compile_source(corpus.source("tea")).program)
    with pytest.raises(ContainerError):
        from_bytes(mangle(data))


def test_manifest_length_mismatch_rejected():
    p = compile_source(corpus.source("tea")).program
    man = p.manifest.copy()
    man.functions.pop()
    q = from_bytes(patch_manifest_bytes(to_bytes(p), man))
    with pytest.raises(ContainerError):
        verify_program(q)
