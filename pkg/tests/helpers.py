"""Shared builders for tests: compiled snippets and hand-patched MIR fixtures."""

from __future__ import annotations

import copy
from pathlib import Path

from ctwasm import corpus
from ctwasm.front.ast import parse_text
from ctwasm.front.lower import lower_to_ssa
from ctwasm.front.typecheck import typecheck
from ctwasm.mir.core import MachineInst, PcodeOp, Varnode, const, reg
from ctwasm.pipeline import compile_source

FIXTURES = Path(__file__).parent / "fixtures"

# Public memory, one public param that selects between two loads.
BRANCHY = """(module (memory $m 1)
 (func $f untrusted (param $x i32) (result i32)
  (if (result i32) (local.get $x)
    (then (i32.load $m (i32.const 4)))
    (else (i32.load $m (local.get $x))))))"""

SNIPPET = corpus.source("update_snippet")


def fixture(name: str) -> str:
    return (FIXTURES / name).read_text()


def ir_of(text: str, permissive: bool = False):
    return lower_to_ssa(typecheck(parse_text(text)), permissive=permissive)


def compiled(text: str, **kw):
    return compile_source(text, **kw).program


def wide_offset_program():
    """A linear-memory load whose offset register is used at full 64 bits
    (the zero-extension is replaced by a plain copy)."""
    p = copy.deepcopy(compiled(BRANCHY))
    for mi in p.functions[0].insts:
        for k, op in enumerate(mi.ops):
            if op.opcode == "INT_ZEXT" and op.inputs[0].size == 4:
                src = op.inputs[0]
                mi.ops[k] = PcodeOp("COPY", op.output, [Varnode(src.space, src.name, 8)])
                return p
    raise AssertionError("no zero-extended offset found")


def two_target_program():
    """The conditional branch is replaced by one indirect branch whose target
    is ``else_block + (x != 0) * (then_block - else_block)``.

    Returns (program, then_addr, else_addr).
    """
    p = copy.deepcopy(compiled(BRANCHY))
    f = p.functions[0]
    cb = f.insts[0]
    then_addr = cb.ops[1].inputs[0].name
    else_addr = f.insts[1].ops[0].inputs[0].name
    delta = then_addr - else_addr
    u = lambda n, size=8: Varnode("unique", 900 + n, size)  # noqa: E731
    ops = [
        PcodeOp("INT_NOTEQUAL", u(0, 1), [reg("x1", 4), const(0, 4)]),
        PcodeOp("INT_ZEXT", u(1), [u(0, 1)]),
        PcodeOp("INT_MULT", u(2), [u(1), const(delta, 8)]),
        PcodeOp("INT_ADD", u(3), [const(else_addr, 8), u(2)]),
        PcodeOp("BRANCHIND", None, [u(3)]),
    ]
    f.insts[0] = MachineInst(cb.addr, "br", ops, text="br (computed)")
    return p, then_addr, else_addr
