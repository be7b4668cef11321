"""Per-function index over machine IR: definitions, CFG and stack facts.

The machine IR already is pcode-like SSA, so "lifting" is the identity and
this module only builds the lookup tables the analyses need.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from ..mir.core import ARITY, HAS_OUTPUT, MirFunction, MirProgram, Varnode

TERMINATING = {"RETURN", "BRANCH", "BRANCHIND"}
_PARAM = re.compile(r"^x([1-9]\d*)$")


def vkey(v: Varnode):
    return (v.space, v.name)


def is_inter(op) -> bool:
    """Branch whose target is another machine instruction (not pcode-relative)."""
    return op.opcode in ("CBRANCH", "BRANCH") and op.inputs and op.inputs[0].space == "ram"


@dataclass
class FunctionView:
    program: MirProgram
    func: MirFunction
    insts: list
    index_of: dict  # addr -> position
    defs: dict  # vkey -> (inst position, op index)
    problems: list = field(default_factory=list)  # reasons the function is not analyzable
    succ: list = field(default_factory=list)  # position -> [position]
    falls_off: list = field(default_factory=list)  # positions that run past the function end
    bad_targets: list = field(default_factory=list)  # (position, op index, target)
    frame: int = 0  # bytes reserved below the entry stack pointer
    stack_problems: list = field(default_factory=list)

    def op_at(self, key):
        pos, k = self.defs[key]
        return self.insts[pos].ops[k]

    def def_op(self, v: Varnode):
        d = self.defs.get(vkey(v))
        return None if d is None else self.insts[d[0]].ops[d[1]]

    def def_inst(self, v: Varnode):
        d = self.defs.get(vkey(v))
        return None if d is None else self.insts[d[0]]

    def param_index(self, v: Varnode):
        """1-based index for ``x1..xn`` entry parameters, else None."""
        if v.space != "reg" or vkey(v) in self.defs or not isinstance(v.name, str):
            return None
        m = _PARAM.match(v.name)
        return int(m.group(1)) if m else None

    def is_input(self, v: Varnode) -> bool:
        """Registers that legitimately have no definition in the function."""
        if v.space != "reg" or vkey(v) in self.defs:
            return False
        if v.name in ("x0", "sp"):
            return True
        p = self.param_index(v)
        return p is not None and p <= self.func.n_params


def build_view(p: MirProgram, f: MirFunction) -> FunctionView:
    insts = sorted(f.insts, key=lambda i: i.addr)
    index_of = {mi.addr: i for i, mi in enumerate(insts)}
    view = FunctionView(p, f, insts, index_of, {})
    for i, mi in enumerate(insts):
        for k, op in enumerate(mi.ops):
            if op.opcode not in ARITY:
                view.problems.append(f"unknown micro-op {op.opcode} at {mi.addr:#x}")
                continue
            n = ARITY[op.opcode]
            if n is not None and len(op.inputs) != n:
                view.problems.append(f"{op.opcode} at {mi.addr:#x} has {len(op.inputs)} inputs, expected {n}")
            if (op.output is not None) != (op.opcode in HAS_OUTPUT):
                view.problems.append(f"{op.opcode} at {mi.addr:#x} has a wrong output arity")
            if op.output is not None:
                key = vkey(op.output)
                if key in view.defs:
                    view.problems.append(f"{op.output.name} is assigned twice (not SSA)")
                view.defs[key] = (i, k)
    for i, mi in enumerate(insts):
        for op in mi.ops:
            for v in op.inputs:
                if v.space in ("reg", "unique", "flag") and vkey(v) not in view.defs and not view.is_input(v):
                    view.problems.append(f"dangling varnode {v.name} read at {mi.addr:#x}")
    _cfg(view)
    _stack(view)
    return view


def _cfg(view: FunctionView):
    n = len(view.insts)
    view.succ = [[] for _ in range(n)]
    for i, mi in enumerate(view.insts):
        falls = True
        for k, op in enumerate(mi.ops):
            if op.opcode in ("CBRANCH", "BRANCH") and is_inter(op):
                tgt = op.inputs[0].name
                if tgt in view.index_of:
                    view.succ[i].append(view.index_of[tgt])
                else:
                    view.bad_targets.append((i, k, tgt))
                if op.opcode == "BRANCH":
                    falls = False
            elif op.opcode == "BRANCHIND":
                # resolved later by the call/branch checker; successors are
                # added there when the single target is inside the function
                falls = False
            elif op.opcode == "RETURN":
                falls = False
        if falls:
            if i + 1 < n:
                view.succ[i].append(i + 1)
            else:
                view.falls_off.append(i)


def _stack(view: FunctionView):
    """Accept only ``sp.1 = sp - D`` as the first instruction and
    ``sp.k = sp.1 + D`` directly before a return."""
    sp_writes = []
    for i, mi in enumerate(view.insts):
        for k, op in enumerate(mi.ops):
            if op.output is not None and op.output.space == "reg" and str(op.output.name).startswith("sp"):
                sp_writes.append((i, k, op))
    prologue = None
    for i, k, op in sp_writes:
        ins = op.inputs
        if (op.opcode == "INT_SUB" and i == 0 and ins[0] == Varnode("reg", "sp", 8)
                and ins[1].space == "const" and op.output.name == "sp.1" and prologue is None):
            prologue = ins[1].name
            continue
        ret_next = i + 1 < len(view.insts) and any(o.opcode == "RETURN" for o in view.insts[i + 1].ops)
        if (op.opcode == "INT_ADD" and prologue is not None and ins[0] == Varnode("reg", "sp.1", 8)
                and ins[1].space == "const" and ins[1].name == prologue and ret_next and len(view.insts[i].ops) == 1):
            continue
        view.stack_problems.append(f"unsupported stack-pointer update at {view.insts[i].addr:#x}")
    view.frame = prologue or 0
    if prologue is not None:
        # every return must be preceded by the matching epilogue
        for i, mi in enumerate(view.insts):
            if any(o.opcode == "RETURN" for o in mi.ops):
                prev = view.insts[i - 1] if i else None
                ok = prev is not None and any(
                    o.output is not None and str(o.output.name).startswith("sp.") and o.opcode == "INT_ADD"
                    for o in prev.ops)
                if not ok:
                    view.stack_problems.append(f"return at {mi.addr:#x} without stack epilogue")


def entry_of(p: MirProgram) -> dict:
    return {f.entry: f for f in p.functions}
