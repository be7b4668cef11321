"""Per-function constant-time verification of a lowered program."""

from __future__ import annotations

from ..errors import ContainerError
from ..manifest import Manifest
from ..mir.container import read_container
from ..mir.core import DIT_ALLOWLIST, MirProgram
from .access import CASES, Matcher
from .model import Verdict, Violation
from .taint import AnalysisError, TaintState, propagate_taint, resolve_target
from .tree import TreeError, build_tree
from .view import FunctionView, build_view, is_inter

BRANCH_OPS = {"CBRANCH", "BRANCH", "BRANCHIND", "CALL", "CALLIND", "RETURN"}
MAX_WITNESSES = 16


class _Ctx:
    def __init__(self, view: FunctionView, matcher: Matcher, state: TaintState):
        self.view = view
        self.matcher = matcher
        self.state = state
        self.violations = []
        self.witness_budget = MAX_WITNESSES

    def add(self, cls, pos, detail, v=None):
        w = []
        if v is not None and self.witness_budget > 0:
            self.witness_budget -= 1
            try:
                tree = build_tree(self.view, v, self.matcher)
                w = tree.to_nested(6, mark=lambda k: k in self.state.tainted)
            except TreeError as e:
                w = [f"tree unavailable: {e}"]
        self.violations.append(Violation(cls, self.view.insts[pos].addr, detail, w))


def check_branches(view: FunctionView, state: TaintState, ctx: _Ctx | None = None) -> list:
    """Inter-instruction CBRANCH conditions and BRANCHIND targets must be
    untainted; pcode-relative branches are allowed (their MULTIEQUALs were
    already tainted during propagation)."""
    ctx = ctx or _Ctx(view, Matcher(view), state)
    start = len(ctx.violations)
    for pos, mi in enumerate(view.insts):
        for op in mi.ops:
            if op.opcode == "CBRANCH" and is_inter(op) and state.is_tainted(op.inputs[1]):
                ctx.add("secret-branch", pos, f"{mi.text}: condition depends on a secret", op.inputs[1])
            elif op.opcode == "BRANCHIND" and state.is_tainted(op.inputs[0]):
                ctx.add("secret-branch", pos, f"{mi.text}: indirect target depends on a secret", op.inputs[0])
    return ctx.violations[start:]


def _resolve_branchind(view: FunctionView, ctx: _Ctx | None):
    extra = {}
    for pos, mi in enumerate(view.insts):
        for op in mi.ops:
            if op.opcode == "BRANCHIND":
                tgt = resolve_target(view, op.inputs[0])
                if tgt is not None and tgt in view.index_of:
                    extra.setdefault(pos, []).append(view.index_of[tgt])
                elif ctx is not None:
                    ctx.add("unresolvable-branch", pos, f"{mi.text}: no single static destination")
    return extra


def check_calls(view: FunctionView, state: TaintState, ctx: _Ctx | None = None):
    """Returns (violations, unsupported reasons)."""
    ctx = ctx or _Ctx(view, Matcher(view), state)
    start = len(ctx.violations)
    reasons = []
    p = view.program
    manifest = p.manifest
    entries = {f.entry: f for f in p.functions}
    for pos, mi in enumerate(view.insts):
        for op in mi.ops:
            if op.opcode not in ("CALL", "CALLIND"):
                continue
            tgt = state.call_targets.get(pos)
            if tgt is None or tgt not in entries:
                ctx.add("unresolvable-branch", pos, f"{mi.text}: call target not statically resolvable")
                continue
            callee = entries[tgt]
            sig = manifest.functions[callee.index]
            if sig.trusted:
                reasons.append(f"{mi.text} at {mi.addr:#x} calls trusted function {callee.name}")
                continue
            if op.opcode == "CALLIND" and state.is_tainted(op.inputs[0]):
                ctx.add("secret-branch", pos, f"{mi.text}: call target depends on a secret", op.inputs[0])
            if len(op.inputs) < 2 or op.inputs[1].space != "reg" or op.inputs[1].name != "x0":
                ctx.add("interface-mismatch", pos, f"{mi.text}: context pointer not passed through")
                continue
            args = op.inputs[2:]
            if len(args) != len(sig.paramSecrecy):
                ctx.add("interface-mismatch", pos,
                        f"{mi.text}: {len(args)} arguments for {len(sig.paramSecrecy)} parameters")
                continue
            for i, (a, sec) in enumerate(zip(args, sig.paramSecrecy)):
                if not sec and state.is_tainted(a):
                    ctx.add("interface-mismatch", pos,
                            f"{mi.text}: secret argument {i} passed to public parameter of {callee.name}", a)
    return ctx.violations[start:], reasons


def _check_returns(view: FunctionView, state: TaintState, ctx: _Ctx):
    sig = view.program.manifest.functions[view.func.index]
    for pos, mi in enumerate(view.insts):
        for op in mi.ops:
            if op.opcode != "RETURN":
                continue
            if len(op.inputs) != len(sig.returnSecrecy):
                ctx.add("interface-mismatch", pos,
                        f"returns {len(op.inputs)} values, signature has {len(sig.returnSecrecy)}")
                continue
            for v, sec in zip(op.inputs, sig.returnSecrecy):
                if not sec and state.is_tainted(v):
                    ctx.add("interface-mismatch", pos, "secret value returned as public", v)


def _check_memory(view: FunctionView, state: TaintState, ctx: _Ctx):
    manifest = view.program.manifest
    for (pos, k), acc in sorted(state.accesses.items()):
        mi = view.insts[pos]
        op = mi.ops[k]
        what = "load" if op.opcode == "LOAD" else "store"
        if acc.kind == "unmatched":
            ctx.add("unmatched-access", pos, f"{what} {mi.text}: {acc.reason}", op.inputs[0])
            continue
        if state.is_tainted(op.inputs[0]):
            ctx.add("secret-address", pos, f"{what} address depends on a secret", op.inputs[0])
        if op.opcode == "STORE" and state.is_tainted(op.inputs[1]):
            public = ((acc.kind == "global" and not manifest.globalsSecrecy[acc.index])
                      or (acc.kind == "linear-memory" and not manifest.memories[acc.index].secret)
                      or acc.kind == "memory-base")
            if public:
                ctx.add("secret-to-public-store", pos, f"secret stored to public {acc.kind} {acc.index}",
                        op.inputs[1])


def _pcode_relative(op) -> bool:
    # csel's internal skip is not a machine branch, so it does not exempt the instruction
    return op.opcode == "CBRANCH" and op.inputs[0].space == "rel"


def _check_red_ops(view: FunctionView, state: TaintState, ctx: _Ctx):
    for pos, mi in enumerate(view.insts):
        if mi.mnemonic in DIT_ALLOWLIST or mi.pseudo:
            continue
        if any(op.opcode in BRANCH_OPS and not _pcode_relative(op) for op in mi.ops):
            continue  # conditions, targets and arguments have dedicated checks
        for op in mi.ops:
            bad = [v for v in op.inputs if state.is_tainted(v)]
            if bad:
                ctx.add("secret-into-red-op", pos, f"{mi.text}: secret operand to non-DIT instruction", bad[0])
                break


def _flag_warnings(view: FunctionView, state: TaintState) -> list:
    """Loads/stores whose live flags were written from secret operands."""
    out = []
    last_writer = None
    preds = {}
    for s, ts in enumerate(view.succ):
        for t in ts:
            preds.setdefault(t, []).append(s)
    # block leaders: branch targets and merge points, not plain fall-through
    leaders = {t for t, ps in preds.items() if len(ps) != 1 or ps[0] != t - 1}
    for pos, mi in enumerate(view.insts):
        if pos in leaders:
            last_writer = None
        if any(op.opcode in ("LOAD", "STORE") for op in mi.ops) and last_writer is not None:
            if any(state.is_tainted(v) for op in last_writer.ops for v in op.inputs):
                out.append(f"{mi.text} at {mi.addr:#x} executes with flags from secret operands "
                           f"({last_writer.text} at {last_writer.addr:#x})")
        if mi.flags_written:
            last_writer = mi
    return out


def verify_function(p: MirProgram, index: int, cases=CASES) -> Verdict:
    f = p.functions[index]
    view = build_view(p, f)
    if view.problems:
        return Verdict(f.name, "unsupported", reasons=list(dict.fromkeys(view.problems)))
    matcher = Matcher(view, cases)
    extra = _resolve_branchind(view, None)
    try:
        state = propagate_taint(view, matcher, extra_succ=extra)
    except AnalysisError as e:
        return Verdict(f.name, "unsupported", reasons=[str(e)])
    ctx = _Ctx(view, matcher, state)
    for pos, k, tgt in view.bad_targets:
        ctx.add("unresolvable-branch", pos, f"branch to {tgt:#x} outside the function")
    for pos in view.falls_off:
        ctx.add("unresolvable-branch", pos, "control falls off the end of the function")
    _resolve_branchind(view, ctx)
    check_branches(view, state, ctx)
    _, reasons = check_calls(view, state, ctx)
    _check_returns(view, state, ctx)
    _check_memory(view, state, ctx)
    _check_red_ops(view, state, ctx)
    for s in view.stack_problems:
        reasons.append(s)
    warnings = _flag_warnings(view, state)
    if ctx.violations:
        return Verdict(f.name, "unsafe", ctx.violations, warnings, reasons)
    if reasons:
        return Verdict(f.name, "unsupported", [], warnings, reasons)
    return Verdict(f.name, "safe", [], warnings)


def check_manifest(p: MirProgram):
    """Raise :class:`ContainerError` if the manifest does not describe the code."""
    m = p.manifest
    if not isinstance(m, Manifest):
        raise ContainerError("program has no manifest")
    if len(m.functions) != len(p.functions):
        raise ContainerError(f"manifest lists {len(m.functions)} functions, code has {len(p.functions)}")
    for fn, sig in zip(p.functions, m.functions):
        if len(sig.paramSecrecy) != fn.n_params:
            raise ContainerError(f"{fn.name}: manifest has {len(sig.paramSecrecy)} parameters, code has {fn.n_params}")
        if len(sig.returnSecrecy) > 1:
            raise ContainerError(f"{fn.name}: at most one return value is supported")
    if len(m.globalsSecrecy) != len(p.globals):
        raise ContainerError("manifest and code disagree on the number of globals")
    if len(m.memories) != len(p.memories):
        raise ContainerError("manifest and code disagree on the number of memories")
    g = (m.globalsOffset, m.globalsOffset + 8 * len(m.globalsSecrecy))
    mm = (m.memoriesOffset, m.memoriesOffset + 8 * len(m.memories))
    if g[0] < g[1] and mm[0] < mm[1] and g[0] < mm[1] and mm[0] < g[1]:
        raise ContainerError("manifest globals and memory slots overlap")


def verify_program(p: MirProgram, function=None, cases=CASES) -> list:
    """One :class:`Verdict` per untrusted function (trusted ones are skipped)."""
    check_manifest(p)
    out = []
    for i, f in enumerate(p.functions):
        if p.manifest.functions[i].trusted:
            continue
        if function is not None and f.name != function and f.name.lstrip("$") != str(function).lstrip("$"):
            continue
        out.append(verify_function(p, i, cases))
    return out


def verify_container(path, function=None) -> list:
    return verify_program(read_container(path), function)


def module_safe(verdicts) -> bool:
    return all(v.status == "safe" for v in verdicts)
