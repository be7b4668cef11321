"""Small-step MIR execution that records a leakage trace.

Every machine instruction is compiled once into a Python closure; a run
dispatches on instruction positions. Trace events are tuples:

* ``("B", addr, target)`` at every inter-instruction branch, call and return
  (the fall-through address for a not-taken conditional branch),
* ``("M", addr, address, size, "L"|"S")`` at every load and store,
* ``("F", addr, (N, Z, C, V))`` with the live flags at every load and store,
* ``("O", addr, operands)`` at every non-DIT instruction,
* ``("T", kind, step)`` when execution traps,
* ``("P", ...)`` public outputs appended after the run.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from ..errors import Trap
from ..layout import CTX_BASE
from ..mir.core import DIT_ALLOWLIST, MirProgram
from .memory import Memory, build_memory
from .semantics import mask

DEFAULT_FUEL = 10_000_000
MAX_DEPTH = 200
FLAG_INDEX = {"NF": 0, "ZF": 1, "CF": 2, "VF": 3}


class _Return(Exception):
    pass


@dataclass
class MachineState:
    memory: Memory
    fuel: int = DEFAULT_FUEL
    trace: list = field(default_factory=list)
    flags: list = field(default_factory=lambda: [0, 0, 0, 0])
    sp: int = 0
    steps: int = 0
    prev: int = -1
    depth: int = 0
    record: bool = True


@dataclass
class RunResult:
    value: int | None
    trace: list
    trap: str | None
    steps: int
    state: MachineState


# -- compilation -------------------------------------------------------------

class _Fn:
    def __init__(self, f, code, slots, n_params):
        self.f = f
        self.code = code
        self.slots = slots
        self.n_params = n_params
        self.nslots = len(slots)


def _slot_map(f):
    slots = {("reg", "x0"): 0, ("reg", "sp"): 1}
    for i in range(f.n_params):
        slots[("reg", f"x{i + 1}")] = 2 + i
    for mi in f.insts:
        for op in mi.ops:
            for v in [op.output, *op.inputs]:
                if v is not None and v.space in ("reg", "unique", "flag"):
                    slots.setdefault((v.space, v.name), len(slots))
    return slots


def _expr(op, X, sizes, out):
    """Python expression for a value-producing micro-op."""
    n = op.opcode
    m = mask(out) if out else 0
    a = X[0] if X else None
    b = X[1] if len(X) > 1 else None
    if n == "COPY":
        return f"({a}) & {m}"
    if n == "INT_ADD":
        return f"({a} + {b}) & {m}"
    if n == "INT_SUB":
        return f"({a} - {b}) & {m}"
    if n == "INT_MULT":
        return f"({a} * {b}) & {m}"
    if n == "INT_XOR":
        return f"{a} ^ {b}"
    if n == "INT_AND":
        return f"{a} & {b}"
    if n == "INT_OR":
        return f"{a} | {b}"
    if n == "INT_LEFT":
        return f"(({a} << {b}) & {m} if {b} < {8 * out} else 0)"
    if n == "INT_RIGHT":
        return f"({a} >> {b} if {b} < {8 * out} else 0)"
    if n == "INT_SRIGHT":
        s = sizes[0]
        return f"((({a} ^ {1 << (8 * s - 1)}) - {1 << (8 * s - 1)}) >> min({b}, {8 * out - 1})) & {m}"
    if n == "INT_EQUAL":
        return f"int({a} == {b})"
    if n == "INT_NOTEQUAL":
        return f"int({a} != {b})"
    if n == "INT_LESS":
        return f"int({a} < {b})"
    if n == "INT_LESSEQUAL":
        return f"int({a} <= {b})"
    if n == "INT_SLESS":
        s = sizes[0]
        h = 1 << (8 * s - 1)
        return f"int(({a} ^ {h}) < ({b} ^ {h}))"
    if n == "INT_ZEXT":
        return f"{a}"
    if n == "INT_SEXT":
        s = sizes[0]
        h = 1 << (8 * s - 1)
        return f"((({a} ^ {h}) - {h}) & {m})"
    if n == "SUBPIECE":
        return f"(({a} >> (8 * {b})) & {m})"
    if n == "INT_2COMP":
        return f"(-{a}) & {m}"
    if n == "BOOL_NEGATE":
        return f"int(not {a})"
    if n in ("INT_DIV", "INT_REM", "INT_SDIV", "INT_SREM"):
        return f"_div({n!r}, {a}, {b}, {sizes[0]}, {sizes[1]}, {out})"
    return None


def _compile_function(p: MirProgram, f, entries) -> _Fn:
    slots = _slot_map(f)
    index_of = {mi.addr: i for i, mi in enumerate(f.insts)}
    code = []
    for i, mi in enumerate(f.insts):
        src = _compile_inst(mi, i, f, slots, index_of, entries)
        env = {"Trap": Trap, "_div": _div, "_Return": _Return}
        exec(src, env)  # noqa: S102 - generated from our own IR
        code.append(env["_inst"])
    return _Fn(f, code, slots, f.n_params)


def _compile_inst(mi, pos, f, slots, index_of, entries) -> str:
    def ref(v):
        if v.space == "const":
            return str(v.name)
        if v.space in ("reg", "unique", "flag"):
            return f"R[{slots[(v.space, v.name)]}]"
        return repr(v.name)

    addr = mi.addr
    nxt = pos + 1 if pos + 1 < len(f.insts) else None
    nxt_addr = f.insts[pos + 1].addr if nxt is not None else None
    body = []
    w = body.append
    w(f"S.fuel -= {max(1, len(mi.ops))}")
    w("if S.fuel < 0: raise Trap('fuel')")
    w("S.steps += 1")
    rec = []
    defined = {(op.output.space, op.output.name) for op in mi.ops if op.output is not None}
    if mi.mnemonic not in DIT_ALLOWLIST and not mi.pseudo:
        ext = []
        is_call = any(op.opcode in ("CALL", "CALLIND") for op in mi.ops)
        for op in mi.ops:
            ins = op.inputs[:1] if op.opcode in ("CALL", "CALLIND") else op.inputs
            if is_call and op.opcode not in ("CALL", "CALLIND"):
                continue
            for v in ins:
                if v.space in ("reg", "unique", "flag") and (v.space, v.name) not in defined:
                    ext.append(ref(v))
        rec.append(f"T.append(('O', {addr}, ({', '.join(ext)}{',' if len(ext) == 1 else ''})))")
    if rec:
        w("if S.record:")
        w("    T = S.trace")
        for r in rec:
            w("    " + r)

    has_rel = any(op.opcode in ("CBRANCH", "BRANCH") and op.inputs[0].space == "rel" for op in mi.ops)
    if mi.pseudo:
        # parallel copy selected by the previously executed instruction
        tags = None
        lines = []
        for op in mi.ops:
            if op.opcode != "MULTIEQUAL":
                raise Trap("bad-op", f"{op.opcode} in phi")
            tags = op.tags
        if tags is None:
            w(f"return {nxt}")
        else:
            first = True
            for j, t in enumerate(tags):
                vals = [ref(op.inputs[j]) for op in mi.ops]
                outs = [ref(op.output) for op in mi.ops]
                lines.append(f"{'if' if first else 'elif'} S.prev == {t}:")
                lines.append(f"    {', '.join(outs)}, = ({', '.join(vals)},)")
                first = False
            lines.append("else:")
            lines.append(f"    raise Trap('phi', 'no MULTIEQUAL input from {{:#x}}'.format(S.prev))")
            body.extend(lines)
            w(f"S.prev = {addr}")
            w(f"return {nxt}")
    elif has_rel:
        body.extend(_compile_rel(mi, ref, addr, nxt, nxt_addr))
    else:
        for k, op in enumerate(mi.ops):
            body.extend(_compile_op(op, ref, addr, index_of, entries, slots, mi))
        w(f"S.prev = {addr}")
        if nxt is None:
            w("raise Trap('fell-off', 'end of function')")
        else:
            w(f"return {nxt}")
    src = "def _inst(R, S, X):\n" + "\n".join("    " + line for line in body) + "\n"
    return src


def _mem_event(addr, a_expr, size, kind):
    return [
        "if S.record:",
        f"    S.trace.append(('M', {addr}, {a_expr}, {size}, {kind!r}))",
        f"    S.trace.append(('F', {addr}, tuple(S.flags)))",
    ]


def _compile_op(op, ref, addr, index_of, entries, slots, mi):
    n = op.opcode
    out = op.output
    X = [ref(v) for v in op.inputs]
    L = []
    if n == "LOAD":
        L.append(f"_a = {X[0]}")
        L.extend(_mem_event(addr, "_a", out.size, "L"))
        L.append(f"{ref(out)} = S.memory.load(_a, {out.size})")
    elif n == "STORE":
        L.append(f"_a = {X[0]}")
        L.extend(_mem_event(addr, "_a", op.inputs[1].size, "S"))
        L.append(f"S.memory.store(_a, {op.inputs[1].size}, {X[1]})")
    elif n == "BRANCH":
        t = op.inputs[0].name
        L.append(f"if S.record: S.trace.append(('B', {addr}, {t}))")
        L.append(f"S.prev = {addr}")
        L.append(f"return {index_of[t]}" if t in index_of else "raise Trap('bad-branch')")
    elif n == "CBRANCH":
        t = op.inputs[0].name
        L.append(f"if {X[1]}:")
        L.append(f"    if S.record: S.trace.append(('B', {addr}, {t}))")
        L.append(f"    S.prev = {addr}")
        L.append(f"    return {index_of[t]}" if t in index_of else "    raise Trap('bad-branch')")
        if op is mi.ops[-1]:
            # not taken: record the fall-through
            L.append(f"if S.record: S.trace.append(('B', {addr}, 'next'))")
    elif n == "BRANCHIND":
        L.append(f"_t = {X[0]}")
        L.append(f"if S.record: S.trace.append(('B', {addr}, _t))")
        L.append(f"S.prev = {addr}")
        L.append("_i = X.index_of.get(_t)")
        L.append("if _i is None: raise Trap('bad-branch')")
        L.append("return _i")
    elif n in ("CALL", "CALLIND"):
        L.append(f"_t = {X[0]}")
        L.append(f"if S.record: S.trace.append(('B', {addr}, _t))")
        L.append(f"_r = X.call(_t, ({', '.join(X[2:])}{',' if len(X) == 3 else ''}))")
    elif n == "INDIRECT":
        L.append(f"{ref(out)} = (_r or 0) & {mask(out.size)}")
    elif n == "RETURN":
        L.append(f"if S.record: S.trace.append(('B', {addr}, 'ret'))")
        L.append(f"S.prev = {addr}")
        L.append(f"raise _Return({X[0] if X else 'None'})")
    elif n == "MULTIEQUAL":
        raise Trap("bad-op", "MULTIEQUAL outside a phi or pcode-relative join")
    else:
        e = _expr(op, X, [v.size for v in op.inputs], out.size)
        if e is None:
            L.append(f"raise Trap('bad-op', {n!r})")
        else:
            L.append(f"{ref(out)} = {e}")
    if out is not None and out.space == "flag":
        L.append(f"S.flags[{FLAG_INDEX[str(out.name).split('.')[0]]}] = {ref(out)}")
    if out is not None and out.space == "reg" and str(out.name).startswith("sp."):
        L.append(f"S.sp = {ref(out)}")
    return L


def _compile_rel(mi, ref, addr, nxt, nxt_addr):
    """Instructions with pcode-relative branches run as a tiny state machine."""
    L = ["_k = 0", "_came = -1", f"while _k < {len(mi.ops)}:"]
    for k, op in enumerate(mi.ops):
        kw = "if" if k == 0 else "elif"
        L.append(f"    {kw} _k == {k}:")
        n = op.opcode
        if n in ("CBRANCH", "BRANCH") and op.inputs[0].space == "rel":
            tgt = op.inputs[0].name
            cond = ref(op.inputs[1]) if n == "CBRANCH" else "1"
            L.append(f"        if {cond}:")
            L.append(f"            _came = {k}; _k = {tgt}; continue")
        elif n == "MULTIEQUAL":
            first = True
            for j, t in enumerate(op.tags):
                L.append(f"        {'if' if first else 'elif'} _came == {t}: {ref(op.output)} = {ref(op.inputs[j])}")
                first = False
            L.append("        else: raise Trap('phi', 'no pcode-relative input')")
        else:
            for line in _compile_op(op, ref, addr, {}, {}, {}, mi):
                L.append("        " + line)
        L.append(f"        _came = {k}; _k = {k + 1}")
    L.append(f"S.prev = {addr}")
    L.append(f"return {nxt}" if nxt is not None else "raise Trap('fell-off', 'end of function')")
    return L


def _div(n, a, b, sa, sb, out):
    from .semantics import apply
    return apply(n, [a, b], [sa, sb], out)


class _Frame:
    """Per-call helper handed to compiled instructions."""

    __slots__ = ("machine", "index_of", "S")

    def __init__(self, machine, fn, S):
        self.machine = machine
        self.index_of = {mi.addr: i for i, mi in enumerate(fn.f.insts)}
        self.S = S

    def call(self, target, args):
        return self.machine.call_addr(self.S, target, args)


class CompiledProgram:
    def __init__(self, p: MirProgram):
        self.p = p
        self.entries = {f.entry: i for i, f in enumerate(p.functions)}
        self.fns = [_compile_function(p, f, self.entries) for f in p.functions]
        self._frames = {}

    def call_addr(self, S, target, args):
        idx = self.entries.get(target)
        if idx is None:
            raise Trap("bad-call", f"no function at {target:#x}")
        return self.invoke(S, idx, args)

    def invoke(self, S, idx, args):
        fn = self.fns[idx]
        if len(args) != fn.n_params:
            raise Trap("bad-call", f"{fn.f.name} expects {fn.n_params} arguments")
        if S.depth >= MAX_DEPTH:
            raise Trap("call-depth")
        R = [0] * fn.nslots
        R[0] = CTX_BASE
        R[1] = S.sp
        for i, (a, size) in enumerate(zip(args, fn.f.param_sizes)):
            R[2 + i] = a & mask(size)
        X = _Frame(self, fn, S)
        code = fn.code
        S.depth += 1
        pc = 0
        try:
            while True:
                pc = code[pc](R, S, X)
        except _Return as r:
            return r.args[0]
        except IndexError:
            raise Trap("fell-off", "end of function") from None
        finally:
            S.depth -= 1


_CACHE: dict = {}


def compile_program(p: MirProgram) -> CompiledProgram:
    key = id(p)
    hit = _CACHE.get(key)
    if hit is not None and hit[0] is p:
        return hit[1]
    cp = CompiledProgram(p)
    if len(_CACHE) > 64:
        _CACHE.clear()
    _CACHE[key] = (p, cp)
    return cp


def public_outputs(p: MirProgram, fidx: int, value, mem: Memory, global_slots) -> list:
    out = []
    m = p.manifest
    sig = m.functions[fidx] if m and fidx < len(m.functions) else None
    if sig is not None and value is not None and sig.returnSecrecy and not sig.returnSecrecy[0]:
        out.append(("P", "ret", value))
    if m is not None:
        ctx = mem.by_name("ctx")
        for k, sec in enumerate(m.globalsSecrecy):
            if not sec and k < len(global_slots):
                o = global_slots[k]
                out.append(("P", "global", k, int.from_bytes(ctx.buf[o:o + 8], "little")))
        for k, md in enumerate(m.memories):
            if not md.secret:
                r = mem.by_name(f"mem{k}")
                out.append(("P", "mem", k, hashlib.sha256(r.buf).hexdigest()))
    return out


def run(p: MirProgram, entry, args=(), memories=None, global_values=None, fuel: int = DEFAULT_FUEL,
        record: bool = True, outputs: bool = True) -> RunResult:
    """Execute ``entry`` (name or index) and return its value and trace."""
    from ..layout import STACK_TOP, Layout

    fidx = entry if isinstance(entry, int) else p.functions.index(p.function(entry))
    cp = compile_program(p)
    mem = build_memory(p, memories, global_values)
    S = MachineState(mem, fuel=fuel, sp=STACK_TOP, record=record)
    value = None
    trap = None
    try:
        value = cp.invoke(S, fidx, list(args))
    except Trap as t:
        trap = t.kind
        S.trace.append(("T", t.kind, S.steps))
    except RecursionError:
        trap = "call-depth"
        S.trace.append(("T", trap, S.steps))
    if outputs:
        lay = Layout.from_dict(p.layout) if p.layout else Layout(len(p.globals), len(p.memories))
        S.trace.extend(public_outputs(p, fidx, value, mem, [lay.global_slot(k) for k in range(len(p.globals))]))
    return RunResult(value, S.trace, trap, S.steps, S)
