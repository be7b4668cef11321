"""Reference interpreter over micro-ops, with optional exact taint tracking.

This walks the machine IR directly through :func:`semantics.apply` instead of
compiling it, so it doubles as an independent check of :mod:`machine`: both
must produce the same value and the same trace. With ``taint=True`` it also
carries a shadow bit per varnode and per memory byte. Taint sources are secret
parameters, secret globals and secret memories; call results are tainted when
the callee declares a secret return or actually returns a tainted value.
A pcode-relative branch on a tainted condition taints the MULTIEQUAL outputs
of its instruction (the implicit flow of a csel).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import Trap
from ..layout import CTX_BASE, STACK_TOP, Layout
from ..mir.core import DIT_ALLOWLIST, MirProgram
from .machine import DEFAULT_FUEL, FLAG_INDEX, MAX_DEPTH, MachineState, public_outputs
from .memory import build_memory
from .semantics import apply, mask

DATA_SPACES = ("reg", "unique", "flag")


class _Return(Exception):
    def __init__(self, value, tainted):
        super().__init__(value)
        self.value = value
        self.tainted = tainted


@dataclass
class TaintResult:
    value: int | None
    trace: list
    trap: str | None
    steps: int
    tainted: dict = field(default_factory=dict)  # function index -> set of (space, name)
    value_tainted: bool = False


class _Shadow:
    """One taint byte per memory byte, region by region."""

    def __init__(self, memory):
        self.memory = memory
        self.bits = {r.name: bytearray(len(r.buf)) for r in memory.regions}

    def get(self, a, n) -> bool:
        r = self.memory.region(a, n)
        o = a - r.start
        return any(self.bits[r.name][o:o + n])

    def set(self, a, n, t: bool):
        r = self.memory.region(a, n)
        o = a - r.start
        self.bits[r.name][o:o + n] = (b"\x01" if t else b"\x00") * n


class Interpreter:
    def __init__(self, p: MirProgram, memory, fuel=DEFAULT_FUEL, record=True, taint=False):
        self.p = p
        self.S = MachineState(memory, fuel=fuel, sp=STACK_TOP, record=record)
        self.entries = {f.entry: i for i, f in enumerate(p.functions)}
        self.taint = taint
        self.shadow = _Shadow(memory) if taint else None
        self.tainted: dict = {}
        self._index = [{mi.addr: i for i, mi in enumerate(f.insts)} for f in p.functions]

    def seed_taint(self):
        """Mark secret globals and secret memories in the shadow."""
        m = self.p.manifest
        if not self.taint or m is None:
            return
        lay = Layout.from_dict(self.p.layout) if self.p.layout else Layout(len(self.p.globals), len(self.p.memories))
        for k, sec in enumerate(m.globalsSecrecy):
            if sec:
                self.shadow.set(CTX_BASE + lay.global_slot(k), 8, True)
        for k, md in enumerate(m.memories):
            if md.secret:
                name = f"mem{k}"
                self.shadow.bits[name][:] = b"\x01" * len(self.shadow.bits[name])

    # -- execution -----------------------------------------------------------

    def invoke(self, idx, args, arg_taint=None):
        S = self.S
        f = self.p.functions[idx]
        if len(args) != f.n_params:
            raise Trap("bad-call", f"{f.name} expects {f.n_params} arguments")
        if S.depth >= MAX_DEPTH:
            raise Trap("call-depth")
        sig = self.p.manifest.functions[idx] if self.p.manifest is not None else None
        env = {("reg", "x0"): CTX_BASE, ("reg", "sp"): S.sp}
        tset = self.tainted.setdefault(idx, set())
        local = set()
        for i, (a, size) in enumerate(zip(args, f.param_sizes)):
            key = ("reg", f"x{i + 1}")
            env[key] = a & mask(size)
            secret = bool(sig and sig.paramSecrecy[i]) or bool(arg_taint and arg_taint[i])
            if self.taint and secret:
                local.add(key)
                tset.add(key)
        S.depth += 1
        try:
            self._exec(idx, f, env, local)
        except _Return as r:
            declared = bool(sig and sig.returnSecrecy and sig.returnSecrecy[0])
            return r.value, (r.tainted or declared)
        finally:
            S.depth -= 1
        raise Trap("fell-off", "end of function")

    def _exec(self, idx, f, env, local):
        S = self.S
        insts = f.insts
        index_of = self._index[idx]
        taint = self.taint
        tset = self.tainted[idx]

        def val(v):
            if v.space in DATA_SPACES:
                try:
                    return env[(v.space, v.name)]
                except KeyError:
                    raise Trap("undefined", f"{v} read before definition") from None
            return v.name

        def tnt(v):
            return taint and v.space in DATA_SPACES and (v.space, v.name) in local

        def put(v, x, t):
            key = (v.space, v.name)
            env[key] = x
            if taint:
                if t:
                    local.add(key)
                    tset.add(key)
                else:
                    local.discard(key)
            if v.space == "flag":
                S.flags[FLAG_INDEX[str(v.name).split(".")[0]]] = x
            elif v.space == "reg" and str(v.name).startswith("sp."):
                S.sp = x

        pos = 0
        while True:
            if pos >= len(insts):
                raise Trap("fell-off", "end of function")
            mi = insts[pos]
            S.fuel -= max(1, len(mi.ops))
            if S.fuel < 0:
                raise Trap("fuel")
            S.steps += 1
            if S.record and mi.mnemonic not in DIT_ALLOWLIST and not mi.pseudo:
                S.trace.append(("O", mi.addr, self._operands(mi, val)))
            if mi.pseudo:
                if mi.ops:
                    tags = mi.ops[0].tags
                    if S.prev not in tags:
                        raise Trap("phi", f"no MULTIEQUAL input from {S.prev:#x}")
                    j = tags.index(S.prev)
                    picked = [(op.output, val(op.inputs[j]), tnt(op.inputs[j])) for op in mi.ops]
                    for out, x, t in picked:
                        put(out, x, t)
                    S.prev = mi.addr
                pos += 1
                continue
            nxt = self._step(mi, val, tnt, put, index_of)
            S.prev = mi.addr
            pos = pos + 1 if nxt is None else nxt

    def _operands(self, mi, val):
        defined = {(op.output.space, op.output.name) for op in mi.ops if op.output is not None}
        is_call = any(op.opcode in ("CALL", "CALLIND") for op in mi.ops)
        out = []
        for op in mi.ops:
            if is_call and op.opcode not in ("CALL", "CALLIND"):
                continue
            ins = op.inputs[:1] if op.opcode in ("CALL", "CALLIND") else op.inputs
            for v in ins:
                if v.space in DATA_SPACES and (v.space, v.name) not in defined:
                    out.append(val(v))
        return tuple(out)

    def _step(self, mi, val, tnt, put, index_of):
        """Run one machine instruction; return the next position or None."""
        S = self.S
        ops = mi.ops
        k = 0
        came = -1
        implicit = False
        result = (None, False)
        while k < len(ops):
            op = ops[k]
            n = op.opcode
            ins = op.inputs
            if n in ("CBRANCH", "BRANCH") and ins[0].space == "rel":
                cond = 1 if n == "BRANCH" else val(ins[1])
                if n == "CBRANCH" and tnt(ins[1]):
                    implicit = True
                if cond:
                    came, k = k, ins[0].name
                    continue
            elif n == "MULTIEQUAL":
                if came not in op.tags:
                    raise Trap("phi", "no pcode-relative input")
                j = op.tags.index(came)
                put(op.output, val(ins[j]), tnt(ins[j]) or implicit)
            elif n == "LOAD":
                a = val(ins[0])
                size = op.output.size
                self._mem_event(mi.addr, a, size, "L")
                x = S.memory.load(a, size)
                put(op.output, x, tnt(ins[0]) or (self.taint and self.shadow.get(a, size)))
            elif n == "STORE":
                a = val(ins[0])
                size = ins[1].size
                self._mem_event(mi.addr, a, size, "S")
                S.memory.store(a, size, val(ins[1]))
                if self.taint:
                    self.shadow.set(a, size, tnt(ins[1]))
            elif n == "BRANCH":
                return self._jump(mi.addr, ins[0].name, index_of)
            elif n == "CBRANCH":
                if val(ins[1]):
                    return self._jump(mi.addr, ins[0].name, index_of)
                if k == len(ops) - 1 and S.record:
                    S.trace.append(("B", mi.addr, "next"))
            elif n == "BRANCHIND":
                return self._jump(mi.addr, val(ins[0]), index_of)
            elif n in ("CALL", "CALLIND"):
                t = val(ins[0])
                if S.record:
                    S.trace.append(("B", mi.addr, t))
                callee = self.entries.get(t)
                if callee is None:
                    raise Trap("bad-call", f"no function at {t:#x}")
                result = self.invoke(callee, [val(v) for v in ins[2:]], [tnt(v) for v in ins[2:]])
            elif n == "INDIRECT":
                put(op.output, (result[0] or 0) & mask(op.output.size), result[1])
            elif n == "RETURN":
                if S.record:
                    S.trace.append(("B", mi.addr, "ret"))
                S.prev = mi.addr
                raise _Return(val(ins[0]) if ins else None, bool(ins) and tnt(ins[0]))
            else:
                x = apply(n, [val(v) for v in ins], [v.size for v in ins], op.output.size)
                put(op.output, x, any(tnt(v) for v in ins))
            came, k = k, k + 1
        return None

    def _jump(self, addr, target, index_of):
        S = self.S
        if S.record:
            S.trace.append(("B", addr, target))
        i = index_of.get(target)
        if i is None:
            raise Trap("bad-branch")
        return i

    def _mem_event(self, addr, a, size, kind):
        S = self.S
        if S.record:
            S.trace.append(("M", addr, a, size, kind))
            S.trace.append(("F", addr, tuple(S.flags)))


def interpret(p: MirProgram, entry, args=(), memories=None, global_values=None, fuel: int = DEFAULT_FUEL,
              record: bool = True, outputs: bool = True, taint: bool = False) -> TaintResult:
    """Run ``entry`` the slow way; same value and trace as :func:`machine.run`."""
    fidx = entry if isinstance(entry, int) else p.functions.index(p.function(entry))
    mem = build_memory(p, memories, global_values)
    it = Interpreter(p, mem, fuel, record, taint)
    it.seed_taint()
    S = it.S
    value, vt, trap = None, False, None
    try:
        value, vt = it.invoke(fidx, list(args))
    except Trap as t:
        trap = t.kind
        S.trace.append(("T", t.kind, S.steps))
    except RecursionError:
        trap = "call-depth"
        S.trace.append(("T", trap, S.steps))
    if outputs:
        lay = Layout.from_dict(p.layout) if p.layout else Layout(len(p.globals), len(p.memories))
        S.trace.extend(public_outputs(p, fidx, value, mem, [lay.global_slot(k) for k in range(len(p.globals))]))
    return TaintResult(value, S.trace, trap, S.steps, it.tainted, vt)


def dynamic_taint(p: MirProgram, entry, args=(), memories=None, global_values=None,
                  fuel: int = DEFAULT_FUEL) -> TaintResult:
    """Exact taint of every varnode written on this run, per function index."""
    return interpret(p, entry, args, memories, global_values, fuel, record=False, outputs=False, taint=True)
