"""Reference interpreter for the SSA IR.

Used to check that optimization passes preserve semantics. It accepts both
block-parameter and φ form, and is deliberately independent of the machine
IR interpreter in :mod:`ctwasm.oracle`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import IrError, Trap
from .core import WIDTH, Brnz, IrModule, Jump, Return, SsaFunction


def _mask(ty):
    return (1 << WIDTH.get(ty, 32)) - 1


def _signed(x, bits):
    return x - (1 << bits) if x >> (bits - 1) & 1 else x


def _icmp(cond, a, b, bits):
    sa, sb = _signed(a, bits), _signed(b, bits)
    return {
        "eq": a == b, "ne": a != b, "ult": a < b, "ule": a <= b, "ugt": a > b, "uge": a >= b,
        "slt": sa < sb, "sle": sa <= sb, "sgt": sa > sb, "sge": sa >= sb,
    }[cond]


def binop(op, a, b, bits):
    m = (1 << bits) - 1
    if op == "iadd":
        return (a + b) & m
    if op == "isub":
        return (a - b) & m
    if op == "imul":
        return (a * b) & m
    if op == "band":
        return a & b
    if op == "bor":
        return a | b
    if op == "bxor":
        return a ^ b
    s = b % bits
    if op == "ishl":
        return (a << s) & m
    if op == "ushr":
        return a >> s
    if op == "sshr":
        return (_signed(a, bits) >> s) & m
    if op == "rotl":
        return ((a << s) | (a >> (bits - s))) & m if s else a
    if op == "rotr":
        return ((a >> s) | (a << (bits - s))) & m if s else a
    if op in ("udiv", "urem", "sdiv", "srem"):
        if b == 0:
            raise Trap("div-by-zero")
        if op == "udiv":
            return a // b
        if op == "urem":
            return a % b
        sa, sb = _signed(a, bits), _signed(b, bits)
        if op == "sdiv":
            if sa == -(1 << (bits - 1)) and sb == -1:
                raise Trap("int-overflow")
            q = abs(sa) // abs(sb)
            return (q if (sa < 0) == (sb < 0) else -q) & m
        r = abs(sa) % abs(sb)
        return (-r if sa < 0 else r) & m
    raise IrError(f"unknown binary opcode {op}")


@dataclass
class IrState:
    memories: list = field(default_factory=list)  # bytearrays
    globals: list = field(default_factory=list)
    fuel: int = 1_000_000


def initial_state(m: IrModule, pages_cap: int | None = None) -> IrState:
    mems = []
    for mem in m.memories:
        pages = mem.get("pages", 1)
        if pages_cap is not None:
            pages = min(pages, pages_cap)
        mems.append(bytearray(pages * 65536))
    for seg in m.data:
        buf = mems[seg["memory"]]
        buf[seg["offset"]:seg["offset"] + len(seg["bytes"])] = seg["bytes"]
    return IrState(mems, [gl.get("init", 0) for gl in m.globals])


def call(m: IrModule, fn, args: list, state: IrState | None = None):
    """Run ``fn`` (index, name or SsaFunction) and return its result values."""
    state = state if state is not None else initial_state(m)
    f = fn if isinstance(fn, SsaFunction) else m.function(fn)
    return _run(m, f, list(args), state, 0)


def _run(m: IrModule, f: SsaFunction, args: list, st: IrState, depth: int):
    if depth > 200:
        raise Trap("stack-overflow")
    bmap = f.block_map()
    preds = f.pred_edges()
    env: dict = {}
    stack: dict = {}
    entry = bmap[f.entry]
    if len(args) != len(entry.params):
        raise IrError(f"{f.name} expects {len(entry.params)} args, got {len(args)}")
    for (v, ty), a in zip(entry.params, args):
        env[v] = a & _mask(ty)
    cur, came = entry, None

    def val(v):
        v = f.resolve(v)
        try:
            return env[v]
        except KeyError:
            raise IrError(f"v{v} read before definition in {f.name}") from None

    while True:
        if came is not None:
            pred_id, kind = came
            idx = [(p, k) for p, k, _ in preds[cur.id]].index((pred_id, kind))
            phis = {ins.result: val(ins.args[idx]) for ins in cur.insts if ins.opcode == "phi"}
            env.update(phis)
        for ins in cur.insts:
            st.fuel -= 1
            if st.fuel < 0:
                raise Trap("fuel")
            op = ins.opcode
            if op == "phi":
                continue
            r = ins.result
            ty = ins.ty
            bits = WIDTH.get(ty, 32)
            a = ins.aux
            if op == "iconst":
                env[r] = a["imm"] & _mask(ty)
            elif op == "iadd_imm":
                env[r] = (val(ins.args[0]) + a["imm"]) & _mask(ty)
            elif op == "icmp":
                x, y = val(ins.args[0]), val(ins.args[1])
                bits = WIDTH[f.types.get(f.resolve(ins.args[0]), "i32")]
                env[r] = int(_icmp(a["cond"], x, y, bits))
            elif op == "bint":
                env[r] = val(ins.args[0]) & 1
            elif op == "select":
                env[r] = val(ins.args[1]) if val(ins.args[0]) else val(ins.args[2])
            elif op in ("copy", "uextend"):
                env[r] = val(ins.args[0]) & _mask(ty)
            elif op == "sextend":
                src = f.types.get(f.resolve(ins.args[0]), "i32")
                env[r] = _signed(val(ins.args[0]), WIDTH[src]) & _mask(ty)
            elif op == "ireduce":
                env[r] = val(ins.args[0]) & _mask(ty)
            elif op == "load":
                addr = (val(ins.args[0]) + a.get("offset", 0))
                width = a.get("width") or bits // 8
                mem = st.memories[a["mem"]]
                if addr + width > len(mem):
                    raise Trap("out-of-bounds", f"mem{a['mem']}+{addr}")
                x = int.from_bytes(mem[addr:addr + width], "little")
                if a.get("signed"):
                    x = _signed(x, width * 8) & _mask(ty)
                env[r] = x
            elif op == "store":
                vbits = WIDTH.get(a.get("vty", "i32"), 32)
                addr = (val(ins.args[0]) + a.get("offset", 0))
                width = a.get("width") or vbits // 8
                mem = st.memories[a["mem"]]
                if addr + width > len(mem):
                    raise Trap("out-of-bounds", f"mem{a['mem']}+{addr}")
                mem[addr:addr + width] = (val(ins.args[1]) & ((1 << (8 * width)) - 1)).to_bytes(width, "little")
            elif op == "global_load":
                env[r] = st.globals[a["global"]] & _mask(ty)
            elif op == "global_store":
                st.globals[a["global"]] = val(ins.args[0])
            elif op == "stack_load":
                env[r] = stack.get(a["slot"], 0) & _mask(ty)
            elif op == "stack_store":
                stack[a["slot"]] = val(ins.args[0])
            elif op == "call":
                callee = m.function(a["callee"])
                res = _run(m, callee, [val(x) for x in ins.args], st, depth + 1)
                if r is not None:
                    env[r] = res[0] if res else 0
            else:
                env[r] = binop(op, val(ins.args[0]), val(ins.args[1]), bits)
        t = cur.term
        if isinstance(t, Return):
            return [val(v) for v in t.values]
        if isinstance(t, Jump):
            edge, target, targs = ("jump", t.target, t.args)
        elif isinstance(t, Brnz):
            taken = (val(t.cond) != 0) != t.zero
            edge, target, targs = ("then", t.target, t.args) if taken else ("else", t.else_target, t.else_args)
        else:
            raise IrError(f"block{cur.id} has no terminator")
        nxt = bmap[target]
        vals = [val(x) for x in targs]
        for (v, ty), x in zip(nxt.params, vals):
            env[v] = x & _mask(ty)
        came = (cur.id, edge)
        cur = nxt
