"""Instruction selection from block-parameter SSA IR to the machine IR.

Each IR value ``vN`` becomes virtual register ``rN``; entry parameters are
``x1..xn`` and the context pointer is ``x0``. Every CFG edge ends in an
explicit branch instruction, so a block's MULTIEQUAL inputs can be tagged
with the address of the branch they arrive from.
"""

from __future__ import annotations

from ..errors import IrError, UnsupportedError
from ..front.lower import derive_manifest
from ..ir.analysis import reverse_postorder
from ..ir.core import Brnz, IrModule, Jump, Return, SsaFunction
from ..layout import CODE_BASE, INST_SIZE, RODATA_BASE, Layout
from .core import MEMORY_MNEMONICS, MachineInst, MirFunction, MirProgram, PcodeOp, Varnode, const, reg
from .spill import insert_spills

SIZE = {"i32": 4, "i64": 8, "b1": 1}
X0 = reg("x0", 8)
SP = reg("sp", 8)
CALL_MODES = ("indirect", "direct")

ARITH = {
    "iadd": ("add", "INT_ADD"), "isub": ("sub", "INT_SUB"), "imul": ("mul", "INT_MULT"),
    "band": ("and", "INT_AND"), "bor": ("orr", "INT_OR"), "bxor": ("eor", "INT_XOR"),
    "udiv": ("udiv", "INT_DIV"), "sdiv": ("sdiv", "INT_SDIV"),
    "urem": ("urem", "INT_REM"), "srem": ("srem", "INT_SREM"),
}
SHIFTS = {"ishl": ("lsl", "INT_LEFT"), "ushr": ("lsr", "INT_RIGHT"), "sshr": ("asr", "INT_SRIGHT")}
UNARY = {"uextend": ("uxtw", "INT_ZEXT"), "sextend": ("sxtw", "INT_SEXT"), "bint": ("uxtb", "INT_ZEXT"),
         "copy": ("mov", "COPY")}
LOAD_MN = {(1, False): "ldrb", (1, True): "ldrsb", (2, False): "ldrh", (2, True): "ldrsh",
           (4, True): "ldrsw", (4, False): "ldr"}
STORE_MN = {1: "strb", 2: "strh", 4: "str", 8: "str"}


def vtext(v: Varnode) -> str:
    if v.space == "const":
        return f"#{v.name}"
    if v.space == "ram":
        return str(v.name[1]) if isinstance(v.name, tuple) else hex(v.name)
    return str(v.name)


class _Builder:
    def __init__(self, m: IrModule, f: SsaFunction, index: int, layout: Layout, call_mode: str,
                 frame: int, scrub: bool):
        self.m = m
        self.f = f
        self.index = index
        self.layout = layout
        self.call_mode = call_mode
        self.frame = frame
        self.scrub = scrub
        self.uniq = 0
        self.ntmp = 0
        self.flagver = 0
        self.spver = 1
        self.params = {}
        self.blocks = []  # [(bid, [MachineInst])]
        self.cur = None
        self.edge_inst = {}  # (bid, kind) -> MachineInst
        self.literals = set()

    # -- varnodes -----------------------------------------------------------

    def val(self, v) -> Varnode:
        v = self.f.resolve(v)
        if v in self.params:
            return self.params[v]
        ty = self.f.types.get(v)
        if ty is None:
            raise IrError(f"v{v} has no type in {self.f.name}")
        return reg(f"r{v}", SIZE[ty])

    def unique(self, size) -> Varnode:
        self.uniq += 1
        return Varnode("unique", self.uniq, size)

    def tmpreg(self, size=8) -> Varnode:
        self.ntmp += 1
        return reg(f"t{self.ntmp}", size)

    def flags(self):
        self.flagver += 1
        return {n: Varnode("flag", f"{n}.{self.flagver}", 1) for n in ("NF", "ZF", "CF", "VF")}

    def emit(self, mnemonic, ops, text, flags=()) -> MachineInst:
        mi = MachineInst(0, mnemonic, ops, text, list(flags))
        self.cur.append(mi)
        return mi

    # -- building blocks ----------------------------------------------------

    def cmp(self, a, b, dit):
        fl = self.flags()
        ops = [PcodeOp("INT_EQUAL", fl["ZF"], [a, b]),
               PcodeOp("INT_SLESS", fl["NF"], [a, b]),
               PcodeOp("INT_LESSEQUAL", fl["CF"], [b, a]),
               PcodeOp("COPY", fl["VF"], [const(0, 1)])]
        self.emit("cmpDIT" if dit else "cmp", ops, f"cmp{'DIT' if dit else ''} {vtext(a)}, {vtext(b)}",
                  [fl[n] for n in ("NF", "ZF", "CF", "VF")])
        return fl

    def scrub_inst(self) -> MachineInst:
        fl = self.flags()
        z = const(0, 8)
        ops = [PcodeOp("INT_EQUAL", fl["ZF"], [z, z]),
               PcodeOp("INT_SLESS", fl["NF"], [z, z]),
               PcodeOp("INT_LESSEQUAL", fl["CF"], [z, z]),
               PcodeOp("COPY", fl["VF"], [const(0, 1)])]
        return MachineInst(0, "cmp", ops, "cmp xzr, xzr", [fl[n] for n in ("NF", "ZF", "CF", "VF")])

    def cset(self, out, cond, fl, dit):
        zf, nf, cf, vf = fl["ZF"], fl["NF"], fl["CF"], fl["VF"]
        u = lambda: self.unique(1)  # noqa: E731
        ops = []
        if cond == "eq":
            ops.append(PcodeOp("COPY", out, [zf]))
        elif cond == "ne":
            ops.append(PcodeOp("BOOL_NEGATE", out, [zf]))
        elif cond == "uge":
            ops.append(PcodeOp("COPY", out, [cf]))
        elif cond == "ult":
            ops.append(PcodeOp("BOOL_NEGATE", out, [cf]))
        elif cond in ("ugt", "ule"):
            t = u()
            ops.append(PcodeOp("BOOL_NEGATE", t, [zf]))
            if cond == "ugt":
                ops.append(PcodeOp("INT_AND", out, [cf, t]))
            else:
                t2 = u()
                ops.append(PcodeOp("INT_AND", t2, [cf, t]))
                ops.append(PcodeOp("BOOL_NEGATE", out, [t2]))
        elif cond == "slt":
            ops.append(PcodeOp("INT_NOTEQUAL", out, [nf, vf]))
        elif cond == "sge":
            ops.append(PcodeOp("INT_EQUAL", out, [nf, vf]))
        elif cond == "sgt":
            t, t2 = u(), u()
            ops.append(PcodeOp("BOOL_NEGATE", t, [zf]))
            ops.append(PcodeOp("INT_EQUAL", t2, [nf, vf]))
            ops.append(PcodeOp("INT_AND", out, [t, t2]))
        elif cond == "sle":
            t = u()
            ops.append(PcodeOp("INT_NOTEQUAL", t, [nf, vf]))
            ops.append(PcodeOp("INT_OR", out, [zf, t]))
        else:
            raise UnsupportedError(f"unknown icmp condition {cond}")
        self.emit("csetDIT" if dit else "cset", ops, f"cset{'DIT' if dit else ''} {vtext(out)}, {cond}")

    def csel(self, out, a, b, fl, dit):
        """``out = ZF ? b : a`` as an intra-instruction branch and join."""
        s = out.size
        u0, u1, u1b = self.unique(1), self.unique(s), self.unique(s)
        ops = [PcodeOp("BOOL_NEGATE", u0, [fl["ZF"]]),
               PcodeOp("COPY", u1, [a]),
               PcodeOp("CBRANCH", None, [Varnode("rel", 4, 4), u0]),
               PcodeOp("COPY", u1b, [b]),
               PcodeOp("MULTIEQUAL", out, [u1b, u1], [3, 2])]
        self.emit("cselDIT" if dit else "csel", ops,
                  f"csel{'DIT' if dit else ''} {vtext(out)}, {vtext(a)}, {vtext(b)}, ne")

    def ctx_load(self, offset) -> Varnode:
        t = self.tmpreg(8)
        a = self.unique(8)
        self.emit("ldr", [PcodeOp("INT_ADD", a, [X0, const(offset, 8)]), PcodeOp("LOAD", t, [a])],
                  f"ldr {vtext(t)}, [x0, #{offset}]")
        return t

    def mem_base(self, mi: int) -> Varnode:
        base = self.ctx_load(self.layout.memory_slot(mi))
        if self.m.memories[mi].get("imported"):
            t = self.tmpreg(8)
            self.emit("ldr", [PcodeOp("LOAD", t, [base])], f"ldr {vtext(t)}, [{vtext(base)}]")
            base = t
        return base

    def linear_addr(self, base, off: Varnode, static: int):
        ops = []
        z = self.unique(8)
        ops.append(PcodeOp("INT_ZEXT", z, [off]))
        a = self.unique(8)
        ops.append(PcodeOp("INT_ADD", a, [base, z]))
        if static:
            a2 = self.unique(8)
            ops.append(PcodeOp("INT_ADD", a2, [a, const(static, 8)]))
            a = a2
        return ops, a

    def stack_addr(self, slot: int):
        a = self.unique(8)
        return [PcodeOp("INT_ADD", a, [reg("sp.1", 8), const(8 * slot, 8)])], a

    # -- instructions -------------------------------------------------------

    def inst(self, ins):
        op = ins.opcode
        d = "DIT" if ins.dit else ""
        out = self.val(ins.result) if ins.result is not None else None
        args = [self.val(a) for a in ins.args]
        if op == "iconst":
            self.emit("mov", [PcodeOp("COPY", out, [const(ins.aux["imm"], out.size)])],
                      f"mov {vtext(out)}, #{ins.aux['imm']}")
        elif op in ARITH:
            mn, pop = ARITH[op]
            self.emit(mn + d, [PcodeOp(pop, out, args)],
                      f"{mn}{d} {vtext(out)}, {vtext(args[0])}, {vtext(args[1])}")
        elif op == "iadd_imm":
            imm = const(ins.aux["imm"], out.size)
            self.emit("add", [PcodeOp("INT_ADD", out, [args[0], imm])],
                      f"add {vtext(out)}, {vtext(args[0])}, #{ins.aux['imm']}")
        elif op in SHIFTS:
            mn, pop = SHIFTS[op]
            t = self.unique(args[1].size)
            self.emit(mn + d, [PcodeOp("INT_AND", t, [args[1], const(8 * out.size - 1, args[1].size)]),
                               PcodeOp(pop, out, [args[0], t])],
                      f"{mn}{d} {vtext(out)}, {vtext(args[0])}, {vtext(args[1])}")
        elif op in ("rotr", "rotl"):
            amt = args[1]
            if op == "rotl":
                n = self.tmpreg(amt.size)
                self.emit("neg" + d, [PcodeOp("INT_2COMP", n, [amt])], f"neg{d} {vtext(n)}, {vtext(amt)}")
                amt = n
            bits = 8 * out.size
            t, x, w, y = (self.unique(amt.size), self.unique(out.size), self.unique(amt.size),
                          self.unique(out.size))
            self.emit("ror" + d, [PcodeOp("INT_AND", t, [amt, const(bits - 1, amt.size)]),
                                  PcodeOp("INT_RIGHT", x, [args[0], t]),
                                  PcodeOp("INT_SUB", w, [const(bits, amt.size), t]),
                                  PcodeOp("INT_LEFT", y, [args[0], w]),
                                  PcodeOp("INT_OR", out, [x, y])],
                      f"ror{d} {vtext(out)}, {vtext(args[0])}, {vtext(amt)}")
        elif op in UNARY:
            mn, pop = UNARY[op]
            self.emit(mn + d, [PcodeOp(pop, out, args)], f"{mn}{d} {vtext(out)}, {vtext(args[0])}")
        elif op == "ireduce":
            self.emit("movw" + d, [PcodeOp("SUBPIECE", out, [args[0], const(0, 4)])],
                      f"movw{d} {vtext(out)}, {vtext(args[0])}")
        elif op == "icmp":
            fl = self.cmp(args[0], args[1], ins.dit)
            self.cset(out, ins.aux["cond"], fl, ins.dit)
        elif op == "select":
            c, a, b = args
            fl = self.cmp(c, const(0, c.size), ins.dit)
            self.csel(out, a, b, fl, ins.dit)
        elif op == "load":
            self._load(ins, out, args)
        elif op == "store":
            self._store(ins, args)
        elif op == "global_load":
            slot = self.layout.global_slot(ins.aux["global"])
            a = self.unique(8)
            self.emit("ldr", [PcodeOp("INT_ADD", a, [X0, const(slot, 8)]), PcodeOp("LOAD", out, [a])],
                      f"ldr {vtext(out)}, [x0, #{slot}]")
        elif op == "global_store":
            slot = self.layout.global_slot(ins.aux["global"])
            a = self.unique(8)
            self.emit("str", [PcodeOp("INT_ADD", a, [X0, const(slot, 8)]), PcodeOp("STORE", None, [a, args[0]])],
                      f"str {vtext(args[0])}, [x0, #{slot}]")
        elif op == "stack_load":
            ops, a = self.stack_addr(ins.aux["slot"])
            self.emit("ldr", ops + [PcodeOp("LOAD", out, [a])], f"ldr {vtext(out)}, [sp, #{8 * ins.aux['slot']}]")
        elif op == "stack_store":
            ops, a = self.stack_addr(ins.aux["slot"])
            self.emit("str", ops + [PcodeOp("STORE", None, [a, args[0]])],
                      f"str {vtext(args[0])}, [sp, #{8 * ins.aux['slot']}]")
        elif op == "call":
            self._call(ins, out, args)
        else:
            raise UnsupportedError(f"cannot lower IR opcode {ins.name}")

    def _load(self, ins, out, args):
        width = ins.aux.get("width")
        signed = bool(ins.aux.get("signed"))
        base = self.mem_base(ins.aux["mem"])
        ops, a = self.linear_addr(base, args[0], ins.aux.get("offset", 0))
        if width is None or width == out.size:
            mn = "ldr"
            ops.append(PcodeOp("LOAD", out, [a]))
        else:
            mn = LOAD_MN[(width, signed)]
            raw = self.unique(width)
            ops.append(PcodeOp("LOAD", raw, [a]))
            ops.append(PcodeOp("INT_SEXT" if signed else "INT_ZEXT", out, [raw]))
        self.emit(mn, ops, f"{mn} {vtext(out)}, [{vtext(base)}, {vtext(args[0])}, uxtw]"
                  + (f" #{ins.aux.get('offset')}" if ins.aux.get("offset") else ""))

    def _store(self, ins, args):
        addr, val = args
        width = ins.aux.get("width") or val.size
        base = self.mem_base(ins.aux["mem"])
        ops, a = self.linear_addr(base, addr, ins.aux.get("offset", 0))
        if width != val.size:
            nv = self.unique(width)
            ops.append(PcodeOp("SUBPIECE", nv, [val, const(0, 4)]))
            val_ = nv
        else:
            val_ = val
        ops.append(PcodeOp("STORE", None, [a, val_]))
        mn = STORE_MN[width]
        self.emit(mn, ops, f"{mn} {vtext(val)}, [{vtext(base)}, {vtext(addr)}, uxtw]"
                  + (f" #{ins.aux.get('offset')}" if ins.aux.get("offset") else ""))

    def _call(self, ins, out, args):
        callee = ins.aux["callee"]
        if not 0 <= callee < len(self.m.functions):
            raise IrError(f"call to unknown function {callee}")
        name = self.m.functions[callee].name
        if self.call_mode == "direct":
            mi = self.emit("bl", [PcodeOp("CALL", None, [Varnode("ram", ("fn", callee), 8), X0, *args])],
                           f"bl {name}")
        else:
            lit = RODATA_BASE + 8 * callee
            self.literals.add(callee)
            t = reg("x16." + str(self.ntmp + 1), 8)
            self.ntmp += 1
            self.emit("ldr", [PcodeOp("LOAD", t, [const(lit, 8)])], f"ldr x16, ={name}")
            mi = self.emit("blr", [PcodeOp("CALLIND", None, [t, X0, *args])], "blr x16")
        if out is not None:
            mi.ops.append(PcodeOp("INDIRECT", out, [X0, Varnode("iop", "self", 4)]))

    def term(self, b):
        t = b.term
        if isinstance(t, Jump):
            mi = self.emit("b", [PcodeOp("BRANCH", None, [Varnode("ram", ("blk", t.target), 8)])],
                           f"b block{t.target}")
            self.edge_inst[(b.id, "jump")] = mi
        elif isinstance(t, Brnz):
            c = self.val(t.cond)
            u = self.unique(1)
            mn = "cbz" if t.zero else "cbnz"
            mi = self.emit(mn, [PcodeOp("INT_EQUAL" if t.zero else "INT_NOTEQUAL", u, [c, const(0, c.size)]),
                                PcodeOp("CBRANCH", None, [Varnode("ram", ("blk", t.target), 8), u])],
                           f"{mn} {vtext(c)}, block{t.target}")
            self.edge_inst[(b.id, "then")] = mi
            mi = self.emit("b", [PcodeOp("BRANCH", None, [Varnode("ram", ("blk", t.else_target), 8)])],
                           f"b block{t.else_target}")
            self.edge_inst[(b.id, "else")] = mi
        elif isinstance(t, Return):
            if self.frame:
                self.spver += 1
                nsp = reg(f"sp.{self.spver}", 8)
                self.emit("add", [PcodeOp("INT_ADD", nsp, [reg("sp.1", 8), const(self.frame, 8)])],
                          f"add sp, sp, #{self.frame}")
            vals = [self.val(v) for v in t.values]
            self.emit("ret", [PcodeOp("RETURN", None, vals)], "ret" + (f" {vtext(vals[0])}" if vals else ""))
        else:
            raise IrError(f"block{b.id} has no terminator")

    def run(self):
        f = self.f
        bmap = f.block_map()
        order = reverse_postorder(f)
        entry = bmap[f.entry]
        for i, (v, ty) in enumerate(entry.params):
            self.params[v] = reg(f"x{i + 1}", SIZE[ty])
        preds = f.pred_edges()
        for bid in order:
            b = bmap[bid]
            self.cur = []
            self.blocks.append((bid, self.cur))
            if bid == f.entry and self.frame:
                self.emit("sub", [PcodeOp("INT_SUB", reg("sp.1", 8), [SP, const(self.frame, 8)])],
                          f"sub sp, sp, #{self.frame}")
            if bid != f.entry and b.params:
                ops = []
                for i, (v, ty) in enumerate(b.params):
                    ins = [self.val(args[i]) for _, _, args in preds[bid]]
                    tags = [("edge", p, k) for p, k, _ in preds[bid]]
                    ops.append(PcodeOp("MULTIEQUAL", self.val(v), ins, tags))
                self.emit("phi", ops, "phi")
            for ins in b.insts:
                if ins.opcode == "phi":
                    raise IrError("MIR lowering expects block-parameter SSA, not phi form")
                self.inst(ins)
            self.term(b)
        if self.scrub:
            self._scrub(order, f)
        return order

    def _scrub(self, order, f):
        """Insert a non-DIT flag write before memory ops, calls and returns
        whenever the live flags were last written by a DIT comparison."""
        bmap = f.block_map()
        preds = f.predecessors()
        insts = dict(self.blocks)
        out = {bid: False for bid in order}

        def transfer(bid, dirty, rewrite=False):
            res = []
            for mi in insts[bid]:
                # the stack epilogue must stay directly in front of ret, so
                # scrub ahead of it
                epilogue = any(op.output is not None and str(op.output.name).startswith("sp.")
                               for op in mi.ops)
                needs = epilogue or mi.mnemonic in MEMORY_MNEMONICS or mi.mnemonic in ("bl", "blr", "ret")
                if needs and dirty:
                    if rewrite:
                        res.append(self.scrub_inst())
                    dirty = False
                res.append(mi)
                if mi.flags_written:
                    dirty = mi.mnemonic.endswith("DIT")
            return dirty, res

        changed = True
        while changed:
            changed = False
            for bid in order:
                din = any(out.get(p, False) for p in preds.get(bid, [])) if bid != f.entry else False
                dout, _ = transfer(bid, din)
                if dout != out[bid]:
                    out[bid] = dout
                    changed = True
        for i, (bid, _) in enumerate(self.blocks):
            din = any(out.get(p, False) for p in preds.get(bid, [])) if bid != f.entry else False
            _, res = transfer(bid, din, rewrite=True)
            insts[bid][:] = res
        del bmap


def lower_function(m: IrModule, index: int, layout: Layout, call_mode="indirect", scrub=True):
    """Return ``(MirFunction with symbolic targets, builder)``."""
    f = m.functions[index]
    if len(f.results) > 1:
        raise UnsupportedError(f"{f.name}: at most one result is supported")
    g, frame = insert_spills(f)
    bld = _Builder(m, g, index, layout, call_mode, frame, scrub)
    bld.run()
    mf = MirFunction(f.name, index, 0, [], len(f.params), [SIZE[t] for t in f.params],
                     [SIZE[t] for t in f.results], frame)
    return mf, bld


def lower(m: IrModule, layout: Layout | None = None, call_mode: str = "indirect",
          scrub_flags: bool = True) -> MirProgram:
    """Lower an optimized block-parameter SSA module to a :class:`MirProgram`."""
    if call_mode not in CALL_MODES:
        raise ValueError(f"unknown call mode {call_mode!r}")
    layout = layout or Layout(len(m.globals), len(m.memories))
    if layout.n_globals != len(m.globals) or layout.n_memories != len(m.memories):
        raise IrError("layout does not match the module's globals and memories")
    manifest = derive_manifest(m, layout)
    built = [lower_function(m, i, layout, call_mode, scrub_flags) for i in range(len(m.functions))]

    addr = CODE_BASE
    block_addr = {}
    for mf, bld in built:
        mf.entry = addr
        for bid, insts in bld.blocks:
            block_addr[(mf.index, bid)] = addr
            mf.blocks.append(addr)
            for mi in insts:
                mi.addr = addr
                addr += INST_SIZE
                mf.insts.append(mi)
    entries = [mf.entry for mf, _ in built]
    for mf, bld in built:
        edge_addr = {k: mi.addr for k, mi in bld.edge_inst.items()}

        def fix(v, mi, mf=mf):
            if v.space == "ram" and isinstance(v.name, tuple):
                kind, x = v.name
                return Varnode("ram", block_addr[(mf.index, x)] if kind == "blk" else entries[x], 8)
            if v.space == "iop" and v.name == "self":
                return Varnode("iop", mi.addr, 4)
            return v

        for mi in mf.insts:
            for op in mi.ops:
                op.inputs = [fix(v, mi) for v in op.inputs]
                if op.tags and isinstance(op.tags[0], tuple):
                    op.tags = [edge_addr[(p, k)] for _, p, k in op.tags]
    rodata = {}
    for _, bld in built:
        for callee in bld.literals:
            rodata[RODATA_BASE + 8 * callee] = entries[callee]
    return MirProgram(
        functions=[mf for mf, _ in built],
        manifest=manifest,
        layout=layout.to_dict(),
        memories=[{"pages": mem["pages"], "imported": bool(mem.get("imported"))} for mem in m.memories],
        globals=[{"size": SIZE[g["ty"]], "init": g["init"]} for g in m.globals],
        data=[dict(d) for d in m.data],
        rodata=dict(sorted(rodata.items())),
        call_mode=call_mode,
    )
