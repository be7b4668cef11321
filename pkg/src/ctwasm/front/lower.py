"""Lowering of type-checked source functions to block-parameter SSA.

Locals become SSA values with the on-the-fly construction of Braun et al.:
a block is sealed once all its predecessors are known, and reads in
unsealed blocks create placeholder block parameters that are completed on
sealing. Trivial block parameters are removed afterwards.

Instructions on secret-typed values become DIT instructions.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import TypeCheckError, UnsupportedError
from ..ir.analysis import reverse_postorder
from ..ir.core import Block, Brnz, Inst, IrModule, Jump, Return, SsaFunction
from ..ir.ssa import remove_trivial_params
from ..layout import Layout
from ..manifest import FunctionSecrecy, Manifest, MemorySecrecy
from .ast import INT_CMPS, LOADS, STORES, Instr, SourceFunction, SourceModule
from .typecheck import TypedModule, typecheck
from .types import SecrecyType

BINOP = {
    "add": "iadd", "sub": "isub", "mul": "imul", "and": "band", "or": "bor", "xor": "bxor",
    "shl": "ishl", "shr_u": "ushr", "shr_s": "sshr", "rotl": "rotl", "rotr": "rotr",
    "div_u": "udiv", "div_s": "sdiv", "rem_u": "urem", "rem_s": "srem",
}
CMP = {
    "eq": "eq", "ne": "ne", "lt_u": "ult", "lt_s": "slt", "gt_u": "ugt", "gt_s": "sgt",
    "le_u": "ule", "le_s": "sle", "ge_u": "uge", "ge_s": "sge",
}


def _ity(t: SecrecyType) -> str:
    return f"i{t.width}"


@dataclass
class _Label:
    kind: str  # block, loop, if
    target: int
    result: SecrecyType | None


class _SsaBuilder:
    """Variable tracking over a growing CFG (Braun et al. 2013)."""

    def __init__(self, f: SsaFunction, var_types: list):
        self.f = f
        self.var_types = var_types
        self.defs: dict = {}
        self.sealed: set = set()
        self.incomplete: dict = {}
        self.preds: dict = {}  # block id -> [(pred Block, edge index)]
        self.blocks = {}

    def add_block(self, blk: Block):
        self.blocks[blk.id] = blk
        self.preds.setdefault(blk.id, [])

    def add_edge(self, src: Block, edge_index: int, dst: int):
        self.preds.setdefault(dst, []).append((src, edge_index))

    def _edge_args(self, src: Block, edge_index: int) -> list:
        return src.term.edges()[edge_index][2]

    def write(self, var, bid, v):
        self.defs[(var, bid)] = v

    def read(self, var, bid):
        v = self.defs.get((var, bid))
        if v is not None:
            return v
        return self._read_rec(var, bid)

    def _new_param(self, var, bid):
        ty = self.var_types[var]
        v = self.f.new_value(ty)
        self.blocks[bid].params.append((v, ty))
        return v

    def _read_rec(self, var, bid):
        preds = self.preds.get(bid, [])
        if bid not in self.sealed:
            v = self._new_param(var, bid)
            self.incomplete.setdefault(bid, []).append((var, v))
        elif bid == self.f.entry or not preds:
            v = self.f.new_value(self.var_types[var])
            entry = self.blocks[self.f.entry]
            entry.insts.insert(0, Inst("iconst", [], v, self.var_types[var], aux={"imm": 0}))
        elif len(preds) == 1:
            v = self.read(var, preds[0][0].id)
        else:
            v = self._new_param(var, bid)
            self.write(var, bid, v)
            self._add_operands(var, bid)
        self.write(var, bid, v)
        return v

    def _add_operands(self, var, bid):
        for src, idx in self.preds[bid]:
            self._edge_args(src, idx).append(self.read(var, src.id))

    def seal(self, bid):
        if bid in self.sealed:
            return
        self.sealed.add(bid)
        for var, _ in self.incomplete.pop(bid, []):
            self._add_operands(var, bid)


class _FuncLowerer:
    def __init__(self, mod: SourceModule, fn: SourceFunction, index: int, permissive: bool):
        self.mod = mod
        self.fn = fn
        self.permissive = permissive
        for name, ty in list(fn.params) + list(fn.locals) + [(None, r) for r in fn.results]:
            if ty.is_float:
                raise UnsupportedError(f"floating-point values cannot be lowered ({fn.name})",
                                       fn.line, fn.col)
        self.vars = list(fn.params) + list(fn.locals)
        self.f = SsaFunction(
            name=fn.name,
            params=[_ity(t) for _, t in fn.params],
            param_secret=[t.secret for _, t in fn.params],
            results=[_ity(t) for t in fn.results],
            result_secret=[t.secret for t in fn.results],
            trusted=fn.trusted,
        )
        self.b = _SsaBuilder(self.f, [_ity(t) for _, t in self.vars])
        self.labels: list = []
        self.stack: list = []
        self.cur: Block | None = None

    # -- helpers -------------------------------------------------------------

    def new_block(self) -> Block:
        blk = self.f.new_block()
        self.b.add_block(blk)
        return blk

    def secret(self, v) -> bool:
        return bool(self.f.secret.get(v))

    def emit(self, op, args, ty, dit=False, secret=False, **aux):
        r = self.f.new_value(ty, secret) if ty is not None else None
        self.cur.insts.append(Inst(op, list(args), r, ty, dit, aux))
        return r

    def jump(self, target: Block | int, args=()):
        tid = target if isinstance(target, int) else target.id
        self.cur.term = Jump(tid, list(args))
        self.b.add_edge(self.cur, 0, tid)
        self.cur = None

    def branch(self, cond, then_id, else_id, then_args=()):
        self.cur.term = Brnz(cond, then_id, list(then_args), else_id, [])
        self.b.add_edge(self.cur, 0, then_id)
        self.b.add_edge(self.cur, 1, else_id)
        self.cur = None

    def var_index(self, ref):
        if isinstance(ref, int):
            return ref
        for i, (name, _) in enumerate(self.vars):
            if name == ref:
                return i
        raise UnsupportedError(f"unknown local {ref}")

    def pop(self):
        return self.stack.pop()

    def unsupported(self, ins: Instr, what: str):
        raise UnsupportedError(what, ins.line, ins.col)

    # -- driver --------------------------------------------------------------

    def run(self) -> SsaFunction:
        entry = self.new_block()
        self.f.entry = entry.id
        self.b.sealed.add(entry.id)
        self.cur = entry
        for i, (_, t) in enumerate(self.fn.params):
            v = self.f.new_value(_ity(t), t.secret)
            entry.params.append((v, _ity(t)))
            self.b.write(i, entry.id, v)
        self.lower_seq(self.fn.body)
        if self.cur is not None:
            self.cur.term = Return([self.pop()] if self.fn.results else [])
            self.cur = None
        self._finish()
        return self.f

    def lower_seq(self, seq):
        for ins in seq:
            if self.cur is None:
                return  # the rest of the sequence is dead code
            self.lower(ins)

    def lower_nested(self, seq, result):
        """Lower a construct body with a fresh operand stack; return its result value."""
        saved = self.stack
        self.stack = []
        self.lower_seq(seq)
        val = None
        if self.cur is not None and result is not None:
            val = self.stack[-1]
        self.stack = saved
        return val

    def _finish(self):
        f = self.f
        reach = set(reverse_postorder(f))
        f.blocks = [b for b in f.blocks if b.id in reach]
        remove_trivial_params(f)
        # Block parameters are secret iff some incoming argument is. Loop
        # parameters only learn this here, after their users were emitted, so
        # selects on secret arms get their result secrecy and DIT flag fixed up too.
        changed = True
        while changed:
            changed = False
            preds = f.pred_edges()
            for b in f.blocks:
                if b.id != f.entry:
                    for i, (v, _) in enumerate(b.params):
                        s = any(f.secret.get(args[i]) for _, _, args in preds[b.id])
                        if s and not f.secret.get(v):
                            f.secret[v] = True
                            changed = True
                for ins in b.insts:
                    if ins.opcode == "select" and not ins.dit and any(f.secret.get(a) for a in ins.args[1:]):
                        ins.dit = True
                        f.secret[ins.result] = True
                        changed = True

    # -- instructions --------------------------------------------------------

    def lower(self, ins: Instr):
        op = ins.op
        if op == "block":
            end = self.new_block()
            if ins.result is not None:
                v = self.f.new_value(_ity(ins.result))
                end.params.append((v, _ity(ins.result)))
            self.labels.append(_Label("block", end.id, ins.result))
            val = self.lower_nested(ins.body, ins.result)
            if self.cur is not None:
                self.jump(end, [val] if ins.result is not None else [])
            self.labels.pop()
            self._join(end, ins.result)
            return
        if op == "loop":
            header = self.new_block()
            self.jump(header)
            self.cur = header
            self.labels.append(_Label("loop", header.id, ins.result))
            val = self.lower_nested(ins.body, ins.result)
            self.labels.pop()
            self.b.seal(header.id)
            if self.cur is not None and ins.result is not None:
                self.stack.append(val)
            return
        if op == "if":
            for a in ins.args:
                self.lower(a)
                if self.cur is None:
                    return
            cond = self.pop()
            then_b = self.new_block()
            else_b = self.new_block() if ins.orelse is not None else None
            end = self.new_block()
            if ins.result is not None:
                v = self.f.new_value(_ity(ins.result))
                end.params.append((v, _ity(ins.result)))
            self.branch(cond, then_b.id, (else_b or end).id)
            self.b.seal(then_b.id)
            if else_b is not None:
                self.b.seal(else_b.id)
            self.labels.append(_Label("if", end.id, ins.result))
            self.cur = then_b
            val = self.lower_nested(ins.body, ins.result)
            if self.cur is not None:
                self.jump(end, [val] if ins.result is not None else [])
            if else_b is not None:
                self.cur = else_b
                val = self.lower_nested(ins.orelse, ins.result)
                if self.cur is not None:
                    self.jump(end, [val] if ins.result is not None else [])
            self.labels.pop()
            self._join(end, ins.result)
            return

        for a in ins.args:
            self.lower(a)
            if self.cur is None:
                return
        self._lower_plain(ins)

    def _join(self, end: Block, result):
        self.b.seal(end.id)
        if self.b.preds.get(end.id):
            self.cur = end
            if result is not None:
                self.stack.append(end.params[0][0])
        else:
            self.cur = None

    def _lower_plain(self, ins: Instr):
        op = ins.op
        f = self.f
        if op == "nop":
            return
        if op == "drop":
            self.pop()
            return
        if op == "local.get":
            self.stack.append(self.b.read(self.var_index(ins.imm["ref"]), self.cur.id))
            return
        if op in ("local.set", "local.tee"):
            v = self.pop()
            self.b.write(self.var_index(ins.imm["ref"]), self.cur.id, v)
            if op == "local.tee":
                self.stack.append(v)
            return
        if op == "global.get":
            gi = self.mod.global_index(ins.imm["ref"])
            g = self.mod.globals[gi]
            self.stack.append(self.emit("global_load", [], _ity(g.type), secret=g.type.secret, **{"global": gi}))
            return
        if op == "global.set":
            gi = self.mod.global_index(ins.imm["ref"])
            g = self.mod.globals[gi]
            self.emit("global_store", [self.pop()], None, **{"global": gi, "vty": _ity(g.type)})
            return
        if op == "call":
            fi = self.mod.func_index(ins.imm["ref"])
            callee = self.mod.functions[fi]
            args = [self.pop() for _ in callee.params][::-1]
            if callee.results:
                r = callee.results[0]
                self.stack.append(self.emit("call", args, _ity(r), secret=r.secret, callee=fi))
            else:
                self.emit("call", args, None, callee=fi)
            return
        if op == "br":
            label = self.labels[-1 - ins.imm["depth"]]
            if label.kind == "loop":
                self.jump(label.target)
            else:
                self.jump(label.target, [self.pop()] if label.result is not None else [])
            self.stack = []
            return
        if op == "br_if":
            label = self.labels[-1 - ins.imm["depth"]]
            if label.kind != "loop" and label.result is not None:
                self.unsupported(ins, "br_if carrying a value")
            cond = self.pop()
            cont = self.new_block()
            self.branch(cond, label.target, cont.id)
            self.b.seal(cont.id)
            self.cur = cont
            return
        if op == "return":
            self.cur.term = Return([self.pop()] if self.fn.results else [])
            self.cur = None
            self.stack = []
            return
        if op == "select":
            c = self.pop()
            b = self.pop()
            a = self.pop()
            arm_secret = self.secret(a) or self.secret(b)
            sec = arm_secret or (self.permissive and self.secret(c))
            self.stack.append(self.emit("select", [c, a, b], f.types[a], dit=arm_secret, secret=sec))
            return

        ty = ins.optype
        base = ins.base
        if ty.is_float or base.startswith("trunc_"):
            self.unsupported(ins, f"floating-point operation {op} cannot be lowered")
        ity = _ity(ty)
        dit = ty.secret
        if base == "sselect":
            c = self.pop()
            b = self.pop()
            a = self.pop()
            self.stack.append(self.emit("select", [c, a, b], ity, dit=True, secret=True))
            return
        if base == "const":
            self.stack.append(self.emit("iconst", [], ity, imm=ins.imm["value"] & ((1 << ty.width) - 1)))
            return
        if base in LOADS:
            addr = self.pop()
            mi = self.mod.memory_index(ins.imm["memory"])
            width, signed = LOADS[base] or (None, False)
            sec = self.mod.memories[mi].secret or (self.permissive and self.secret(addr))
            self.stack.append(self.emit("load", [addr], ity, secret=sec, mem=mi,
                                        offset=ins.imm.get("offset", 0), width=width, signed=signed))
            return
        if base in STORES:
            val = self.pop()
            addr = self.pop()
            mi = self.mod.memory_index(ins.imm["memory"])
            self.emit("store", [addr, val], None, mem=mi, offset=ins.imm.get("offset", 0),
                      width=STORES[base], vty=ity)
            return
        if base == "declassify":
            self.stack.append(self.emit("copy", [self.pop()], ity))
            return
        if base == "classify":
            self.stack.append(self.emit("copy", [self.pop()], ity, dit=True, secret=True))
            return
        if base.startswith("wrap_"):
            v = self.pop()
            self.stack.append(self.emit("ireduce", [v], "i32", dit=dit, secret=dit or self._taint(v)))
            return
        if base.startswith("extend_"):
            v = self.pop()
            kind = "sextend" if base.endswith("_s") else "uextend"
            self.stack.append(self.emit(kind, [v], "i64", dit=dit, secret=dit or self._taint(v)))
            return
        if base == "eqz":
            v = self.pop()
            zero = self.emit("iconst", [], ity, imm=0)
            c = self.emit("icmp", [v, zero], "b1", dit=dit, secret=dit or self._taint(v), cond="eq")
            self.stack.append(self.emit("bint", [c], "i32", dit=dit, secret=dit or self._taint(v)))
            return
        b = self.pop()
        a = self.pop()
        sec = dit or self._taint(a, b)
        if base in INT_CMPS:
            c = self.emit("icmp", [a, b], "b1", dit=dit, secret=sec, cond=CMP[base])
            self.stack.append(self.emit("bint", [c], "i32", dit=dit, secret=sec))
            return
        if base not in BINOP:
            self.unsupported(ins, f"operation {op} cannot be lowered")
        self.stack.append(self.emit(BINOP[base], [a, b], ity, dit=dit and BINOP[base] in _DITABLE, secret=sec))

    def _taint(self, *vals) -> bool:
        return self.permissive and any(self.secret(v) for v in vals)


_DITABLE = {"iadd", "isub", "imul", "band", "bor", "bxor", "ishl", "ushr", "sshr", "rotl", "rotr"}


def derive_manifest(m: IrModule, layout: Layout | None = None) -> Manifest:
    layout = layout or Layout(len(m.globals), len(m.memories))
    return Manifest(
        functions=[FunctionSecrecy(list(f.param_secret), list(f.result_secret), f.trusted)
                   for f in m.functions],
        globalsOffset=layout.globals_offset,
        globalsSecrecy=[g["secret"] for g in m.globals],
        memories=[MemorySecrecy(mem["imported"], mem["secret"]) for mem in m.memories],
        memoriesOffset=layout.memories_offset,
    )


def lower_to_ssa(typed: TypedModule | SourceModule, permissive: bool = False) -> IrModule:
    """Translate a type-checked module to SSA IR.

    Raises :class:`TypeCheckError` when the module has type violations,
    unless ``permissive`` (used to build deliberately leaky test programs).
    Floating-point code raises :class:`UnsupportedError`.
    """
    if isinstance(typed, SourceModule):
        typed = typecheck(typed)
    if typed.violations and not permissive:
        raise TypeCheckError(typed.violations)
    mod = typed.module
    out = IrModule()
    for mem in mod.memories:
        out.memories.append({"name": mem.name, "pages": mem.pages, "secret": mem.secret,
                             "imported": mem.imported})
    for g in mod.globals:
        if g.type.is_float:
            raise UnsupportedError(f"floating-point global {g.name} cannot be lowered", g.line, g.col)
        out.globals.append({"name": g.name, "ty": _ity(g.type), "secret": g.type.secret,
                            "mutable": g.mutable, "init": g.init.imm["value"] & ((1 << g.type.width) - 1)})
    for d in mod.data:
        out.data.append({"memory": mod.memory_index(d.memory), "offset": d.offset, "bytes": bytes(d.data)})
    for i, fn in enumerate(mod.functions):
        out.functions.append(_FuncLowerer(mod, fn, i, permissive).run())
    out.manifest = derive_manifest(out)
    return out
