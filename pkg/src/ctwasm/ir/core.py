"""SSA IR with block parameters and per-instruction DIT flags."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

from ..errors import IrError

# Opcodes that have a DIT counterpart. Anything else must keep dit=False.
DIT_CAPABLE = {
    "iadd", "isub", "imul", "band", "bor", "bxor", "ishl", "ushr", "sshr", "rotl", "rotr",
    "icmp", "bint", "select", "copy", "uextend", "sextend", "ireduce",
}
PURE = DIT_CAPABLE | {"iconst", "iadd_imm", "phi"}
# Pure, but may trap: never removed or hoisted.
TRAPPING = {"udiv", "sdiv", "urem", "srem"}
SIDE_EFFECTS = {"store", "global_store", "stack_store", "call"}
MEMORY_READS = {"load", "global_load", "stack_load"}

BINARY = {"iadd", "isub", "imul", "band", "bor", "bxor", "ishl", "ushr", "sshr", "rotl", "rotr",
          "udiv", "sdiv", "urem", "srem"}
ICMP_CONDS = ("eq", "ne", "ult", "slt", "ugt", "sgt", "ule", "sle", "uge", "sge")

WIDTH = {"i32": 32, "i64": 64, "b1": 1}


@dataclass
class Inst:
    opcode: str
    args: list = field(default_factory=list)
    result: int | None = None
    ty: str | None = None
    dit: bool = False
    aux: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.opcode + ("DIT" if self.dit else "")

    def key(self):
        """Identity used by value numbering: opcode incl. DIT flag, type, payload."""
        return (self.name, self.ty, tuple(sorted(self.aux.items())))


@dataclass
class Jump:
    target: int
    args: list = field(default_factory=list)

    def edges(self):
        return [("jump", self.target, self.args)]


@dataclass
class Brnz:
    """``brnz cond, target(args)`` followed by the fall-through ``jump``.

    ``zero=True`` makes it a ``brz``.
    """

    cond: int
    target: int
    args: list
    else_target: int
    else_args: list
    zero: bool = False

    def edges(self):
        return [("then", self.target, self.args), ("else", self.else_target, self.else_args)]


@dataclass
class Return:
    values: list = field(default_factory=list)

    def edges(self):
        return []


@dataclass
class Block:
    id: int
    params: list = field(default_factory=list)  # [(value, ty)]
    insts: list = field(default_factory=list)
    term: Jump | Brnz | Return | None = None


@dataclass
class SsaFunction:
    name: str
    params: list  # width types of block0 params
    param_secret: list
    results: list
    result_secret: list
    trusted: bool = True
    blocks: list = field(default_factory=list)
    entry: int = 0
    aliases: dict = field(default_factory=dict)
    types: dict = field(default_factory=dict)
    secret: dict = field(default_factory=dict)
    param_notes: list = field(default_factory=list)  # e.g. "vmctx" annotations for printing
    next_value: int = 0

    # -- construction -------------------------------------------------------

    def new_value(self, ty: str, secret: bool = False) -> int:
        v = self.next_value
        self.next_value += 1
        self.types[v] = ty
        if secret:
            self.secret[v] = True
        return v

    def new_block(self) -> Block:
        bid = max((b.id for b in self.blocks), default=-1) + 1
        blk = Block(bid)
        self.blocks.append(blk)
        return blk

    def block(self, bid: int) -> Block:
        for b in self.blocks:
            if b.id == bid:
                return b
        raise IrError(f"no block{bid} in {self.name}")

    def block_map(self) -> dict:
        return {b.id: b for b in self.blocks}

    def copy(self) -> "SsaFunction":
        return copy.deepcopy(self)

    # -- queries ------------------------------------------------------------

    def resolve(self, v: int) -> int:
        seen = 0
        while v in self.aliases:
            v = self.aliases[v]
            seen += 1
            if seen > len(self.aliases):
                raise IrError(f"alias cycle through v{v}")
        return v

    def successors(self, blk: Block) -> list:
        return [t for _, t, _ in blk.term.edges()] if blk.term else []

    def pred_edges(self) -> dict:
        """Map block id -> ordered list of (pred id, edge kind, args).

        The order (layout order of predecessors, then-edge before else-edge)
        is the canonical φ operand order.
        """
        preds = {b.id: [] for b in self.blocks}
        for b in self.blocks:
            if b.term is None:
                continue
            for kind, tgt, args in b.term.edges():
                preds.setdefault(tgt, []).append((b.id, kind, args))
        return preds

    def predecessors(self) -> dict:
        return {k: [p for p, _, _ in v] for k, v in self.pred_edges().items()}

    def instructions(self):
        for b in self.blocks:
            yield from b.insts

    def inst_count(self) -> int:
        return sum(len(b.insts) for b in self.blocks)

    def definitions(self) -> dict:
        """value -> ("param", block id) or ("inst", block id, Inst)."""
        defs = {}
        for b in self.blocks:
            for v, _ in b.params:
                defs[v] = ("param", b.id)
            for ins in b.insts:
                if ins.result is not None:
                    defs[ins.result] = ("inst", b.id, ins)
        return defs

    def is_phi_form(self) -> bool:
        return any(ins.opcode == "phi" for ins in self.instructions())


@dataclass
class IrModule:
    functions: list = field(default_factory=list)
    memories: list = field(default_factory=list)  # [{"name", "pages", "secret", "imported"}]
    globals: list = field(default_factory=list)  # [{"name", "ty", "secret", "mutable", "init"}]
    data: list = field(default_factory=list)  # [{"memory", "offset", "bytes"}]
    manifest: object = None  # SecrecyManifest derived from signatures, globals and memories

    def function(self, name_or_index):
        if isinstance(name_or_index, int):
            return self.functions[name_or_index]
        for f in self.functions:
            if f.name == name_or_index:
                return f
        raise KeyError(name_or_index)

    def func_index(self, name) -> int:
        for i, f in enumerate(self.functions):
            if f.name == name:
                return i
        raise KeyError(name)

    def copy(self) -> "IrModule":
        return copy.deepcopy(self)


def inst_uses(ins: Inst) -> list:
    return list(ins.args)


def term_uses(term) -> list:
    if isinstance(term, Jump):
        return list(term.args)
    if isinstance(term, Brnz):
        return [term.cond, *term.args, *term.else_args]
    if isinstance(term, Return):
        return list(term.values)
    return []


def map_term_uses(term, fn):
    # Lists are updated in place: callers may hold references from pred_edges().
    if isinstance(term, Jump):
        term.args[:] = [fn(a) for a in term.args]
    elif isinstance(term, Brnz):
        term.cond = fn(term.cond)
        term.args[:] = [fn(a) for a in term.args]
        term.else_args[:] = [fn(a) for a in term.else_args]
    elif isinstance(term, Return):
        term.values[:] = [fn(a) for a in term.values]


def use_counts(f: SsaFunction) -> dict:
    counts: dict = {}
    for b in f.blocks:
        for ins in b.insts:
            for a in ins.args:
                a = f.resolve(a)
                counts[a] = counts.get(a, 0) + 1
        for a in term_uses(b.term):
            a = f.resolve(a)
            counts[a] = counts.get(a, 0) + 1
    return counts


def validate(f: SsaFunction):
    """Check single assignment, arity and dominance; raise :class:`IrError`."""
    from .analysis import dominators

    defs = {}
    where = {}
    for b in f.blocks:
        if b.term is None:
            raise IrError(f"block{b.id} has no terminator")
        for idx, (v, _) in enumerate(b.params):
            if v in defs:
                raise IrError(f"v{v} assigned twice")
            defs[v] = b.id
            where[v] = (b.id, -1)
        for i, ins in enumerate(b.insts):
            if ins.dit and ins.opcode not in DIT_CAPABLE:
                raise IrError(f"{ins.name} is not a DIT-capable opcode")
            if ins.result is not None:
                if ins.result in defs:
                    raise IrError(f"v{ins.result} assigned twice")
                defs[ins.result] = b.id
                where[ins.result] = (b.id, i)
    for a, t in f.aliases.items():
        if a in defs:
            raise IrError(f"alias v{a} is also defined")
    bmap = f.block_map()
    for b in f.blocks:
        for _, tgt, args in b.term.edges():
            if tgt not in bmap:
                raise IrError(f"block{b.id} branches to missing block{tgt}")
            if len(args) != len(bmap[tgt].params):
                raise IrError(
                    f"block{b.id} passes {len(args)} args to block{tgt} "
                    f"which takes {len(bmap[tgt].params)}")
    dom = dominators(f)
    preds = f.pred_edges()

    def check_use(v, blk, pos):
        r = f.resolve(v)
        if r not in where:
            raise IrError(f"use of undefined v{v} in block{blk}")
        db, di = where[r]
        if db == blk:
            if di >= pos:
                raise IrError(f"v{v} used before its definition in block{blk}")
        elif db not in dom.get(blk, set()):
            raise IrError(f"definition of v{v} does not dominate its use in block{blk}")

    for b in f.blocks:
        if b.id not in dom:
            continue  # unreachable blocks are not checked
        for i, ins in enumerate(b.insts):
            if ins.opcode == "phi":
                for (p, _, _), a in zip(preds[b.id], ins.args):
                    if p in dom:
                        check_use(a, p, len(bmap[p].insts) + 1)
                if len(ins.args) != len(preds[b.id]):
                    raise IrError(f"phi v{ins.result} arity does not match predecessors")
                continue
            for a in ins.args:
                check_use(a, b.id, i)
        for a in term_uses(b.term):
            check_use(a, b.id, len(b.insts))
