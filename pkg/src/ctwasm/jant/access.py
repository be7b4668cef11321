"""Pattern matching of load/store addresses into the four accepted shapes.

An address is flattened into a sum of terms by following COPY, INT_ADD and
``INT_SUB x, #c`` backwards. The recognised terms are constants, the
context pointer ``x0``, the entry stack pointer, linear-memory bases (loaded
from the context record, possibly through an import descriptor) and
zero-extended 32-bit offsets. Anything else is an opaque term, which makes
the access unmatched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .view import FunctionView

MASK64 = (1 << 64) - 1
STATIC_OFFSET_LIMIT = 1 << 31
CASES = ("global", "linear-memory", "constant-addr", "stack-slot", "memory-base")


@dataclass
class Terms:
    const: int = 0
    ctx: int = 0
    sp: int = 0
    bases: list = field(default_factory=list)  # memory indices
    descs: list = field(default_factory=list)  # imported memory descriptors
    zexts: list = field(default_factory=list)  # 32-bit offset varnodes
    opaque: list = field(default_factory=list)  # varnodes the matcher cannot see through

    def plus(self, o: "Terms") -> "Terms":
        return Terms((self.const + o.const) & MASK64, self.ctx + o.ctx, self.sp + o.sp,
                     self.bases + o.bases, self.descs + o.descs, self.zexts + o.zexts, self.opaque + o.opaque)

    def signed_const(self) -> int:
        c = self.const & MASK64
        return c - (1 << 64) if c >> 63 else c


@dataclass
class Access:
    kind: str  # one of CASES or "unmatched"
    index: int | None = None  # global / memory index
    offset: object = None  # 32-bit offset varnode (linear) or byte offset (stack/global)
    static: int = 0
    size: int = 0
    reason: str = ""

    def to_list(self):
        return [self.kind, self.index, self.static]


class Matcher:
    """Caches term decompositions for one function."""

    def __init__(self, view: FunctionView, cases=CASES):
        self.view = view
        self.cases = set(cases)
        self.memo = {}
        manifest = view.program.manifest
        self.manifest = manifest
        self.nglobals = len(manifest.globalsSecrecy)
        self.nmems = len(manifest.memories)

    def terms(self, v, depth=0) -> Terms:
        key = (v.space, v.name)
        if key in self.memo:
            return self.memo[key]
        t = self._terms(v, depth)
        self.memo[key] = t
        return t

    def _terms(self, v, depth) -> Terms:
        if v.space == "const":
            return Terms(const=v.name)
        if depth > 64:
            return Terms(opaque=[v])
        view = self.view
        if view.is_input(v):
            if v.name == "x0" and v.size == 8:
                return Terms(ctx=1)
            if v.name == "sp" and v.size == 8:
                return Terms(sp=1)
            return Terms(opaque=[v])
        op = view.def_op(v)
        if op is None:
            return Terms(opaque=[v])
        name = op.opcode
        if name == "COPY" and op.inputs[0].size == v.size:
            return self.terms(op.inputs[0], depth + 1)
        if name == "INT_ADD" and v.size == 8:
            return self.terms(op.inputs[0], depth + 1).plus(self.terms(op.inputs[1], depth + 1))
        if name == "INT_SUB" and v.size == 8 and op.inputs[1].space == "const":
            return self.terms(op.inputs[0], depth + 1).plus(Terms(const=(-op.inputs[1].name) & MASK64))
        if name == "INT_ZEXT" and v.size == 8 and op.inputs[0].size == 4:
            return Terms(zexts=[op.inputs[0]])
        if name == "LOAD" and v.size == 8:
            inner = self.classify(op.inputs[0], 8, load=True)
            if inner.kind == "memory-base":
                if inner.reason == "descriptor":
                    return Terms(descs=[inner.index])
                return Terms(bases=[inner.index])
        return Terms(opaque=[v])

    def classify(self, addr, size: int, load: bool) -> Access:
        t = self.terms(addr)
        m = self.manifest
        if t.opaque:
            return Access("unmatched", reason="address has an unrecognised component")
        shape = (t.ctx, t.sp, len(t.bases), len(t.descs), len(t.zexts))
        if shape == (1, 0, 0, 0, 0):
            c = t.const
            if self.nglobals and "global" in self.cases:
                k, r = divmod(c - m.globalsOffset, 8)
                if 0 <= k < self.nglobals and c >= m.globalsOffset and r + size <= 8:
                    return Access("global", k, None, r, size)
            if self.nmems and load and size == 8 and "memory-base" in self.cases:
                k, r = divmod(c - m.memoriesOffset, 8)
                if 0 <= k < self.nmems and c >= m.memoriesOffset and r == 0:
                    kind = "descriptor" if m.memories[k].imported else "base"
                    return Access("memory-base", k, None, 0, size, reason=kind)
            return Access("unmatched", reason=f"context offset {c} is not a global or memory slot")
        if shape == (0, 0, 0, 1, 0) and t.const == 0 and load and size == 8 and "memory-base" in self.cases:
            return Access("memory-base", t.descs[0], None, 0, size, reason="base")
        if shape == (0, 0, 1, 0, 1) and "linear-memory" in self.cases:
            if t.const < STATIC_OFFSET_LIMIT and t.zexts[0].size == 4:
                return Access("linear-memory", t.bases[0], t.zexts[0], t.const, size)
            return Access("unmatched", reason="static offset too large for the guard region")
        if shape == (0, 1, 0, 0, 0) and "stack-slot" in self.cases:
            k = t.signed_const()
            if self.view.stack_problems:
                return Access("unmatched", reason="stack discipline not recognised")
            if -self.view.frame <= k and k + size <= 0:
                return Access("stack-slot", None, k, k, size)
            return Access("unmatched", reason=f"stack offset {k} outside the frame")
        if shape == (0, 0, 0, 0, 0) and "constant-addr" in self.cases:
            if not load:
                return Access("unmatched", reason="store to a constant address")
            if t.const in self.view.program.rodata and size == 8:
                return Access("constant-addr", None, t.const, t.const, size)
            return Access("unmatched", reason=f"constant address {t.const:#x} is not read-only data")
        return Access("unmatched", reason="address matches no accepted pattern")
