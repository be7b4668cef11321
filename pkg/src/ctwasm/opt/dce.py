"""Dead code elimination."""

from __future__ import annotations

from ..ir.core import MEMORY_READS, PURE, TRAPPING, SsaFunction, term_uses
from .report import PassReport


def removable(ins) -> bool:
    """Pure and unable to trap. Loads stay because they may fault."""
    return (ins.result is not None and ins.opcode in PURE
            and ins.opcode not in TRAPPING and ins.opcode not in MEMORY_READS)


def dce(f: SsaFunction):
    g = f.copy()
    report = PassReport("dce")
    defs = {ins.result: ins for ins in g.instructions() if ins.result is not None}
    live = set()
    work = []

    def mark(v):
        v = g.resolve(v)
        if v not in live:
            live.add(v)
            work.append(v)

    for b in g.blocks:
        for ins in b.insts:
            if not removable(ins):
                for a in ins.args:
                    mark(a)
        for a in term_uses(b.term):
            mark(a)
    while work:
        v = work.pop()
        ins = defs.get(v)
        if ins is not None and removable(ins):
            for a in ins.args:
                mark(a)
    for b in g.blocks:
        kept = []
        for ins in b.insts:
            if removable(ins) and ins.result not in live:
                report.removed.append(ins.result)
            else:
                kept.append(ins)
        b.insts = kept
    if report.removed:
        defined = {v for b in g.blocks for v, _ in b.params}
        defined |= {ins.result for ins in g.instructions() if ins.result is not None}
        g.aliases = {a: t for a, t in g.aliases.items() if _resolves_into(g, a, defined)}
    return g, report


def _resolves_into(f, a, defined) -> bool:
    try:
        return f.resolve(a) in defined
    except Exception:
        return False
