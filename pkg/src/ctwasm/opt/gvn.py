"""Global value numbering over the dominator tree.

Two instructions are merged only when their opcode (including the DIT flag),
type, immediates and argument value numbers are identical; the later one
becomes an alias of the dominating one. Operands are compared in order, so
``iadd v3, v2`` and ``iadd v2, v3`` stay distinct.
"""

from __future__ import annotations

from ..ir.analysis import dom_tree_children
from ..ir.core import PURE, TRAPPING, SsaFunction, map_term_uses
from .report import PassReport


def numberable(ins) -> bool:
    return ins.result is not None and ins.opcode in PURE and ins.opcode not in TRAPPING \
        and ins.opcode != "phi"


def gvn(f: SsaFunction):
    g = f.copy()
    report = PassReport("gvn")
    created: dict = {}  # alias -> target, made by this pass

    def rewrite(v):
        while v in created:
            v = created[v]
        return v

    children = dom_tree_children(g)
    bmap = g.block_map()
    # Iterative preorder walk; each frame holds the scope introduced by its block.
    scopes: list = []
    stack = [(g.entry, False)]
    while stack:
        bid, leaving = stack.pop()
        if leaving:
            scopes.pop()
            continue
        scope: dict = {}
        scopes.append(scope)
        stack.append((bid, True))
        b = bmap[bid]
        kept = []
        for ins in b.insts:
            ins.args = [rewrite(a) for a in ins.args]
            if numberable(ins):
                key = ins.key() + (tuple(g.resolve(a) for a in ins.args),)
                hit = next((s[key] for s in reversed(scopes) if key in s), None)
                if hit is not None:
                    created[ins.result] = hit
                    g.aliases[ins.result] = hit
                    report.aliased.append((ins.result, hit))
                    continue
                scope[key] = ins.result
            kept.append(ins)
        b.insts = kept
        for c in reversed(children.get(bid, [])):
            stack.append((c, False))
    for b in g.blocks:
        for ins in b.insts:
            ins.args = [rewrite(a) for a in ins.args]
        map_term_uses(b.term, rewrite)
    return g, report
