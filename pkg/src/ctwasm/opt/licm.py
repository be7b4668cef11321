"""Loop-invariant code motion into loop preheaders."""

from __future__ import annotations

from ..ir.analysis import natural_loops, reverse_postorder
from ..ir.core import Block, Brnz, Jump, SsaFunction
from .dce import removable
from .report import PassReport


def licm(f: SsaFunction):
    g = f.copy()
    report = PassReport("licm")
    # Innermost loops first so invariants can bubble outwards on later loops.
    for header, _ in sorted(natural_loops(g), key=lambda hb: len(hb[1])):
        body = next(b for h, b in natural_loops(g) if h == header)
        _hoist(g, header, body, report)
    return g, report


def _hoist(g: SsaFunction, header: int, body: set, report: PassReport):
    defined_in = {}
    for b in g.blocks:
        for v, _ in b.params:
            defined_in[v] = b.id
        for ins in b.insts:
            if ins.result is not None:
                defined_in[ins.result] = b.id
    order = [b for b in reverse_postorder(g) if b in body]
    bmap = g.block_map()
    invariant = []
    inv_values = set()
    changed = True
    while changed:
        changed = False
        for bid in order:
            for ins in bmap[bid].insts:
                if ins.result in inv_values or not removable(ins) or ins.opcode == "phi":
                    continue
                if all(defined_in.get(g.resolve(a)) not in body or g.resolve(a) in inv_values
                       for a in ins.args):
                    invariant.append(ins)
                    inv_values.add(ins.result)
                    changed = True
    if not invariant:
        return
    pre = _preheader(g, header, body)
    for bid in order:
        blk = bmap[bid]
        blk.insts = [ins for ins in blk.insts if ins.result not in inv_values]
    pre.insts.extend(invariant)
    report.moved.extend(ins.result for ins in invariant)


def _preheader(g: SsaFunction, header: int, body: set) -> Block:
    edges = [(p, k, a) for p, k, a in g.pred_edges()[header] if p not in body]
    bmap = g.block_map()
    if len(edges) == 1 and isinstance(bmap[edges[0][0]].term, Jump):
        return bmap[edges[0][0]]
    hb = bmap[header]
    pre = Block(max(b.id for b in g.blocks) + 1)
    params = [(g.new_value(ty, g.secret.get(v, False)), ty) for v, ty in hb.params]
    pre.params = params
    pre.term = Jump(header, [v for v, _ in params])
    for p, kind, _ in edges:
        t = bmap[p].term
        if kind == "jump":
            t.target = pre.id
        elif kind == "then":
            t.target = pre.id
        elif isinstance(t, Brnz):
            t.else_target = pre.id
    g.blocks.insert(g.blocks.index(hb), pre)
    if header == g.entry:
        g.entry = pre.id
    return pre
