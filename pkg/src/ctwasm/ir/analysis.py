"""CFG analyses over :class:`SsaFunction`: RPO, dominators, natural loops, liveness."""

from __future__ import annotations

from .core import SsaFunction, term_uses


def reverse_postorder(f: SsaFunction) -> list:
    bmap = f.block_map()
    seen = set()
    order = []
    stack = [(f.entry, iter(f.successors(bmap[f.entry])))]
    seen.add(f.entry)
    while stack:
        bid, it = stack[-1]
        for s in it:
            if s not in seen:
                seen.add(s)
                stack.append((s, iter(f.successors(bmap[s]))))
                break
        else:
            stack.pop()
            order.append(bid)
    return order[::-1]


def dominators(f: SsaFunction) -> dict:
    """Reachable block id -> set of dominating block ids (inclusive)."""
    rpo = reverse_postorder(f)
    preds = f.predecessors()
    reach = set(rpo)
    dom = {b: set(rpo) for b in rpo}
    dom[f.entry] = {f.entry}
    changed = True
    while changed:
        changed = False
        for b in rpo:
            if b == f.entry:
                continue
            ps = [p for p in preds.get(b, []) if p in reach]
            new = set.intersection(*(dom[p] for p in ps)) if ps else set()
            new = new | {b}
            if new != dom[b]:
                dom[b] = new
                changed = True
    return dom


def immediate_dominators(f: SsaFunction) -> dict:
    dom = dominators(f)
    idom = {}
    for b, ds in dom.items():
        strict = ds - {b}
        best = None
        for d in strict:
            if all(o in dom[d] for o in strict):
                best = d
        idom[b] = best
    return idom


def dom_tree_children(f: SsaFunction) -> dict:
    idom = immediate_dominators(f)
    children = {b: [] for b in idom}
    order = {b: i for i, b in enumerate(reverse_postorder(f))}
    for b, d in idom.items():
        if d is not None:
            children[d].append(b)
    for k in children:
        children[k].sort(key=order.get)
    return children


def natural_loops(f: SsaFunction) -> list:
    """Return ``[(header, body_set)]``, one per header, innermost last."""
    dom = dominators(f)
    preds = f.predecessors()
    loops: dict = {}
    for b in dom:
        for s in f.successors(f.block(b)):
            if s in dom[b]:  # back edge b -> s
                body = loops.setdefault(s, {s})
                work = [b]
                while work:
                    n = work.pop()
                    if n not in body:
                        body.add(n)
                        work.extend(p for p in preds.get(n, []) if p in dom)
    return sorted(loops.items(), key=lambda kv: -len(kv[1]))


def liveness(f: SsaFunction):
    """Block-level live-in/live-out sets (values resolved through aliases).

    Block parameters are defined at block entry; branch arguments are uses
    at the end of the predecessor.
    """
    bmap = f.block_map()
    use = {}
    defs = {}
    for b in f.blocks:
        d = {v for v, _ in b.params}
        u = set()
        for ins in b.insts:
            for a in ins.args:
                a = f.resolve(a)
                if a not in d:
                    u.add(a)
            if ins.result is not None:
                d.add(ins.result)
        for a in term_uses(b.term):
            a = f.resolve(a)
            if a not in d:
                u.add(a)
        use[b.id] = u
        defs[b.id] = d
    live_in = {b.id: set() for b in f.blocks}
    live_out = {b.id: set() for b in f.blocks}
    changed = True
    while changed:
        changed = False
        for b in reversed(f.blocks):
            out = set()
            for s in f.successors(b):
                out |= live_in[s] - {v for v, _ in bmap[s].params}
            inn = use[b.id] | (out - defs[b.id])
            if out != live_out[b.id] or inn != live_in[b.id]:
                live_out[b.id] = out
                live_in[b.id] = inn
                changed = True
    return live_in, live_out
