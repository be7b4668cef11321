"""SSA maintenance helpers: trivial block-parameter removal and repair of a
value that has been given extra definitions (e.g. spill reloads)."""

from __future__ import annotations

from .core import SsaFunction, map_term_uses


def _substitute(f: SsaFunction, subst: dict):
    def res(v):
        while v in subst:
            v = subst[v]
        return v

    for b in f.blocks:
        for ins in b.insts:
            ins.args = [res(a) for a in ins.args]
        map_term_uses(b.term, res)
    for a, t in list(f.aliases.items()):
        f.aliases[a] = res(t)


def remove_trivial_params(f: SsaFunction) -> dict:
    """Drop block parameters that always receive one value (or themselves).

    Returns the substitution applied (removed param -> replacement).
    """
    subst: dict = {}

    def res(v):
        while v in subst:
            v = subst[v]
        return v

    changed = True
    while changed:
        changed = False
        preds = f.pred_edges()
        for b in f.blocks:
            if b.id == f.entry:
                continue
            for i in range(len(b.params) - 1, -1, -1):
                v = b.params[i][0]
                incoming = {res(args[i]) for _, _, args in preds[b.id]} - {v}
                if len(incoming) == 1:
                    subst[v] = incoming.pop()
                    del b.params[i]
                    for _, _, args in preds[b.id]:
                        del args[i]
                    changed = True
    if subst:
        _substitute(f, subst)
    return subst


def reconstruct(f: SsaFunction, original: int, extra_defs: dict):
    """Re-establish SSA after ``original`` got additional definitions.

    ``extra_defs`` maps a value to ``(block id, index)`` of its defining
    instruction; those values are treated as new versions of ``original``.
    Every use of ``original`` is renamed to the reaching version, inserting
    block parameters at joins.
    """
    ty = f.types.get(original, "i32")
    defs_by_block: dict = {}
    for v, (bid, idx) in extra_defs.items():
        defs_by_block.setdefault(bid, []).append((idx, v))
    where = f.definitions()
    kind = where[original]
    obid = kind[1]
    if kind[0] == "param":
        defs_by_block.setdefault(obid, []).append((-1, original))
    else:
        ins = kind[2]
        idx = next(i for i, x in enumerate(f.block(obid).insts) if x is ins)
        defs_by_block.setdefault(obid, []).append((idx, original))
    for lst in defs_by_block.values():
        lst.sort()
    bmap = f.block_map()
    preds = f.pred_edges()
    entry_memo: dict = {}
    versions = {original} | set(extra_defs)

    def at_exit(bid):
        lst = defs_by_block.get(bid)
        if lst:
            return lst[-1][1]
        return at_entry(bid)

    def at_entry(bid):
        if bid in entry_memo:
            return entry_memo[bid]
        ps = preds.get(bid, [])
        if len(ps) == 1:
            v = at_exit(ps[0][0])
            entry_memo[bid] = v
            return v
        v = f.new_value(ty, f.secret.get(original, False))
        entry_memo[bid] = v
        bmap[bid].params.append((v, ty))
        for p, _, args in ps:
            args.append(at_exit(p))
        return v

    def before(bid, pos):
        best = None
        for idx, v in defs_by_block.get(bid, []):
            if idx < pos:
                best = v
        return best if best is not None else at_entry(bid)

    for b in f.blocks:
        for i, ins in enumerate(b.insts):
            if any(a in versions or f.resolve(a) == original for a in ins.args):
                ins.args = [before(b.id, i) if f.resolve(a) == original else a for a in ins.args]
        t = b.term
        n = len(b.insts)
        map_term_uses(t, lambda a, _b=b.id, _n=n: before(_b, _n) if f.resolve(a) == original else a)
