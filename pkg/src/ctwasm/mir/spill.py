"""Spilling of values that are live across calls.

Virtual registers are treated as caller-saved: every value live across a
call is stored to a fixed stack slot after its definition and reloaded
after each call it crosses. SSA form is then repaired.
"""

from __future__ import annotations

from ..ir.analysis import liveness
from ..ir.core import Inst, SsaFunction, term_uses
from ..ir.ssa import reconstruct, remove_trivial_params


def insert_spills(f: SsaFunction):
    """Return ``(function with stack_store/stack_load, frame size in bytes)``."""
    g = f.copy()
    live_in, live_out = liveness(g)
    crossings = []  # (block id, call inst, value)
    for b in g.blocks:
        live = set(live_out[b.id]) | {g.resolve(a) for a in term_uses(b.term)}
        for ins in reversed(b.insts):
            if ins.result is not None:
                live.discard(ins.result)
            if ins.opcode == "call":
                for v in sorted(live):
                    crossings.append((b.id, ins, v))
            for a in ins.args:
                live.add(g.resolve(a))
    if not crossings:
        return g, 0

    slots: dict = {}
    for _, _, v in crossings:
        slots.setdefault(v, len(slots))
    where = g.definitions()
    bmap = g.block_map()
    after: dict = {}  # id(inst) or ("top", block) -> [Inst] to place right after
    for v, slot in slots.items():
        st = Inst("stack_store", [v], None, None, False, {"slot": slot, "vty": g.types.get(v, "i32")})
        d = where[v]
        key = ("top", d[1]) if d[0] == "param" else id(d[2])
        after.setdefault(key, []).append(st)
    reloads: dict = {}  # value -> [reload Inst]
    for bid, call, v in crossings:
        ty = g.types.get(v, "i32")
        nv = g.new_value(ty, g.secret.get(v, False))
        ld = Inst("stack_load", [], nv, ty, False, {"slot": slots[v]})
        after.setdefault(id(call), []).append(ld)
        reloads.setdefault(v, []).append(ld)
    for b in g.blocks:
        out = list(after.get(("top", b.id), []))
        for ins in b.insts:
            out.append(ins)
            out.extend(after.get(id(ins), []))
        b.insts = out
    for v, lds in reloads.items():
        pos = {}
        for b in g.blocks:
            for i, ins in enumerate(b.insts):
                if ins.opcode == "stack_load" and ins.result in {x.result for x in lds}:
                    pos[ins.result] = (b.id, i)
        reconstruct(g, v, pos)
    remove_trivial_params(g)
    frame = (8 * len(slots) + 15) & ~15
    return g, frame
