"""Conversion from block parameters to explicit φ assignments."""

from __future__ import annotations

from ..errors import IrError
from .core import Brnz, Inst, Jump, SsaFunction


def params_to_phi(f: SsaFunction) -> SsaFunction:
    """Replace every non-entry block parameter with a ``phi`` at the block head.

    φ operands follow :meth:`SsaFunction.pred_edges` order. Branch arguments
    are dropped from the terminators afterwards.
    """
    g = f.copy()
    edges = g.pred_edges()
    for b in g.blocks:
        if b.id == g.entry or not b.params:
            continue
        incoming = edges.get(b.id, [])
        for pred, kind, args in incoming:
            if len(args) != len(b.params):
                raise IrError(f"block{pred} passes {len(args)} args to block{b.id} "
                              f"which takes {len(b.params)}")
        phis = []
        for i, (v, ty) in enumerate(b.params):
            phis.append(Inst("phi", [args[i] for _, _, args in incoming], v, ty))
        b.insts[:0] = phis
        b.params = []
    for b in g.blocks:
        t = b.term
        if isinstance(t, Jump):
            t.args = []
        elif isinstance(t, Brnz):
            t.args = []
            t.else_args = []
    return g
