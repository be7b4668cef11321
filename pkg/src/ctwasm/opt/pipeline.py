"""Optimization levels."""

from __future__ import annotations

from ..ir.core import IrModule, SsaFunction
from ..ir.text import format_function
from .dce import dce
from .gvn import gvn
from .licm import licm
from .peephole import default_rules, peephole

LEVELS = ("none", "speed")
MAX_ROUNDS = 3


def speed_passes(rules=None):
    rules = default_rules() if rules is None else rules
    return [dce, lambda f: peephole(f, rules), gvn, licm, dce]


def pipeline(f: SsaFunction, level: str = "speed", dump=None) -> SsaFunction:
    """``none`` is the identity; ``speed`` runs dce, peephole, gvn, licm, dce
    until nothing changes, at most three rounds.

    ``dump(stage_name, f)`` is called after every pass when given; stage names
    look like ``1.4.dce`` (round, position in the round, pass).
    """
    if level not in LEVELS:
        raise ValueError(f"unknown optimization level {level!r}")
    if level == "none":
        return f
    names = ["dce", "peephole", "gvn", "licm", "dce"]
    cur = f
    for round_no in range(MAX_ROUNDS):
        before = format_function(cur)
        for i, (name, p) in enumerate(zip(names, speed_passes())):
            cur, _ = p(cur)
            if dump is not None:
                dump(f"{round_no}.{i}.{name}", cur)
        if format_function(cur) == before:
            break
    return cur


def optimize_module(m: IrModule, level: str = "speed", dump=None) -> IrModule:
    out = m.copy()
    out.functions = [pipeline(f, level, dump) for f in out.functions]
    return out
