"""Source text to machine IR in one call, with per-stage timings."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .front.ast import parse_text
from .front.lower import lower_to_ssa
from .front.typecheck import typecheck
from .ir.core import IrModule
from .mir.core import MirProgram
from .mir.lower import lower
from .opt.pipeline import optimize_module

STAGES = ("parse", "typecheck", "lower_to_ssa", "optimize", "lower")


@dataclass
class CompileResult:
    program: MirProgram
    ir: IrModule
    ssa: IrModule | None = None  # pre-optimization module, when kept
    timings: dict = field(default_factory=dict)  # stage -> seconds
    counts: dict = field(default_factory=dict)  # ir_insts, mir_insts, dit_insts

    def report(self) -> dict:
        return {"timings": dict(self.timings), "counts": dict(self.counts)}


def strip_dit(m: IrModule) -> IrModule:
    """Same module with every DIT flag cleared: the plain compiler's view."""
    out = m.copy()
    for f in out.functions:
        for b in f.blocks:
            for ins in b.insts:
                ins.dit = False
    return out


def ir_size(m: IrModule) -> int:
    return sum(len(b.insts) + 1 for f in m.functions for b in f.blocks)


def compile_source(text: str, opt: str = "speed", call_mode: str = "indirect", dit: bool = True,
                   permissive: bool = False, dump=None, scrub_flags: bool = True,
                   keep_ssa: bool = False) -> CompileResult:
    """parse, typecheck, lower to SSA, optimize, lower to machine IR.

    ``dit=False`` clears every DIT flag after SSA construction so the same
    source can be measured through a plain pipeline. ``permissive`` lowers
    modules with type violations (for leaky test programs). ``dump(stage, f)``
    receives the IR after every optimization pass. ``keep_ssa`` keeps a copy of
    the unoptimized module in ``CompileResult.ssa``.
    """
    t = {}
    t0 = time.perf_counter()
    mod = parse_text(text)
    t["parse"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    typed = typecheck(mod)
    t["typecheck"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    ir = lower_to_ssa(typed, permissive=permissive)
    if not dit:
        ir = strip_dit(ir)
    t["lower_to_ssa"] = time.perf_counter() - t0
    ssa = ir.copy() if keep_ssa else None

    t0 = time.perf_counter()
    opt_ir = optimize_module(ir, opt, dump)
    t["optimize"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    prog = lower(opt_ir, call_mode=call_mode, scrub_flags=scrub_flags)
    t["lower"] = time.perf_counter() - t0

    counts = {
        "ir_insts": ir_size(opt_ir),
        "mir_insts": prog.size,
        "dit_insts": sum(1 for f in prog.functions for mi in f.insts if mi.dit and not mi.pseudo),
    }
    return CompileResult(prog, opt_ir, ssa, t, counts)


def compile_ir(ir: IrModule, opt: str = "speed", call_mode: str = "indirect") -> MirProgram:
    return lower(optimize_module(ir, opt), call_mode=call_mode)
