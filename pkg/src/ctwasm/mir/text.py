"""Human-readable disassembly of a :class:`MirProgram`."""

from __future__ import annotations

from .core import MirFunction, MirProgram


def format_function(f: MirFunction, micro_ops: bool = True) -> str:
    lines = [f"function {f.name} @ {f.entry:#x} (params {f.param_sizes}, results {f.result_sizes}, "
             f"frame {f.frame_size}):"]
    starts = set(f.blocks)
    for mi in f.insts:
        if mi.addr in starts and mi.addr != f.entry:
            lines.append(f"  {mi.addr:#x}:")
        lines.append(f"    {mi.addr:#010x}  {mi.text}")
        if micro_ops:
            for i, op in enumerate(mi.ops):
                lines.append(f"        {i:>2}: {op}")
    return "\n".join(lines)


def format_program(p: MirProgram, micro_ops: bool = True) -> str:
    out = [f"; call mode {p.call_mode}", f"; manifest {p.manifest.to_json() if p.manifest else '{}'}"]
    for addr, val in p.rodata.items():
        out.append(f"; literal {addr:#x} = {val:#x}")
    for f in p.functions:
        out.append(format_function(f, micro_ops))
    return "\n".join(out) + "\n"
