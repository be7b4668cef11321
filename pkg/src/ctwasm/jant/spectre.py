"""Structural Spectre checks.

PHT: every access that involves a linear-memory base must add exactly one
zero-extended 32-bit offset and a small static offset, and memory regions
must be at least 4 GiB apart, so a mispredicted bounds check can only
reach the same memory or its guard region.

BTB: every indirect branch or call has exactly one static destination.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..mir.core import MirProgram
from .access import STATIC_OFFSET_LIMIT, Matcher
from .taint import resolve_target
from .view import build_view

MIN_SEPARATION = 1 << 32


@dataclass
class SpectreReport:
    pht_ok: bool = True
    btb_ok: bool = True
    pht_failures: list = field(default_factory=list)
    btb_failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.pht_ok and self.btb_ok

    def to_dict(self) -> dict:
        return {"pht_ok": self.pht_ok, "btb_ok": self.btb_ok,
                "pht_failures": self.pht_failures, "btb_failures": self.btb_failures}


def check_spectre_structure(p: MirProgram) -> SpectreReport:
    rep = SpectreReport()
    sep = int(p.layout.get("separation", 0)) if p.layout else 0
    if p.memories and sep < MIN_SEPARATION:
        rep.pht_failures.append(f"linear memories separated by {sep:#x} bytes, need {MIN_SEPARATION:#x}")
    for f in p.functions:
        view = build_view(p, f)
        matcher = Matcher(view)
        entries = {g.entry for g in p.functions}
        for mi in view.insts:
            for op in mi.ops:
                if op.opcode in ("LOAD", "STORE"):
                    t = matcher.terms(op.inputs[0])
                    if not (t.bases or t.descs):
                        continue
                    if t.descs and not t.bases:
                        continue  # reading the base out of an import descriptor
                    good = (len(t.bases) == 1 and len(t.zexts) == 1 and t.zexts[0].size == 4
                            and not t.opaque and not t.descs and t.ctx == 0 and t.sp == 0
                            and t.const < STATIC_OFFSET_LIMIT)
                    if not good:
                        rep.pht_failures.append(f"{f.name} {mi.addr:#x} {mi.text}: memory offset is not a "
                                                f"zero-extended 32-bit value")
                elif op.opcode == "BRANCHIND":
                    tgt = resolve_target(view, op.inputs[0])
                    if tgt is None or tgt not in view.index_of:
                        rep.btb_failures.append(f"{f.name} {mi.addr:#x} {mi.text}: indirect branch without a "
                                                f"single static destination")
                elif op.opcode == "CALLIND":
                    tgt = resolve_target(view, op.inputs[0])
                    if tgt is None or tgt not in entries:
                        rep.btb_failures.append(f"{f.name} {mi.addr:#x} {mi.text}: indirect call without a "
                                                f"single static destination")
    rep.pht_ok = not rep.pht_failures
    rep.btb_ok = not rep.btb_failures
    return rep
