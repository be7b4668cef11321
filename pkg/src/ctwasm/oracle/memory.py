"""Flat 64-bit address space made of a few mapped regions; everything else
is unmapped and faults."""

from __future__ import annotations

from ..errors import Trap
from ..layout import CTX_BASE, PAGE, RODATA_BASE, STACK_SIZE, STACK_TOP, Layout, memory_base


class Region:
    __slots__ = ("start", "end", "buf", "writable", "name")

    def __init__(self, start, buf, writable, name):
        self.start = start
        self.end = start + len(buf)
        self.buf = buf
        self.writable = writable
        self.name = name


class Memory:
    def __init__(self, regions):
        self.regions = list(regions)
        self.last = self.regions[0] if self.regions else None

    def region(self, a, n):
        r = self.last
        if r is not None and r.start <= a and a + n <= r.end:
            return r
        for r in self.regions:
            if r.start <= a and a + n <= r.end:
                self.last = r
                return r
        raise Trap("guard", f"unmapped access at {a:#x}")

    def load(self, a, n):
        r = self.region(a, n)
        o = a - r.start
        return int.from_bytes(r.buf[o:o + n], "little")

    def store(self, a, n, v):
        r = self.region(a, n)
        if not r.writable:
            raise Trap("guard", f"write to read-only {r.name} at {a:#x}")
        o = a - r.start
        r.buf[o:o + n] = v.to_bytes(n, "little")

    def by_name(self, name):
        for r in self.regions:
            if r.name == name:
                return r
        raise KeyError(name)


def build_memory(p, memories=None, global_values=None) -> Memory:
    """Context record, stack, read-only data and linear memories for ``p``.

    ``memories`` optionally gives initial bytes per memory (shorter inputs are
    zero-padded); data segments are applied on top of them.
    """
    lay = Layout.from_dict(p.layout) if p.layout else Layout(len(p.globals), len(p.memories))
    ctx = bytearray(max(lay.ctx_size, 16))
    for k, g in enumerate(p.globals):
        v = g["init"] if global_values is None or global_values[k] is None else global_values[k]
        o = lay.global_slot(k)
        ctx[o:o + 8] = (v & ((1 << 64) - 1)).to_bytes(8, "little")
    regions = [Region(CTX_BASE, ctx, True, "ctx"),
               Region(STACK_TOP - STACK_SIZE, bytearray(STACK_SIZE), True, "stack")]
    if p.rodata:
        hi = max(p.rodata) + 8
        ro = bytearray(hi - RODATA_BASE)
        for a, v in p.rodata.items():
            ro[a - RODATA_BASE:a - RODATA_BASE + 8] = v.to_bytes(8, "little")
        regions.append(Region(RODATA_BASE, ro, False, "rodata"))
    for m, desc in enumerate(p.memories):
        size = desc["pages"] * PAGE
        if memories is not None and m < len(memories) and memories[m] is not None:
            init = bytes(memories[m])[:size]
            buf = bytearray(init) + bytearray(size - len(init))
        else:
            buf = bytearray(size)
        for d in p.data:
            if d["memory"] == m:
                data = bytes(d["bytes"])
                buf[d["offset"]:d["offset"] + len(data)] = data
        base = memory_base(m)
        if desc.get("imported"):
            dslot = lay.import_slot(m)
            ctx[dslot:dslot + 8] = base.to_bytes(8, "little")
            ctx[dslot + 8:dslot + 16] = size.to_bytes(8, "little")
            ptr = CTX_BASE + dslot
        else:
            ptr = base
        s = lay.memory_slot(m)
        ctx[s:s + 8] = ptr.to_bytes(8, "little")
        regions.append(Region(base, buf, True, f"mem{m}"))
    return Memory(regions)
