"""Address-space layout shared by the lowering, the verifier and the interpreter.

Region 0 (below 2^33) holds the context record, the stack, read-only data
and code. Linear memory ``m`` starts at ``(m + 1) << 33``; anything past its
size up to the next region is guard space. Since an access is
``base + zext32(offset) + static offset`` with a static offset below 2^31,
it can never land in another memory's region.
"""

from __future__ import annotations

from dataclasses import dataclass, field

PAGE = 65536
REGION_SHIFT = 33
CTX_BASE = 0x0001_0000
STACK_TOP = 0x1000_0000
STACK_SIZE = 1 << 20
RODATA_BASE = 0x2000_0000
CODE_BASE = 0x4000_0000
INST_SIZE = 4


def memory_base(index: int) -> int:
    return (index + 1) << REGION_SHIFT


@dataclass
class Layout:
    """Offsets inside the context record.

    Every global occupies 8 bytes from ``globals_offset``; every memory has an
    8-byte base slot from ``memories_offset``. An imported memory's slot
    holds a pointer to an import descriptor whose first 8 bytes are the base.
    """

    n_globals: int = 0
    n_memories: int = 0
    globals_offset: int | None = None
    memories_offset: int | None = None
    imports_offset: int | None = None
    separation: int = 1 << REGION_SHIFT
    guard_size: int = field(default=(1 << REGION_SHIFT) - 256 * PAGE)

    def __post_init__(self):
        if self.globals_offset is None:
            self.globals_offset = 16
        if self.memories_offset is None:
            self.memories_offset = _align8(max(self.globals_offset + 8 * self.n_globals, 16))
        if self.imports_offset is None:
            ends = [self.globals_offset + 8 * self.n_globals, self.memories_offset + 8 * self.n_memories]
            self.imports_offset = _align8(max(ends))
        spans = sorted([(self.globals_offset, 8 * self.n_globals),
                        (self.memories_offset, 8 * self.n_memories),
                        (self.imports_offset, 16 * self.n_memories)])
        for (a, la), (b, _) in zip(spans, spans[1:]):
            if la and a + la > b:
                raise ValueError("context record regions overlap")

    def global_slot(self, k: int) -> int:
        return self.globals_offset + 8 * k

    def memory_slot(self, m: int) -> int:
        return self.memories_offset + 8 * m

    def import_slot(self, m: int) -> int:
        return self.imports_offset + 16 * m

    @property
    def ctx_size(self) -> int:
        return _align8(max(self.imports_offset + 16 * self.n_memories,
                           self.memories_offset + 8 * self.n_memories,
                           self.globals_offset + 8 * self.n_globals))

    def to_dict(self) -> dict:
        return {"globals_offset": self.globals_offset, "memories_offset": self.memories_offset,
                "imports_offset": self.imports_offset, "n_globals": self.n_globals,
                "n_memories": self.n_memories, "separation": self.separation,
                "guard_size": self.guard_size}

    @classmethod
    def from_dict(cls, d: dict) -> "Layout":
        return cls(**d)


def _align8(x: int) -> int:
    return (x + 7) & ~7
