from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class PassReport:
    name: str
    removed: list = field(default_factory=list)  # result values of deleted instructions
    moved: list = field(default_factory=list)  # result values of hoisted instructions
    aliased: list = field(default_factory=list)  # (alias, target) pairs created
    rewritten: list = field(default_factory=list)  # result values of instructions replaced in place

    @property
    def counts(self) -> dict:
        return {"removed": len(self.removed), "moved": len(self.moved),
                "aliased": len(self.aliased), "rewritten": len(self.rewritten)}

    @property
    def changed(self) -> bool:
        return any(self.counts.values())
