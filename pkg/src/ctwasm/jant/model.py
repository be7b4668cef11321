from __future__ import annotations

from dataclasses import dataclass, field

VIOLATION_CLASSES = (
    "secret-branch",
    "secret-address",
    "secret-into-red-op",
    "secret-to-public-store",
    "interface-mismatch",
    "unresolvable-branch",
    "unmatched-access",
)
STATUSES = ("safe", "unsafe", "unsupported")


@dataclass
class Violation:
    cls: str
    address: int
    detail: str = ""
    witness: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"class": self.cls, "address": self.address, "detail": self.detail, "witness": self.witness}


@dataclass
class Verdict:
    function: str
    status: str
    violations: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    reasons: list = field(default_factory=list)  # why the function is unsupported

    def __post_init__(self):
        if self.status == "safe" and self.violations:
            raise ValueError("a safe verdict cannot carry violations")

    @property
    def classes(self) -> set:
        return {v.cls for v in self.violations}

    def to_dict(self) -> dict:
        return {"function": self.function, "status": self.status,
                "violations": [v.to_dict() for v in self.violations],
                "warnings": list(self.warnings), "reasons": list(self.reasons)}
