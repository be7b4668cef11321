from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class SecrecyType:
    """A value type of the dialect: width, secrecy and int/float class."""

    width: int
    secret: bool = False
    cls: str = "int"

    def __post_init__(self):
        if self.width not in (32, 64):
            raise ValueError(f"bad width {self.width}")
        if self.secret and self.cls != "int":
            raise ValueError("secret floats do not exist")

    @property
    def name(self) -> str:
        if self.cls == "float":
            return f"f{self.width}"
        return f"{'s' if self.secret else 'i'}{self.width}"

    @property
    def is_float(self) -> bool:
        return self.cls == "float"

    def as_secret(self) -> "SecrecyType":
        return SecrecyType(self.width, True)

    def as_public(self) -> "SecrecyType":
        return SecrecyType(self.width, False, self.cls)

    def __str__(self):
        return self.name


I32 = SecrecyType(32)
I64 = SecrecyType(64)
S32 = SecrecyType(32, True)
S64 = SecrecyType(64, True)
F32 = SecrecyType(32, cls="float")
F64 = SecrecyType(64, cls="float")

BY_NAME = {t.name: t for t in (I32, I64, S32, S64, F32, F64)}


def parse_type(name: str) -> SecrecyType | None:
    return BY_NAME.get(name)


def subsumes(expected: SecrecyType, actual: SecrecyType) -> bool:
    """Public integers flow into secret positions of the same width; nothing flows down."""
    if expected.cls != actual.cls or expected.width != actual.width:
        return False
    return expected.secret or not actual.secret
