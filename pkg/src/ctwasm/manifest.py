"""The per-module secrecy manifest handed to the verifier alongside the code."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ContainerError


@dataclass
class FunctionSecrecy:
    paramSecrecy: list = field(default_factory=list)
    returnSecrecy: list = field(default_factory=list)
    trusted: bool = True


@dataclass
class MemorySecrecy:
    imported: bool = False
    secret: bool = False


@dataclass
class Manifest:
    functions: list = field(default_factory=list)
    globalsOffset: int = 0
    globalsSecrecy: list = field(default_factory=list)
    memories: list = field(default_factory=list)
    memoriesOffset: int = 0

    def to_dict(self) -> dict:
        return {
            "functions": [
                {"paramSecrecy": list(map(bool, fn.paramSecrecy)),
                 "returnSecrecy": list(map(bool, fn.returnSecrecy)),
                 "trusted": bool(fn.trusted)}
                for fn in self.functions
            ],
            "globalsOffset": int(self.globalsOffset),
            "globalsSecrecy": list(map(bool, self.globalsSecrecy)),
            "memories": [{"imported": bool(m.imported), "secret": bool(m.secret)} for m in self.memories],
            "memoriesOffset": int(self.memoriesOffset),
        }

    def to_json(self) -> str:
        """Canonical form: sorted keys, no insignificant whitespace."""
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        try:
            return cls(
                functions=[FunctionSecrecy(list(fn["paramSecrecy"]), list(fn["returnSecrecy"]),
                                           bool(fn["trusted"])) for fn in d["functions"]],
                globalsOffset=int(d["globalsOffset"]),
                globalsSecrecy=list(d["globalsSecrecy"]),
                memories=[MemorySecrecy(bool(m["imported"]), bool(m["secret"])) for m in d["memories"]],
                memoriesOffset=int(d["memoriesOffset"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ContainerError(f"malformed manifest: {e}") from e

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ContainerError(f"manifest is not valid JSON: {e}") from e

    def copy(self) -> "Manifest":
        return Manifest.from_dict(self.to_dict())


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
