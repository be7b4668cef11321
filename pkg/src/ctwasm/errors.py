from __future__ import annotations


class CtwError(Exception):
    """Base class for every error raised by the toolchain."""


class ParseError(CtwError):
    def __init__(self, message: str, line: int = 0, col: int = 0, rule: str = "syntax"):
        super().__init__(message)
        self.message = message
        self.line = line
        self.col = col
        self.rule = rule

    def format(self, filename: str = "<input>") -> str:
        return f"{filename}:{self.line}:{self.col}: {self.rule}: {self.message}"


class TypeCheckError(CtwError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__(f"{len(self.violations)} type violation(s)")


class UnsupportedError(CtwError):
    """Input is well formed but uses a feature outside the supported dialect."""

    def __init__(self, message: str, line: int = 0, col: int = 0):
        super().__init__(message)
        self.message = message
        self.line = line
        self.col = col

    def format(self, filename: str = "<input>") -> str:
        return f"{filename}:{self.line}:{self.col}: unsupported: {self.message}"


class IrError(CtwError):
    """Malformed SSA IR (bad arity, dangling value, broken dominance...)."""


class ContainerError(CtwError):
    """Malformed or truncated container file."""


class Trap(CtwError):
    def __init__(self, kind: str, detail: str = ""):
        super().__init__(f"trap: {kind} {detail}".strip())
        self.kind = kind
        self.detail = detail
