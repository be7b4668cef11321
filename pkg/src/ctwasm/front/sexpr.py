"""Tokenizer and reader for the s-expression text dialect."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import ParseError


@dataclass
class Atom:
    text: str
    line: int
    col: int
    quoted: bool = False

    def __repr__(self):
        return f"Atom({self.text!r})"


@dataclass
class SList:
    items: list = field(default_factory=list)
    line: int = 0
    col: int = 0

    def head(self):
        if self.items and isinstance(self.items[0], Atom) and not self.items[0].quoted:
            return self.items[0].text
        return None

    def __repr__(self):
        return f"SList({self.items!r})"


def _unescape(raw: str, line: int, col: int) -> str:
    out = []
    i = 0
    while i < len(raw):
        ch = raw[i]
        if ch != "\\":
            out.append(ch)
            i += 1
            continue
        nxt = raw[i + 1] if i + 1 < len(raw) else ""
        simple = {"n": "\n", "t": "\t", "\\": "\\", "'": "'", '"': '"'}
        if nxt in simple:
            out.append(simple[nxt])
            i += 2
        elif len(raw) >= i + 3 and all(c in "0123456789abcdefABCDEF" for c in raw[i + 1:i + 3]):
            out.append(chr(int(raw[i + 1:i + 3], 16)))
            i += 3
        else:
            raise ParseError(f"bad string escape \\{nxt}", line, col)
    return "".join(out)


def tokenize(text: str):
    """Yield ``(kind, value, line, col)`` with kind in ``( ) atom str``."""
    i, line, col = 0, 1, 1
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            i += 1
            line += 1
            col = 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if text.startswith(";;", i):
            while i < n and text[i] != "\n":
                i += 1
            continue
        if text.startswith("(;", i):
            depth = 0
            sl, sc = line, col
            while i < n:
                if text.startswith("(;", i):
                    depth += 1
                    i += 2
                    col += 2
                elif text.startswith(";)", i):
                    depth -= 1
                    i += 2
                    col += 2
                    if depth == 0:
                        break
                else:
                    if text[i] == "\n":
                        line += 1
                        col = 1
                    else:
                        col += 1
                    i += 1
            if depth:
                raise ParseError("unterminated block comment", sl, sc)
            continue
        if ch == "(" or ch == ")":
            yield ch, ch, line, col
            i += 1
            col += 1
            continue
        if ch == '"':
            j = i + 1
            while j < n and text[j] != '"':
                if text[j] == "\\":
                    j += 1
                if j < n and text[j] == "\n":
                    raise ParseError("newline in string literal", line, col)
                j += 1
            if j >= n:
                raise ParseError("unterminated string literal", line, col)
            yield "str", _unescape(text[i + 1:j], line, col), line, col
            col += j + 1 - i
            i = j + 1
            continue
        j = i
        while j < n and text[j] not in ' \t\r\n()";':
            j += 1
        yield "atom", text[i:j], line, col
        col += j - i
        i = j


def read_all(text: str) -> list:
    """Read every top-level form in ``text``."""
    stack: list[SList] = []
    top: list = []
    for kind, value, line, col in tokenize(text):
        if kind == "(":
            stack.append(SList([], line, col))
        elif kind == ")":
            if not stack:
                raise ParseError("unbalanced ')'", line, col)
            done = stack.pop()
            (stack[-1].items if stack else top).append(done)
        else:
            atom = Atom(value, line, col, quoted=(kind == "str"))
            if not stack:
                raise ParseError(f"atom {value!r} outside of a list", line, col)
            stack[-1].items.append(atom)
    if stack:
        raise ParseError("unbalanced '(' (missing ')')", stack[-1].line, stack[-1].col)
    return top
