"""Micro-op value semantics shared by the reference interpreter.

Values are unsigned integers of the varnode's byte size. Division traps on
a zero divisor and signed division traps on overflow, mirroring the source
language; shifts by at least the operand width yield zero (or the sign fill
for arithmetic right shifts).
"""

from __future__ import annotations

from ..errors import Trap


def mask(size: int) -> int:
    return (1 << (8 * size)) - 1


def signed(v: int, size: int) -> int:
    bits = 8 * size
    return v - (1 << bits) if v >> (bits - 1) & 1 else v


def apply(opcode: str, vals: list, sizes: list, out: int) -> int:
    m = mask(out) if out else 0
    if opcode == "COPY":
        return vals[0] & m
    if opcode == "INT_ADD":
        return (vals[0] + vals[1]) & m
    if opcode == "INT_SUB":
        return (vals[0] - vals[1]) & m
    if opcode == "INT_MULT":
        return (vals[0] * vals[1]) & m
    if opcode == "INT_XOR":
        return vals[0] ^ vals[1]
    if opcode == "INT_AND":
        return vals[0] & vals[1]
    if opcode == "INT_OR":
        return vals[0] | vals[1]
    if opcode == "INT_LEFT":
        return (vals[0] << vals[1]) & m if vals[1] < 8 * out else 0
    if opcode == "INT_RIGHT":
        return vals[0] >> vals[1] if vals[1] < 8 * out else 0
    if opcode == "INT_SRIGHT":
        return (signed(vals[0], sizes[0]) >> min(vals[1], 8 * out - 1)) & m
    if opcode == "INT_EQUAL":
        return int(vals[0] == vals[1])
    if opcode == "INT_NOTEQUAL":
        return int(vals[0] != vals[1])
    if opcode == "INT_LESS":
        return int(vals[0] < vals[1])
    if opcode == "INT_LESSEQUAL":
        return int(vals[0] <= vals[1])
    if opcode == "INT_SLESS":
        return int(signed(vals[0], sizes[0]) < signed(vals[1], sizes[1]))
    if opcode == "INT_ZEXT":
        return vals[0]
    if opcode == "INT_SEXT":
        return signed(vals[0], sizes[0]) & m
    if opcode == "SUBPIECE":
        return (vals[0] >> (8 * vals[1])) & m
    if opcode == "INT_2COMP":
        return (-vals[0]) & m
    if opcode == "BOOL_NEGATE":
        return int(not vals[0])
    if opcode in ("INT_DIV", "INT_REM"):
        if vals[1] == 0:
            raise Trap("div-by-zero")
        return vals[0] // vals[1] if opcode == "INT_DIV" else vals[0] % vals[1]
    if opcode in ("INT_SDIV", "INT_SREM"):
        a, b = signed(vals[0], sizes[0]), signed(vals[1], sizes[1])
        if b == 0:
            raise Trap("div-by-zero")
        q = abs(a) // abs(b) * (1 if (a < 0) == (b < 0) else -1)
        if opcode == "INT_SDIV":
            if q >= 1 << (8 * out - 1):
                raise Trap("int-overflow")
            return q & m
        return (a - q * b) & m
    raise Trap("bad-op", opcode)
