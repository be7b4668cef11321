"""Pcode-like machine IR.

A :class:`MachineInst` is one instruction of a toy load/store target with
an ordered list of micro-ops (:class:`PcodeOp`) that make every side effect
explicit, including NZCV flag writes. Varnodes are in SSA form: each virtual
register ``rN``, temporary and flag version is written exactly once. Block
joins are ``phi`` pseudo-instructions holding MULTIEQUAL micro-ops whose
tags name the branch instruction each input arrives from.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple


class Varnode(NamedTuple):
    space: str  # reg, const, unique, flag, ram, rel, iop
    name: object  # register name, constant value, address, micro-op index
    size: int

    def __str__(self):
        return format_varnode(self)


def reg(name, size) -> Varnode:
    return Varnode("reg", name, size)


def const(value, size=8) -> Varnode:
    return Varnode("const", value & ((1 << (8 * size)) - 1), size)


def ram(addr) -> Varnode:
    return Varnode("ram", addr, 8)


def format_varnode(v: Varnode) -> str:
    if v.space == "const":
        return f"#{v.name:#x}:{v.size}"
    if v.space == "ram":
        return f"*{v.name:#x}" if isinstance(v.name, int) else f"*{v.name}"
    if v.space == "rel":
        return f"<{v.name}>"
    if v.space == "iop":
        return f"iop[{v.name:#x}]"
    if v.space == "unique":
        return f"$U{v.name}:{v.size}"
    return f"{v.name}:{v.size}"


# Fixed input arity per micro-op (None = variadic).
ARITY = {
    "COPY": 1, "LOAD": 1, "STORE": 2,
    "INT_ADD": 2, "INT_SUB": 2, "INT_MULT": 2, "INT_XOR": 2, "INT_AND": 2, "INT_OR": 2,
    "INT_LEFT": 2, "INT_RIGHT": 2, "INT_SRIGHT": 2,
    "INT_EQUAL": 2, "INT_NOTEQUAL": 2, "INT_LESS": 2, "INT_SLESS": 2, "INT_LESSEQUAL": 2,
    "INT_ZEXT": 1, "INT_SEXT": 1, "SUBPIECE": 2, "INT_2COMP": 1,
    "INT_DIV": 2, "INT_SDIV": 2, "INT_REM": 2, "INT_SREM": 2,
    "BOOL_NEGATE": 1,
    "CBRANCH": 2, "BRANCH": 1, "BRANCHIND": 1,
    "CALL": None, "CALLIND": None, "RETURN": None,
    "MULTIEQUAL": None, "INDIRECT": 2,
}
HAS_OUTPUT = {op for op in ARITY} - {"STORE", "CBRANCH", "BRANCH", "BRANCHIND", "CALL", "CALLIND", "RETURN"}
BRANCHING = {"CBRANCH", "BRANCH", "BRANCHIND", "CALL", "CALLIND", "RETURN"}

# Mnemonics with data-independent timing on the modeled target.
DIT_ALLOWLIST = frozenset({
    "addDIT", "subDIT", "mulDIT", "andDIT", "orrDIT", "eorDIT", "lslDIT", "lsrDIT", "asrDIT",
    "rorDIT", "negDIT", "cmpDIT", "csetDIT", "cselDIT", "movDIT", "uxtbDIT", "uxtwDIT", "sxtwDIT",
    "movwDIT",
    "ldr", "ldrb", "ldrsb", "ldrh", "ldrsh", "ldrsw", "str", "strb", "strh",
    "ret",
})
MEMORY_MNEMONICS = frozenset({"ldr", "ldrb", "ldrsb", "ldrh", "ldrsh", "ldrsw", "str", "strb", "strh"})
FLAG_NAMES = ("NF", "ZF", "CF", "VF")


@dataclass
class PcodeOp:
    opcode: str
    output: Varnode | None
    inputs: list
    tags: list = field(default_factory=list)  # MULTIEQUAL: source of each input

    def __str__(self):
        ins = ", ".join(format_varnode(v) for v in self.inputs)
        if self.tags:
            ins += " ; from " + ", ".join(f"{t:#x}" if t >= 0x1000 else f"<{t}>" for t in self.tags)
        if self.output is not None:
            return f"{format_varnode(self.output)} = {self.opcode} {ins}".rstrip()
        return f"{self.opcode} {ins}".rstrip()


@dataclass
class MachineInst:
    addr: int
    mnemonic: str
    ops: list
    text: str = ""
    flags_written: list = field(default_factory=list)

    @property
    def dit(self) -> bool:
        return self.mnemonic in DIT_ALLOWLIST

    @property
    def pseudo(self) -> bool:
        return self.mnemonic == "phi"


@dataclass
class MirFunction:
    name: str
    index: int
    entry: int
    insts: list = field(default_factory=list)
    n_params: int = 0
    param_sizes: list = field(default_factory=list)
    result_sizes: list = field(default_factory=list)
    frame_size: int = 0
    blocks: list = field(default_factory=list)  # block start addresses, layout order

    @property
    def size(self) -> int:
        """Real machine instructions, excluding ``phi`` pseudo-instructions."""
        return sum(1 for i in self.insts if not i.pseudo)

    def inst_at(self) -> dict:
        return {i.addr: i for i in self.insts}


@dataclass
class MirProgram:
    functions: list = field(default_factory=list)
    manifest: object = None
    layout: dict = field(default_factory=dict)
    memories: list = field(default_factory=list)  # [{"pages", "imported"}]
    globals: list = field(default_factory=list)  # [{"size", "init"}]
    data: list = field(default_factory=list)  # [{"memory", "offset", "bytes"}]
    rodata: dict = field(default_factory=dict)  # addr -> 8-byte value
    call_mode: str = "indirect"

    @property
    def size(self) -> int:
        return sum(f.size for f in self.functions)

    def function_at(self, entry: int):
        for f in self.functions:
            if f.entry == entry:
                return f
        return None

    def function(self, name_or_index):
        if isinstance(name_or_index, int):
            return self.functions[name_or_index]
        for f in self.functions:
            if f.name == name_or_index or f.name.lstrip("$") == str(name_or_index).lstrip("$"):
                return f
        raise KeyError(name_or_index)
