"""Source AST for the dialect and the text front end (``parse_text``)."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from ..errors import ParseError
from .sexpr import Atom, SList, read_all
from .types import SecrecyType, parse_type

INT_BINOPS = {
    "add", "sub", "mul", "and", "or", "xor", "shl", "shr_u", "shr_s", "rotl", "rotr",
}
PUBLIC_ONLY_BINOPS = {"div_u", "div_s", "rem_u", "rem_s"}
INT_CMPS = {"eq", "ne", "lt_u", "lt_s", "gt_u", "gt_s", "le_u", "le_s", "ge_u", "ge_s"}
FLOAT_BINOPS = {"add", "sub", "mul", "div"}
LOADS = {
    "load": None, "load8_u": (1, False), "load8_s": (1, True), "load16_u": (2, False),
    "load16_s": (2, True), "load32_u": (4, False), "load32_s": (4, True),
}
STORES = {"store": None, "store8": 1, "store16": 2, "store32": 4}

LEGACY = {
    "get_local": "local.get",
    "set_local": "local.set",
    "tee_local": "local.tee",
    "get_global": "global.get",
    "set_global": "global.set",
    "i32.wrap/i64": "i32.wrap_i64",
    "s32.wrap/s64": "s32.wrap_s64",
    "i64.extend_u/i32": "i64.extend_i32_u",
    "i64.extend_s/i32": "i64.extend_i32_s",
    "s64.extend_u/s32": "s64.extend_s32_u",
    "s64.extend_s/s32": "s64.extend_s32_s",
}

PLAIN_OPS = {
    "local.get", "local.set", "local.tee", "global.get", "global.set", "call", "br", "br_if",
    "return", "drop", "nop", "select", "sselect", "block", "loop", "if",
}


@dataclass
class Instr:
    """One (possibly folded) instruction.

    ``op`` is the normalized opcode (``s32.add``, ``local.get``, ``block``...),
    ``imm`` carries immediates, ``args`` the folded operand sub-expressions.
    Structured instructions keep their bodies in ``body``/``orelse``.
    """

    op: str
    imm: dict = field(default_factory=dict)
    args: list = field(default_factory=list)
    body: list = field(default_factory=list)
    orelse: list | None = None
    label: str | None = None
    result: SecrecyType | None = None
    line: int = 0
    col: int = 0
    # Filled by the type checker.
    in_types: tuple = ()
    out_type: SecrecyType | None = None

    @property
    def prefix(self) -> str | None:
        return self.op.split(".", 1)[0] if "." in self.op and self.op[0] in "isf" else None

    @property
    def base(self) -> str:
        return self.op.split(".", 1)[1] if self.prefix else self.op

    @property
    def optype(self) -> SecrecyType | None:
        p = self.prefix
        return parse_type(p) if p else None


@dataclass
class SourceFunction:
    name: str
    trusted: bool
    params: list  # [(name, SecrecyType)]
    results: list  # [SecrecyType]
    locals: list  # [(name, SecrecyType)]
    body: list
    exports: list = field(default_factory=list)
    line: int = 0
    col: int = 0

    @property
    def param_types(self):
        return [t for _, t in self.params]


@dataclass
class SourceGlobal:
    name: str
    type: SecrecyType
    mutable: bool
    init: Instr
    line: int = 0
    col: int = 0


@dataclass
class SourceMemory:
    name: str
    pages: int
    secret: bool = False
    imported: bool = False
    line: int = 0
    col: int = 0


@dataclass
class DataSegment:
    memory: str | int
    offset: int
    data: bytes
    line: int = 0
    col: int = 0


@dataclass
class SourceModule:
    functions: list = field(default_factory=list)
    globals: list = field(default_factory=list)
    memories: list = field(default_factory=list)
    data: list = field(default_factory=list)

    def func_index(self, ref):
        return _index_of(self.functions, ref)

    def global_index(self, ref):
        return _index_of(self.globals, ref)

    def memory_index(self, ref):
        return _index_of(self.memories, ref)


def _index_of(items, ref):
    if isinstance(ref, int):
        return ref if 0 <= ref < len(items) else None
    for i, item in enumerate(items):
        if item.name == ref:
            return i
    return None


# --------------------------------------------------------------------------- parsing

def _err(node, msg, rule="syntax"):
    return ParseError(msg, node.line, node.col, rule)


def _atom(node) -> str | None:
    return node.text if isinstance(node, Atom) and not node.quoted else None


def _ref(node):
    """A ``$name`` or a numeric index."""
    t = _atom(node)
    if t is None:
        raise _err(node, "expected a name or index")
    if t.startswith("$"):
        return t
    try:
        return int(t, 0)
    except ValueError:
        raise _err(node, f"expected a name or index, got {t!r}") from None


def _int_literal(node, bits: int) -> int:
    t = _atom(node)
    if t is None:
        raise _err(node, "expected an integer literal")
    try:
        v = int(t.replace("_", ""), 0)
    except ValueError:
        raise _err(node, f"bad integer literal {t!r}") from None
    if not -(1 << (bits - 1)) <= v < (1 << bits):
        raise _err(node, f"integer literal {t} out of range for {bits} bits")
    return v & ((1 << bits) - 1)


def _float_literal(node) -> float:
    t = _atom(node)
    try:
        return float(t)
    except (TypeError, ValueError):
        raise _err(node, f"bad float literal {t!r}") from None


def _type(node) -> SecrecyType:
    t = _atom(node)
    ty = parse_type(t) if t else None
    if ty is None:
        raise _err(node, f"malformed type annotation {t!r}", "bad-type")
    return ty


def _is_block_type(node) -> bool:
    return isinstance(node, SList) and node.head() == "result"


def _normalize(op: str) -> str:
    return LEGACY.get(op, op)


def known_opcode(op: str) -> bool:
    if op in PLAIN_OPS:
        return True
    if "." not in op:
        return False
    prefix, base = op.split(".", 1)
    ty = parse_type(prefix)
    if ty is None:
        return False
    if base == "const":
        return True
    if ty.is_float:
        return base in FLOAT_BINOPS or base in {
            "convert_i32_s", "convert_i32_u", "convert_i64_s", "convert_i64_u",
        }
    if base in INT_BINOPS or base in INT_CMPS or base == "eqz":
        return True
    if base in PUBLIC_ONLY_BINOPS:
        return not ty.secret
    if base in LOADS:
        return base != "load32_u" and base != "load32_s" or ty.width == 64
    if base in STORES:
        return base != "store32" or ty.width == 64
    if base == "sselect":
        return ty.secret
    if base == "declassify":
        return not ty.secret
    if base == "classify":
        return ty.secret
    if ty.width == 32 and base == f"wrap_{'s' if ty.secret else 'i'}64":
        return True
    if ty.width == 64 and base in (
        f"extend_{'s' if ty.secret else 'i'}32_u", f"extend_{'s' if ty.secret else 'i'}32_s"
    ):
        return True
    if not ty.secret and base in ("trunc_f32_s", "trunc_f64_s", "trunc_f32_u", "trunc_f64_u"):
        return True
    return False


_MEMARG = re.compile(r"^(offset|align)=(\d+|0x[0-9a-fA-F]+)$")


def parse_instr(node) -> Instr:
    if not isinstance(node, SList):
        if isinstance(node, Atom) and not node.quoted:
            raise _err(node, f"bare instruction {node.text!r}; use the folded form '({node.text} ...)'")
        raise _err(node, "expected an instruction")
    head = node.head()
    if head is None:
        raise _err(node, "expected an opcode")
    op = _normalize(head)
    if op == "sselect":
        op = "s32.sselect"
    if not known_opcode(op):
        raise ParseError(f"unknown opcode {head!r}", node.line, node.col, "unknown-opcode")
    ins = Instr(op=op, line=node.line, col=node.col)
    rest = node.items[1:]

    if op in ("block", "loop", "if"):
        i = 0
        if i < len(rest) and _atom(rest[i]) and _atom(rest[i]).startswith("$"):
            ins.label = _atom(rest[i])
            i += 1
        if i < len(rest) and _is_block_type(rest[i]):
            res = rest[i].items[1:]
            if len(res) > 1:
                raise _err(rest[i], "multi-value block results are not supported", "unsupported")
            if res:
                ins.result = _type(res[0])
            i += 1
        if op != "if":
            ins.body = [parse_instr(x) for x in rest[i:]]
            return ins
        seen_then = False
        for x in rest[i:]:
            h = x.head() if isinstance(x, SList) else None
            if h == "then":
                ins.body = [parse_instr(y) for y in x.items[1:]]
                seen_then = True
            elif h == "else":
                if not seen_then:
                    raise _err(x, "'else' before 'then'")
                ins.orelse = [parse_instr(y) for y in x.items[1:]]
            elif seen_then:
                raise _err(x, "unexpected form after 'then'")
            else:
                ins.args.append(parse_instr(x))
        if not seen_then:
            raise _err(node, "'if' without a 'then' clause")
        return ins

    def take_ref(label_ok=True):
        if not rest or isinstance(rest[0], SList):
            raise _err(node, f"{op} expects an immediate")
        return _ref(rest.pop(0))

    if op in ("local.get", "local.set", "local.tee", "global.get", "global.set", "call"):
        ins.imm["ref"] = take_ref()
    elif op in ("br", "br_if"):
        ins.imm["depth"] = take_ref()
    elif op.endswith(".const"):
        ty = ins.optype
        if not rest:
            raise _err(node, "const without a literal")
        lit = rest.pop(0)
        ins.imm["value"] = _float_literal(lit) if ty.is_float else _int_literal(lit, ty.width)
    elif ins.base in LOADS or ins.base in STORES:
        if rest and _atom(rest[0]) is not None and (
            _atom(rest[0]).startswith("$") or _atom(rest[0]).isdigit()
        ):
            ins.imm["memory"] = _ref(rest.pop(0))
        else:
            ins.imm["memory"] = 0
        ins.imm["offset"] = 0
        while rest and _atom(rest[0]) is not None and _MEMARG.match(_atom(rest[0])):
            key, val = _MEMARG.match(_atom(rest.pop(0))).groups()
            ins.imm[key] = int(val, 0)
        if ins.imm["offset"] >= 1 << 31:
            raise _err(node, "static offset must be below 2^31")
    for x in rest:
        if isinstance(x, Atom):
            raise _err(x, f"unexpected immediate {x.text!r} for {op}")
        ins.args.append(parse_instr(x))
    return ins


def _parse_memory(node: SList, imported=False) -> SourceMemory:
    items = node.items[1:]
    mem = SourceMemory(name="", pages=0, imported=imported, line=node.line, col=node.col)
    nums = []
    for it in items:
        t = _atom(it)
        if t is None:
            raise _err(it, "unexpected form in memory declaration")
        if t.startswith("$"):
            mem.name = t
        elif t == "secret":
            mem.secret = True
        elif t == "public":
            mem.secret = False
        else:
            try:
                nums.append(int(t, 0))
            except ValueError:
                raise _err(it, f"unexpected token {t!r} in memory declaration") from None
    if not nums:
        raise _err(node, "memory declaration without a page count")
    mem.pages = nums[0]
    if mem.pages < 1 or mem.pages > 256:
        raise _err(node, "memory page count must be in 1..256")
    return mem


def _parse_func(node: SList, index: int) -> SourceFunction:
    items = node.items[1:]
    fn = SourceFunction(name=f"${index}", trusted=True, params=[], results=[], locals=[],
                        body=[], line=node.line, col=node.col)
    i = 0
    if i < len(items) and _atom(items[i]) and _atom(items[i]).startswith("$"):
        fn.name = _atom(items[i])
        i += 1
    while i < len(items):
        it = items[i]
        t = _atom(it)
        if t == "untrusted":
            fn.trusted = False
        elif t == "trusted":
            fn.trusted = True
        elif isinstance(it, SList) and it.head() == "export":
            fn.exports.append(it.items[1].text if len(it.items) > 1 else "")
        elif isinstance(it, SList) and it.head() in ("param", "local"):
            dest = fn.params if it.head() == "param" else fn.locals
            sub = it.items[1:]
            if sub and _atom(sub[0]) and _atom(sub[0]).startswith("$"):
                if len(sub) != 2:
                    raise _err(it, f"named {it.head()} takes exactly one type")
                dest.append((_atom(sub[0]), _type(sub[1])))
            else:
                for s in sub:
                    dest.append((None, _type(s)))
        elif isinstance(it, SList) and it.head() == "result":
            fn.results.extend(_type(s) for s in it.items[1:])
            if len(fn.results) > 1:
                raise _err(it, "multi-value returns are not supported", "unsupported")
        else:
            break
        i += 1
    fn.body = [parse_instr(x) for x in items[i:]]
    return fn


def parse_text(source: str) -> SourceModule:
    """Parse dialect text into a :class:`SourceModule`.

    Raises :class:`ParseError` carrying line/column on malformed input.
    """
    forms = read_all(source)
    if len(forms) != 1 or not isinstance(forms[0], SList) or forms[0].head() != "module":
        where = forms[0] if forms else Atom("", 1, 1)
        raise _err(where, "expected a single (module ...) form")
    mod = SourceModule()
    for field_node in forms[0].items[1:]:
        if isinstance(field_node, Atom):
            if field_node.text.startswith("$"):
                continue  # module name
            raise _err(field_node, f"unexpected token {field_node.text!r}")
        head = field_node.head()
        if head == "func":
            mod.functions.append(_parse_func(field_node, len(mod.functions)))
        elif head == "memory":
            mem = _parse_memory(field_node)
            mem.name = mem.name or f"${len(mod.memories)}"
            mod.memories.append(mem)
        elif head == "import":
            inner = field_node.items[-1] if field_node.items else None
            if not isinstance(inner, SList) or inner.head() != "memory":
                raise _err(field_node, "only memory imports are supported", "unsupported")
            mem = _parse_memory(inner, imported=True)
            mem.name = mem.name or f"${len(mod.memories)}"
            mod.memories.append(mem)
        elif head == "global":
            mod.globals.append(_parse_global(field_node, len(mod.globals)))
        elif head == "data":
            mod.data.append(_parse_data(field_node))
        elif head in ("export", "type"):
            continue
        elif head in ("table", "elem", "start"):
            raise _err(field_node, f"'{head}' is not supported by this dialect", "unsupported")
        else:
            raise _err(field_node, f"unknown module field {head!r}")
    return mod


def _parse_global(node: SList, index: int) -> SourceGlobal:
    items = node.items[1:]
    name = f"${index}"
    if items and _atom(items[0]) and _atom(items[0]).startswith("$"):
        name = _atom(items.pop(0))
    if len(items) != 2:
        raise _err(node, "global needs a type and an initializer")
    tnode, init = items
    mutable = False
    if isinstance(tnode, SList) and tnode.head() == "mut":
        mutable = True
        tnode = tnode.items[1]
    ty = _type(tnode)
    ins = parse_instr(init)
    if not ins.op.endswith(".const"):
        raise _err(init, "global initializer must be a constant")
    return SourceGlobal(name, ty, mutable, ins, node.line, node.col)


def _parse_data(node: SList) -> DataSegment:
    items = node.items[1:]
    mem = 0
    if items and _atom(items[0]) is not None:
        mem = _ref(items.pop(0))
    if not items or not isinstance(items[0], SList):
        raise _err(node, "data segment needs an (i32.const offset)")
    off = parse_instr(items.pop(0))
    if off.op != "i32.const":
        raise _err(node, "data offset must be an i32.const")
    blob = bytearray()
    for it in items:
        if not (isinstance(it, Atom) and it.quoted):
            raise _err(it, "data payload must be string literals")
        blob += it.text.encode("latin-1")
    return DataSegment(mem, off.imm["value"], bytes(blob), node.line, node.col)


# --------------------------------------------------------------------------- printing

def _fmt_ref(r):
    return str(r)


def format_instr(ins: Instr, indent: int = 0) -> str:
    pad = "  " * indent
    head = [ins.op]
    if ins.op in ("block", "loop", "if"):
        if ins.label:
            head.append(ins.label)
        if ins.result:
            head.append(f"(result {ins.result.name})")
        if ins.op == "if":
            lines = [pad + "(" + " ".join(head)]
            lines += [format_instr(a, indent + 1) for a in ins.args]
            lines.append(pad + "  (then")
            lines += [format_instr(b, indent + 2) for b in ins.body]
            lines.append(pad + "  )")
            if ins.orelse is not None:
                lines.append(pad + "  (else")
                lines += [format_instr(b, indent + 2) for b in ins.orelse]
                lines.append(pad + "  )")
            lines.append(pad + ")")
            return "\n".join(lines)
        lines = [pad + "(" + " ".join(head)]
        lines += [format_instr(b, indent + 1) for b in ins.body]
        lines.append(pad + ")")
        return "\n".join(lines)
    if "ref" in ins.imm:
        head.append(_fmt_ref(ins.imm["ref"]))
    if "depth" in ins.imm:
        head.append(_fmt_ref(ins.imm["depth"]))
    if "value" in ins.imm:
        v = ins.imm["value"]
        head.append(repr(v) if isinstance(v, float) else str(v))
    if "memory" in ins.imm:
        head.append(_fmt_ref(ins.imm["memory"]))
        if ins.imm.get("offset"):
            head.append(f"offset={ins.imm['offset']}")
        if "align" in ins.imm:
            head.append(f"align={ins.imm['align']}")
    if not ins.args:
        return pad + "(" + " ".join(head) + ")"
    inner = [format_instr(a, indent + 1) for a in ins.args]
    if all("\n" not in s for s in inner) and sum(len(s) for s in inner) < 80:
        return pad + "(" + " ".join(head) + " " + " ".join(s.strip() for s in inner) + ")"
    return pad + "(" + " ".join(head) + "\n" + "\n".join(inner) + ")"


def _escape(data: bytes) -> str:
    out = []
    for b in data:
        if 32 <= b < 127 and chr(b) not in '"\\':
            out.append(chr(b))
        else:
            out.append(f"\\{b:02x}")
    return "".join(out)


def format_module(mod: SourceModule) -> str:
    lines = ["(module"]
    for m in mod.memories:
        decl = f"(memory {m.name}{' secret' if m.secret else ''} {m.pages})"
        if m.imported:
            decl = f'(import "env" "{m.name.lstrip("$")}" {decl})'
        lines.append("  " + decl)
    for g in mod.globals:
        ty = f"(mut {g.type.name})" if g.mutable else g.type.name
        lines.append(f"  (global {g.name} {ty} {format_instr(g.init).strip()})")
    for d in mod.data:
        lines.append(f'  (data {d.memory} (i32.const {d.offset}) "{_escape(d.data)}")')
    for f in mod.functions:
        sig = [f"(func {f.name}"]
        if not f.trusted:
            sig.append(" untrusted")
        for name, ty in f.params:
            sig.append(f" (param {name} {ty.name})" if name else f" (param {ty.name})")
        if f.results:
            sig.append(" (result " + " ".join(t.name for t in f.results) + ")")
        for name, ty in f.locals:
            sig.append(f" (local {name} {ty.name})" if name else f" (local {ty.name})")
        lines.append("  " + "".join(sig))
        lines += [format_instr(b, 2) for b in f.body]
        lines.append("  )")
    lines.append(")")
    return "\n".join(lines) + "\n"


def strip_positions(obj):
    """Structural view of a module without source positions or annotations."""
    if isinstance(obj, list):
        return [strip_positions(x) for x in obj]
    if isinstance(obj, Instr):
        return (obj.op, tuple(sorted(obj.imm.items(), key=lambda kv: kv[0])),
                strip_positions(obj.args), strip_positions(obj.body),
                None if obj.orelse is None else strip_positions(obj.orelse),
                obj.label, obj.result)
    if isinstance(obj, SourceFunction):
        return (obj.name, obj.trusted, obj.params, obj.results, obj.locals, strip_positions(obj.body))
    if isinstance(obj, SourceGlobal):
        return (obj.name, obj.type, obj.mutable, strip_positions(obj.init))
    if isinstance(obj, SourceMemory):
        return (obj.name, obj.pages, obj.secret, obj.imported)
    if isinstance(obj, DataSegment):
        return (obj.memory, obj.offset, obj.data)
    if isinstance(obj, SourceModule):
        return tuple(strip_positions(x) for x in (obj.functions, obj.globals, obj.memories, obj.data))
    return obj
