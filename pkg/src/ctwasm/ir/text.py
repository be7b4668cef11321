"""Cranelift-style text form of the IR.

    function %name(s32, i32) -> i32 untrusted {
    block0(v0: i32, v1: i32):
        v2 = iaddDIT v0, v1
        v3 -> v2
        return v3
    }
"""

from __future__ import annotations

import re

from ..errors import IrError
from .core import (
    BINARY, ICMP_CONDS, Block, Brnz, Inst, IrModule, Jump, Return, SsaFunction,
)

LOAD_KINDS = {
    "load": (None, False), "uload8": (1, False), "sload8": (1, True), "uload16": (2, False),
    "sload16": (2, True), "uload32": (4, False), "sload32": (4, True),
}
STORE_KINDS = {"store": None, "istore8": 1, "istore16": 2, "istore32": 4}


def _signed(value: int, ty: str) -> int:
    bits = 64 if ty == "i64" else 32
    value &= (1 << bits) - 1
    return value - (1 << bits) if value >> (bits - 1) else value


def _v(x) -> str:
    return f"v{x}"


def _vs(xs) -> str:
    return ", ".join(_v(x) for x in xs)


def _target(bid, args) -> str:
    return f"block{bid}({_vs(args)})" if args else f"block{bid}"


def _callee(c) -> str:
    return f"fn{c}" if isinstance(c, int) else f"%{c.lstrip('$%')}"


def format_inst(ins: Inst, f: SsaFunction | None = None) -> str:
    lhs = f"{_v(ins.result)} = " if ins.result is not None else ""
    op = ins.opcode
    name = ins.name
    a = ins.aux
    if op == "iconst":
        return f"{lhs}iconst.{ins.ty} {_signed(a['imm'], ins.ty)}"
    if op == "iadd_imm":
        return f"{lhs}iadd_imm {_signed(a['imm'], ins.ty)}, {_v(ins.args[0])}"
    if op == "icmp":
        return f"{lhs}{name} {a['cond']} {_vs(ins.args)}"
    if op in ("bint", "uextend", "sextend", "ireduce"):
        return f"{lhs}{name}.{ins.ty} {_vs(ins.args)}"
    if op == "load":
        kind = next(k for k, v in LOAD_KINDS.items() if v == (a.get("width"), a.get("signed", False)))
        return f"{lhs}{kind}.{ins.ty} mem{a['mem']}, {_v(ins.args[0])}, {a.get('offset', 0)}"
    if op == "store":
        kind = next(k for k, v in STORE_KINDS.items() if v == a.get("width"))
        return f"{kind}.{a['vty']} mem{a['mem']}, {_vs(ins.args)}, {a.get('offset', 0)}"
    if op == "global_load":
        return f"{lhs}global_load.{ins.ty} g{a['global']}"
    if op == "global_store":
        return f"global_store.{a['vty']} g{a['global']}, {_vs(ins.args)}"
    if op == "stack_load":
        return f"{lhs}stack_load.{ins.ty} ss{a['slot']}"
    if op == "stack_store":
        return f"stack_store.{a['vty']} ss{a['slot']}, {_vs(ins.args)}"
    if op == "call":
        suffix = f".{ins.ty}" if ins.result is not None and ins.ty != "i32" else ""
        return f"{lhs}call{suffix} {_callee(a['callee'])}({_vs(ins.args)})"
    if op == "phi":
        return f"{lhs}phi({_vs(ins.args)})"
    return f"{lhs}{name} {_vs(ins.args)}"


def format_function(f: SsaFunction) -> str:
    sig = []
    for i, ty in enumerate(f.params):
        t = ("s" if f.param_secret[i] else "i") + ty[1:] if ty in ("i32", "i64") else ty
        note = f.param_notes[i] if i < len(f.param_notes) and f.param_notes[i] else ""
        sig.append(f"{t} {note}".strip())
    res = [("s" if s else "i") + t[1:] for t, s in zip(f.results, f.result_secret)]
    head = f"function %{f.name.lstrip('$%')}({', '.join(sig)})"
    if res:
        head += " -> " + ", ".join(res)
    if not f.trusted:
        head += " untrusted"
    lines = [head + " {"]

    alias_after: dict = {}
    defined = set()
    for b in f.blocks:
        for v, _ in b.params:
            defined.add(v)
        for ins in b.insts:
            if ins.result is not None:
                defined.add(ins.result)
    dangling = []
    for al in sorted(f.aliases):
        tgt = f.aliases[al]
        if tgt in defined or tgt in f.aliases:
            alias_after.setdefault(tgt, []).append(al)
        else:
            dangling.append(al)

    def emit_aliases(v, out):
        for al in alias_after.get(v, []):
            out.append(f"    {_v(al)} -> {_v(v)}")
            emit_aliases(al, out)

    for bi, b in enumerate(f.blocks):
        if bi:
            lines.append("")
        params = ", ".join(f"{_v(v)}: {t}" for v, t in b.params)
        lines.append(f"block{b.id}({params}):" if b.params else f"block{b.id}:")
        if bi == 0:
            for al in dangling:
                lines.append(f"    {_v(al)} -> {_v(f.aliases[al])}")
        for v, _ in b.params:
            emit_aliases(v, lines)
        for ins in b.insts:
            lines.append("    " + format_inst(ins, f))
            if ins.result is not None:
                emit_aliases(ins.result, lines)
        t = b.term
        if isinstance(t, Jump):
            lines.append(f"    jump {_target(t.target, t.args)}")
        elif isinstance(t, Brnz):
            lines.append(f"    {'brz' if t.zero else 'brnz'} {_v(t.cond)}, {_target(t.target, t.args)}")
            lines.append(f"    jump {_target(t.else_target, t.else_args)}")
        elif isinstance(t, Return):
            lines.append(f"    return {_vs(t.values)}".rstrip())
    lines.append("}")
    return "\n".join(lines) + "\n"


def format_module(m: IrModule) -> str:
    return "\n".join(format_function(f) for f in m.functions)


# --------------------------------------------------------------------------- parsing

_HEAD = re.compile(r"^function\s+(\S+?)\((.*)\)\s*(.*?)\{\s*$")
_BLOCK = re.compile(r"^(?:block|blk)(\d+)(?:\((.*)\))?:\s*$")
_ALIAS = re.compile(r"^v(\d+)\s*->\s*v(\d+)$")
_ASSIGN = re.compile(r"^v(\d+)\s*=\s*(.*)$")
_TARGET = re.compile(r"^(?:block|blk)(\d+)(?:\((.*)\))?$")


def _vals(text: str) -> list:
    text = text.strip()
    if not text:
        return []
    out = []
    for part in text.split(","):
        part = part.strip()
        if not re.fullmatch(r"v\d+", part):
            raise IrError(f"expected a value, got {part!r}")
        out.append(int(part[1:]))
    return out


def _split_target(text: str):
    m = _TARGET.match(text.strip())
    if not m:
        raise IrError(f"bad branch target {text!r}")
    return int(m.group(1)), _vals(m.group(2) or "")


def _split_top(text: str) -> list:
    """Split on commas that are not inside parentheses."""
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    if "".join(cur).strip():
        parts.append("".join(cur).strip())
    return parts


def _parse_rhs(rhs: str, result, types: dict) -> Inst:
    try:
        return _parse_rhs_inner(rhs, result, types)
    except (ValueError, KeyError, IndexError) as e:
        if isinstance(e, IrError):
            raise
        raise IrError(f"malformed operands in {rhs!r}") from e


def _parse_rhs_inner(rhs: str, result, types: dict) -> Inst:
    m = re.match(r"^([A-Za-z_][\w]*)(?:\.(\w+))?\s*(.*)$", rhs)
    if not m:
        raise IrError(f"cannot parse instruction {rhs!r}")
    opname, suffix, rest = m.group(1), m.group(2), m.group(3).strip()
    dit = False
    base = opname
    if opname.endswith("DIT"):
        dit = True
        base = opname[:-3]
    ins = Inst(base, result=result, dit=dit, ty=suffix)
    if base == "iconst":
        ins.aux["imm"] = int(rest, 0)
        ins.ty = suffix or "i32"
        ins.aux["imm"] &= (1 << (64 if ins.ty == "i64" else 32)) - 1
        return ins
    if base == "iadd_imm":
        imm, x = _split_top(rest)
        ins.args = _vals(x)
        ins.aux["imm"] = int(imm, 0)
        return ins
    if base == "icmp":
        cond, vals = rest.split(None, 1)
        if cond not in ICMP_CONDS:
            raise IrError(f"unknown icmp condition {cond!r}")
        ins.aux["cond"] = cond
        ins.args = _vals(vals)
        ins.ty = "b1"
        return ins
    if base in LOAD_KINDS:
        width, signed = LOAD_KINDS[base]
        mem, addr, off = _split_top(rest)
        ins.opcode = "load"
        ins.args = _vals(addr)
        ins.aux = {"mem": int(mem[3:]), "offset": int(off, 0), "width": width, "signed": signed}
        return ins
    if base in STORE_KINDS:
        mem, addr, val, off = _split_top(rest)
        ins.opcode = "store"
        ins.args = _vals(addr) + _vals(val)
        ins.aux = {"mem": int(mem[3:]), "offset": int(off, 0), "width": STORE_KINDS[base],
                   "vty": suffix or "i32"}
        ins.ty = None
        return ins
    if base == "global_load":
        ins.aux["global"] = int(rest[1:])
        return ins
    if base == "global_store":
        g, val = _split_top(rest)
        ins.aux = {"global": int(g[1:]), "vty": suffix or "i32"}
        ins.args = _vals(val)
        ins.ty = None
        return ins
    if base == "stack_load":
        ins.aux["slot"] = int(rest[2:])
        return ins
    if base == "stack_store":
        s, val = _split_top(rest)
        ins.aux = {"slot": int(s[2:]), "vty": suffix or "i32"}
        ins.args = _vals(val)
        ins.ty = None
        return ins
    if base == "call":
        cm = re.match(r"^(fn(\d+)|%([\w$.]+))\((.*)\)$", rest)
        if not cm:
            raise IrError(f"bad call {rhs!r}")
        ins.aux["callee"] = int(cm.group(2)) if cm.group(2) is not None else "$" + cm.group(3)
        ins.args = _vals(cm.group(4))
        if result is not None and ins.ty is None:
            ins.ty = "i32"
        return ins
    if base == "phi":
        pm = re.match(r"^\((.*)\)$", rest)
        if not pm:
            raise IrError(f"bad phi {rhs!r}")
        ins.args = _vals(pm.group(1))
        return ins
    ins.args = _vals(rest)
    return ins


def parse_function(text: str) -> SsaFunction:
    lines = [ln.split(";", 1)[0].rstrip() for ln in text.strip().splitlines()]
    lines = [ln.strip() for ln in lines if ln.strip()]
    if not lines:
        raise IrError("empty function text")
    hm = _HEAD.match(lines[0])
    if not hm:
        raise IrError(f"bad function header {lines[0]!r}")
    name, params, tail = hm.groups()
    results, words = [], []
    tail = tail.strip()
    if tail.startswith("->"):
        for tok in tail[2:].replace(",", " ").split():
            (results if re.fullmatch(r"[is](32|64)", tok) else words).append(tok)
    else:
        words = tail.split()
    f = SsaFunction(name=name.lstrip("%"), params=[], param_secret=[], results=[],
                    result_secret=[], trusted="untrusted" not in words)
    for p in [x.strip() for x in params.split(",") if x.strip()]:
        toks = p.split()
        ty = toks[0]
        if ty[0] not in "is" or ty[1:] not in ("32", "64"):
            raise IrError(f"bad parameter type {ty!r}")
        f.params.append("i" + ty[1:])
        f.param_secret.append(ty[0] == "s")
        f.param_notes.append(" ".join(toks[1:]))
    for r in results:
        f.results.append("i" + r[1:])
        f.result_secret.append(r[0] == "s")

    cur: Block | None = None
    types: dict = {}
    max_v = -1
    pending_jump_after_br = None
    for ln in lines[1:]:
        if ln == "}":
            break
        bm = _BLOCK.match(ln)
        if bm:
            if cur is not None and cur.term is None:
                raise IrError(f"block{cur.id} has no terminator")
            cur = Block(int(bm.group(1)))
            for part in [x.strip() for x in (bm.group(2) or "").split(",") if x.strip()]:
                pv, pt = [y.strip() for y in part.split(":")]
                v = int(pv[1:])
                cur.params.append((v, pt))
                types[v] = pt
                max_v = max(max_v, v)
            f.blocks.append(cur)
            pending_jump_after_br = None
            continue
        if cur is None:
            raise IrError(f"instruction outside a block: {ln!r}")
        am = _ALIAS.match(ln)
        if am:
            f.aliases[int(am.group(1))] = int(am.group(2))
            max_v = max(max_v, int(am.group(1)))
            continue
        if ln.startswith("brnz ") or ln.startswith("brz "):
            op, rest = ln.split(None, 1)
            cond, tgt = rest.split(",", 1)
            t, args = _split_target(tgt)
            pending_jump_after_br = Brnz(_vals(cond)[0], t, args, -1, [], zero=(op == "brz"))
            continue
        if ln.startswith("jump "):
            t, args = _split_target(ln[5:])
            if pending_jump_after_br is not None:
                pending_jump_after_br.else_target = t
                pending_jump_after_br.else_args = args
                cur.term = pending_jump_after_br
                pending_jump_after_br = None
            else:
                cur.term = Jump(t, args)
            continue
        if ln == "return" or ln.startswith("return "):
            cur.term = Return(_vals(ln[6:]))
            continue
        asm = _ASSIGN.match(ln)
        if asm:
            v = int(asm.group(1))
            ins = _parse_rhs(asm.group(2).strip(), v, types)
            max_v = max(max_v, v)
        else:
            ins = _parse_rhs(ln, None, types)
        cur.insts.append(ins)
    if pending_jump_after_br is not None:
        raise IrError("brnz without a following jump")
    if not f.blocks:
        raise IrError("function has no blocks")
    f.entry = f.blocks[0].id
    f.next_value = max_v + 1
    _infer_types(f, types)
    return f


def _infer_types(f: SsaFunction, types: dict):
    for b in f.blocks:
        for ins in b.insts:
            if ins.result is not None and ins.ty is not None:
                types[ins.result] = ins.ty
    for _ in range(len(f.blocks) + 2):
        changed = False
        for b in f.blocks:
            for ins in b.insts:
                if ins.result is None or ins.result in types and ins.ty is not None:
                    continue
                known = [types.get(f.resolve(a)) for a in ins.args if a is not None]
                guess = next((t for t in known if t and t != "b1"), None)
                if ins.opcode == "select":
                    guess = next((types.get(f.resolve(a)) for a in ins.args[1:] if types.get(f.resolve(a))), None)
                if guess and ins.ty != guess:
                    ins.ty = guess
                    types[ins.result] = guess
                    changed = True
        for al, tgt in f.aliases.items():
            if f.resolve(tgt) in types and types.get(al) != types[f.resolve(tgt)]:
                types[al] = types[f.resolve(tgt)]
                changed = True
        if not changed:
            break
    for b in f.blocks:
        for ins in b.insts:
            if ins.result is not None and ins.ty is None:
                ins.ty = "i32"
                types[ins.result] = "i32"
    f.types = types


def parse_module(text: str) -> IrModule:
    chunks = re.split(r"(?m)^(?=function\s)", text)
    return IrModule(functions=[parse_function(c) for c in chunks if c.strip()])


def structure(f: SsaFunction):
    """Rename values and blocks canonically for comparisons up to renaming."""
    vmap: dict = {}
    bmap: dict = {}

    def val(v):
        v = f.resolve(v)
        if v not in vmap:
            vmap[v] = len(vmap)
        return vmap[v]

    for b in f.blocks:
        bmap[b.id] = len(bmap)
    out = []
    for b in f.blocks:
        blk = [("block", bmap[b.id], tuple((val(v), t) for v, t in b.params))]
        for ins in b.insts:
            r = val(ins.result) if ins.result is not None else None
            aux = tuple(sorted((k, v) for k, v in ins.aux.items()))
            blk.append((r, ins.name, ins.ty, aux, tuple(val(a) for a in ins.args)))
        t = b.term
        if isinstance(t, Jump):
            blk.append(("jump", bmap[t.target], tuple(val(a) for a in t.args)))
        elif isinstance(t, Brnz):
            blk.append(("brnz", t.zero, val(t.cond), bmap[t.target], tuple(val(a) for a in t.args),
                        bmap[t.else_target], tuple(val(a) for a in t.else_args)))
        elif isinstance(t, Return):
            blk.append(("return", tuple(val(a) for a in t.values)))
        out.append(tuple(blk))
    return tuple(out)


__all__ = ["format_function", "format_module", "format_inst", "parse_function", "parse_module",
           "structure", "BINARY"]
