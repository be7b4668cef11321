"""Peephole rewriting with a small Peepmatic-style rule language.

    (=> (when (iadd $x $C) (fits-in-native-word $C)) (iadd_imm $C $x))

``$lower`` variables bind any value, ``$Upper`` variables bind constants
(an ``iconst`` operand, or the immediate of an ``*_imm`` opcode, whose first
pattern operand is the immediate). Rules never apply to DIT instructions:
a rule mentioning a DIT opcode is rejected when loaded.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import CtwError
from ..front.sexpr import Atom, SList, read_all
from ..ir.core import WIDTH, Inst, SsaFunction
from .report import PassReport

DEFAULT_RULES = """
(=> (when (iadd $x $C) (fits-in-native-word $C)) (iadd_imm $C $x))
(=> (iadd_imm $C1 (iadd_imm $C2 $x)) (iadd_imm (+ $C1 $C2) $x))
(=> (iadd_imm 0 $x) $x)
"""

GUARDS = {"fits-in-native-word"}
CONST_OPS = {"+": lambda a, b: a + b, "-": lambda a, b: a - b}


class RuleError(CtwError):
    pass


@dataclass
class PeepholeRule:
    pattern: object  # nested tuples: (opcode, operand...) | "$var" | int
    replacement: object
    guards: list
    dit_applicable: bool = False
    text: str = ""


def _to_tree(node):
    if isinstance(node, Atom):
        t = node.text
        if t.startswith("$"):
            return t
        try:
            return int(t, 0)
        except ValueError:
            return t
    return tuple(_to_tree(x) for x in node.items)


def _opcodes(tree):
    if isinstance(tree, tuple):
        yield tree[0]
        for x in tree[1:]:
            yield from _opcodes(x)


def check_rule(rule: PeepholeRule):
    if rule.dit_applicable:
        raise RuleError("DIT-applicable peephole rules are disabled")
    if any(str(op).endswith("DIT") for op in _opcodes(rule.pattern)):
        raise RuleError(f"rule pattern matches a DIT opcode: {rule.text}")
    root_dit = isinstance(rule.pattern, tuple) and str(rule.pattern[0]).endswith("DIT")
    if not root_dit and any(str(op).endswith("DIT") for op in _opcodes(rule.replacement)):
        raise RuleError(f"rule introduces a DIT opcode under a non-DIT root: {rule.text}")


def parse_rules(text: str) -> list:
    rules = []
    for form in read_all(text):
        if not isinstance(form, SList) or form.head() != "=>" or len(form.items) != 3:
            raise RuleError("a rule has the shape (=> pattern replacement)")
        lhs, rhs = form.items[1], form.items[2]
        guards = []
        if isinstance(lhs, SList) and lhs.head() == "when":
            guards = [_to_tree(x) for x in lhs.items[2:]]
            lhs = lhs.items[1]
            for gd in guards:
                if not isinstance(gd, tuple) or gd[0] not in GUARDS:
                    raise RuleError(f"unknown guard {gd!r}")
        rule = PeepholeRule(_to_tree(lhs), _to_tree(rhs), guards, text=_render(form))
        check_rule(rule)
        rules.append(rule)
    return rules


def _render(node) -> str:
    if isinstance(node, Atom):
        return node.text
    return "(" + " ".join(_render(x) for x in node.items) + ")"


def default_rules() -> list:
    return parse_rules(DEFAULT_RULES)


def _is_const_var(x) -> bool:
    return isinstance(x, str) and x.startswith("$") and x[1:2].isupper()


class _Matcher:
    def __init__(self, f: SsaFunction, defs: dict):
        self.f = f
        self.defs = defs

    def value(self, pat, v, env) -> bool:
        v = self.f.resolve(v)
        if isinstance(pat, str) and pat.startswith("$"):
            if _is_const_var(pat):
                d = self.defs.get(v)
                if d is None or d.opcode != "iconst":
                    return False
                return self.bind(env, pat, d.aux["imm"])
            return self.bind(env, pat, ("v", v))
        if isinstance(pat, int):
            d = self.defs.get(v)
            return d is not None and d.opcode == "iconst" and d.aux["imm"] == pat
        d = self.defs.get(v)
        return d is not None and self.inst(pat, d, env)

    def inst(self, pat, ins: Inst, env) -> bool:
        if not isinstance(pat, tuple) or pat[0] != ins.name:
            return False
        ops = list(pat[1:])
        if pat[0].endswith("_imm"):
            if not ops:
                return False
            imm = ops.pop(0)
            if isinstance(imm, int):
                if _signed(ins.aux["imm"], ins.ty) != imm and ins.aux["imm"] != imm:
                    return False
            elif not self.bind(env, imm, ins.aux["imm"]):
                return False
        if len(ops) != len(ins.args):
            return False
        return all(self.value(p, a, env) for p, a in zip(ops, ins.args))

    @staticmethod
    def bind(env, name, val) -> bool:
        if name in env:
            return env[name] == val
        env[name] = val
        return True


def _signed(x, ty):
    bits = WIDTH.get(ty, 32)
    return x - (1 << bits) if x >> (bits - 1) & 1 else x


def _guard_ok(guard, env, ty) -> bool:
    if guard[0] == "fits-in-native-word":
        c = env.get(guard[1])
        return isinstance(c, int) and -(1 << 63) <= c < (1 << 64)
    return False


def _const(expr, env, ty) -> int:
    if isinstance(expr, int):
        return expr
    if isinstance(expr, str):
        return env[expr]
    op, a, b = expr
    return CONST_OPS[op](_const(a, env, ty), _const(b, env, ty))


def peephole(f: SsaFunction, rules: list | None = None):
    rules = default_rules() if rules is None else rules
    for r in rules:
        check_rule(r)
    g = f.copy()
    report = PassReport("peephole")
    for _ in range(8):
        changed = False
        defs = {ins.result: ins for ins in g.instructions() if ins.result is not None}
        m = _Matcher(g, defs)
        for b in g.blocks:
            kept = []
            for ins in b.insts:
                new = None
                if not ins.dit and ins.result is not None:
                    for rule in rules:
                        env: dict = {}
                        if m.inst(rule.pattern, ins, env) and \
                                all(_guard_ok(gd, env, ins.ty) for gd in rule.guards):
                            new = _build(rule.replacement, env, ins)
                            break
                if new is None:
                    kept.append(ins)
                    continue
                changed = True
                if isinstance(new, Inst):
                    kept.append(new)
                    defs[new.result] = new
                    report.rewritten.append(ins.result)
                else:
                    g.aliases[ins.result] = new
                    del defs[ins.result]
                    report.aliased.append((ins.result, new))
            b.insts = kept
        if not changed:
            break
    return g, report


def _build(rep, env, root: Inst):
    """Replacement tree -> a new root instruction, or a value id to alias to."""
    if isinstance(rep, str):
        bound = env[rep]
        if isinstance(bound, tuple):
            return bound[1]
        raise RuleError("a constant cannot replace an instruction")
    op, *ops = rep
    mask = (1 << WIDTH.get(root.ty, 32)) - 1
    aux = {}
    if op.endswith("_imm"):
        aux["imm"] = _const(ops.pop(0), env, root.ty) & mask
    args = []
    for o in ops:
        bound = env.get(o) if isinstance(o, str) else None
        if not isinstance(bound, tuple):
            raise RuleError(f"operand {o!r} of {op} must be a value variable")
        args.append(bound[1])
    return Inst(op, args, root.result, root.ty, False, aux)
