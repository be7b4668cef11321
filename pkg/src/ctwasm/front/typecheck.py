"""Secrecy type checking.

Typing is a single pass over each function body with an explicit operand
stack, so every instruction is visited a constant number of times. Public
integers are implicitly accepted wherever a secret integer of the same width
is expected; nothing ever flows from secret to public without ``declassify``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .ast import INT_CMPS, LOADS, STORES, Instr, SourceFunction, SourceModule
from .types import F32, F64, I32, I64, S32, SecrecyType, parse_type

RULES = {
    "secret-branch": "secret value used as a branch condition",
    "secret-address": "secret value used as a memory index",
    "secret-float": "secret value used as a float operand",
    "secret-select-cond": "secret value used as a select condition (use sselect)",
    "secret-operand": "secret value used by a public-only operation",
    "secret-memory-type": "public-typed load from a secret memory",
    "secret-to-public-store": "secret value stored into a public memory",
    "secret-to-public-global": "secret value written to a public global",
    "secret-to-public-local": "secret value written to a public local",
    "secret-to-public-arg": "secret value passed as a public argument",
    "secret-to-public-return": "secret value returned as public",
    "secret-to-public-result": "secret value produced as a public block result",
    "declassify-untrusted": "declassify inside an untrusted function",
    "classify-untrusted": "classify inside an untrusted function",
    "untrusted-calls-trusted": "untrusted function calls a trusted function",
    "type-mismatch": "operand width or class mismatch",
    "stack-underflow": "instruction pops more values than available",
    "unknown-name": "reference does not resolve",
    "duplicate-name": "name declared twice",
    "immutable-global": "write to an immutable global",
    "bad-branch-depth": "branch depth exceeds the enclosing labels",
    "data-out-of-bounds": "data segment exceeds its memory",
}


@dataclass
class TypeViolation:
    rule: str
    message: str
    function: str
    path: str
    line: int = 0
    col: int = 0

    def format(self, filename: str = "<input>") -> str:
        return f"{filename}:{self.line}:{self.col}: {self.rule}: {self.message} (in {self.path})"


@dataclass
class TypedModule:
    module: SourceModule
    violations: list = field(default_factory=list)
    visits: int = 0
    instructions: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass
class _Label:
    result: SecrecyType | None
    is_loop: bool


class _FuncChecker:
    def __init__(self, mod: SourceModule, fn: SourceFunction, out: TypedModule):
        self.mod = mod
        self.fn = fn
        self.out = out
        self.locals = list(fn.params) + list(fn.locals)
        self.labels: list[_Label] = []

    def violate(self, rule, ins, path, detail=None):
        msg = RULES[rule] if detail is None else f"{RULES[rule]}: {detail}"
        self.out.violations.append(
            TypeViolation(rule, msg, self.fn.name, path, ins.line, ins.col)
        )

    def flow(self, expected, actual, rule, ins, path):
        """Check ``actual`` may be used where ``expected`` is required."""
        if actual is None or expected is None:
            return
        if actual.cls != expected.cls or actual.width != expected.width:
            if actual.secret and expected.is_float:
                self.violate("secret-float", ins, path)
            else:
                self.violate("type-mismatch", ins, path, f"expected {expected}, got {actual}")
            return
        if actual.secret and not expected.secret:
            self.violate(rule, ins, path)

    def local_type(self, ins, path):
        ref = ins.imm["ref"]
        if isinstance(ref, int):
            if 0 <= ref < len(self.locals):
                return self.locals[ref][1]
        else:
            for name, ty in self.locals:
                if name == ref:
                    return ty
        self.violate("unknown-name", ins, path, f"local {ref}")
        return None

    # -- sequences ----------------------------------------------------------

    def check_seq(self, seq, path, result):
        stack: list = []
        unreachable = [False]
        for i, ins in enumerate(seq):
            self.check(ins, stack, f"{path}/{i}:{ins.op}", unreachable)
        self.end_of_seq(stack, result, seq, path, unreachable[0])

    def end_of_seq(self, stack, result, seq, path, unreachable):
        anchor = seq[-1] if seq else Instr("nop", line=self.fn.line, col=self.fn.col)
        if result is None:
            if stack and not unreachable:
                self.violate("type-mismatch", anchor, path, "values left on the stack")
            return
        if not stack:
            if not unreachable:
                self.violate("stack-underflow", anchor, path, f"missing {result} result")
            return
        if len(stack) > 1 and not unreachable:
            self.violate("type-mismatch", anchor, path, "values left on the stack")
        rule = "secret-to-public-return" if path.count("/") == 0 else "secret-to-public-result"
        self.flow(result, stack[-1], rule, anchor, path)

    def pop(self, stack, ins, path, unreachable):
        if stack:
            return stack.pop()
        if not unreachable[0]:
            self.violate("stack-underflow", ins, path)
        return None

    # -- single instruction -------------------------------------------------

    def check(self, ins: Instr, stack: list, path: str, unreachable: list):
        self.out.visits += 1
        self.out.instructions += 1
        op = ins.op
        if op in ("block", "loop", "if"):
            if op == "if":
                for j, a in enumerate(ins.args):
                    self.check(a, stack, f"{path}/{j}:{a.op}", unreachable)
                cond = self.pop(stack, ins, path, unreachable)
                ins.in_types = (cond,)
                if cond is not None:
                    if cond.secret:
                        self.violate("secret-branch", ins, path)
                    elif cond != I32:
                        self.violate("type-mismatch", ins, path, "if condition must be i32")
            self.labels.append(_Label(ins.result, op == "loop"))
            self.check_seq(ins.body, path + "/then" if op == "if" else path, ins.result)
            if op == "if":
                if ins.orelse is not None:
                    self.check_seq(ins.orelse, path + "/else", ins.result)
                elif ins.result is not None:
                    self.violate("type-mismatch", ins, path, "if with a result needs an else")
            self.labels.pop()
            ins.out_type = ins.result
            if ins.result is not None:
                stack.append(ins.result)
            return

        for j, a in enumerate(ins.args):
            self.check(a, stack, f"{path}/{j}:{a.op}", unreachable)

        if op == "nop":
            return
        if op == "drop":
            ins.in_types = (self.pop(stack, ins, path, unreachable),)
            return
        if op == "local.get":
            ty = self.local_type(ins, path)
            ins.out_type = ty
            stack.append(ty)
            return
        if op in ("local.set", "local.tee"):
            ty = self.local_type(ins, path)
            val = self.pop(stack, ins, path, unreachable)
            ins.in_types = (val,)
            self.flow(ty, val, "secret-to-public-local", ins, path)
            if op == "local.tee":
                ins.out_type = ty
                stack.append(ty)
            return
        if op in ("global.get", "global.set"):
            gi = self.mod.global_index(ins.imm["ref"])
            if gi is None:
                self.violate("unknown-name", ins, path, f"global {ins.imm['ref']}")
                g = None
            else:
                g = self.mod.globals[gi]
            if op == "global.get":
                ins.out_type = g.type if g else None
                stack.append(ins.out_type)
            else:
                val = self.pop(stack, ins, path, unreachable)
                ins.in_types = (val,)
                if g is not None:
                    if not g.mutable:
                        self.violate("immutable-global", ins, path)
                    self.flow(g.type, val, "secret-to-public-global", ins, path)
            return
        if op == "call":
            fi = self.mod.func_index(ins.imm["ref"])
            if fi is None:
                self.violate("unknown-name", ins, path, f"function {ins.imm['ref']}")
                stack.clear()
                unreachable[0] = True
                return
            callee = self.mod.functions[fi]
            if not self.fn.trusted and callee.trusted:
                self.violate("untrusted-calls-trusted", ins, path, f"calls {callee.name}")
            args = [self.pop(stack, ins, path, unreachable) for _ in callee.params][::-1]
            ins.in_types = tuple(args)
            for pty, aty in zip(callee.param_types, args):
                self.flow(pty, aty, "secret-to-public-arg", ins, path)
            if callee.results:
                ins.out_type = callee.results[0]
                stack.append(ins.out_type)
            return
        if op in ("br", "br_if"):
            depth = ins.imm["depth"]
            label = None
            if isinstance(depth, int) and depth < len(self.labels):
                label = self.labels[-1 - depth]
            else:
                self.violate("bad-branch-depth", ins, path, str(depth))
            if op == "br_if":
                cond = self.pop(stack, ins, path, unreachable)
                ins.in_types = (cond,)
                if cond is not None:
                    if cond.secret:
                        self.violate("secret-branch", ins, path)
                    elif cond != I32:
                        self.violate("type-mismatch", ins, path, "br_if condition must be i32")
                if label is not None and not label.is_loop and label.result is not None:
                    self.violate("type-mismatch", ins, path, "br_if with a value is not supported")
                return
            if label is not None and not label.is_loop and label.result is not None:
                val = self.pop(stack, ins, path, unreachable)
                ins.in_types = (val,)
                self.flow(label.result, val, "secret-to-public-result", ins, path)
            stack.clear()
            unreachable[0] = True
            return
        if op == "return":
            if self.fn.results:
                val = self.pop(stack, ins, path, unreachable)
                ins.in_types = (val,)
                self.flow(self.fn.results[0], val, "secret-to-public-return", ins, path)
            stack.clear()
            unreachable[0] = True
            return
        if op == "select":
            c = self.pop(stack, ins, path, unreachable)
            b = self.pop(stack, ins, path, unreachable)
            a = self.pop(stack, ins, path, unreachable)
            ins.in_types = (a, b, c)
            if c is not None and c.secret:
                self.violate("secret-select-cond", ins, path)
            elif c is not None and c != I32:
                self.violate("type-mismatch", ins, path, "select condition must be i32")
            out = a or b
            if a is not None and b is not None:
                if a.width != b.width or a.cls != b.cls:
                    self.violate("type-mismatch", ins, path, "select arms differ")
                out = a.as_secret() if (a.secret or b.secret) else a
            ins.out_type = out
            stack.append(out)
            return

        ty = ins.optype
        base = ins.base
        if base == "sselect":
            c = self.pop(stack, ins, path, unreachable)
            b = self.pop(stack, ins, path, unreachable)
            a = self.pop(stack, ins, path, unreachable)
            ins.in_types = (a, b, c)
            self.flow(S32, c, "type-mismatch", ins, path)
            self.flow(ty, a, "type-mismatch", ins, path)
            self.flow(ty, b, "type-mismatch", ins, path)
            ins.out_type = ty
            stack.append(ty)
            return
        if base == "const":
            ins.out_type = ty
            stack.append(ty)
            return
        if base in LOADS:
            mi = self.mod.memory_index(ins.imm["memory"])
            addr = self.pop(stack, ins, path, unreachable)
            ins.in_types = (addr,)
            self.flow(I32, addr, "secret-address", ins, path)
            if mi is None:
                self.violate("unknown-name", ins, path, f"memory {ins.imm['memory']}")
            elif self.mod.memories[mi].secret and not ty.secret:
                self.violate("secret-memory-type", ins, path)
            ins.out_type = ty
            stack.append(ty)
            return
        if base in STORES:
            mi = self.mod.memory_index(ins.imm["memory"])
            val = self.pop(stack, ins, path, unreachable)
            addr = self.pop(stack, ins, path, unreachable)
            ins.in_types = (addr, val)
            self.flow(I32, addr, "secret-address", ins, path)
            mem = self.mod.memories[mi] if mi is not None else None
            if mi is None:
                self.violate("unknown-name", ins, path, f"memory {ins.imm['memory']}")
            if mem is not None and not mem.secret and (ty.secret or (val is not None and val.secret)):
                self.violate("secret-to-public-store", ins, path)
            else:
                self.flow(ty, val, "type-mismatch", ins, path)
            return
        if base == "declassify" or base == "classify":
            if not self.fn.trusted:
                self.violate(f"{base}-untrusted", ins, path)
            val = self.pop(stack, ins, path, unreachable)
            ins.in_types = (val,)
            if val is not None and (val.width != ty.width or val.is_float):
                self.violate("type-mismatch", ins, path)
            ins.out_type = ty
            stack.append(ty)
            return
        if ty.is_float:
            self._float_op(ins, ty, stack, path, unreachable)
            return
        if base.startswith("trunc_"):
            src = F32 if "f32" in base else F64
            val = self.pop(stack, ins, path, unreachable)
            ins.in_types = (val,)
            self.flow(src, val, "secret-float", ins, path)
            ins.out_type = ty
            stack.append(ty)
            return
        if base.startswith("wrap_") or base.startswith("extend_"):
            src = parse_type(("s" if ty.secret else "i") + ("64" if ty.width == 32 else "32"))
            val = self.pop(stack, ins, path, unreachable)
            ins.in_types = (val,)
            self.flow(src, val, "secret-operand", ins, path)
            ins.out_type = ty
            stack.append(ty)
            return
        if base == "eqz":
            val = self.pop(stack, ins, path, unreachable)
            ins.in_types = (val,)
            self.flow(ty, val, "secret-operand", ins, path)
            ins.out_type = S32 if ty.secret else I32
            stack.append(ins.out_type)
            return
        b = self.pop(stack, ins, path, unreachable)
        a = self.pop(stack, ins, path, unreachable)
        ins.in_types = (a, b)
        self.flow(ty, a, "secret-operand", ins, path)
        self.flow(ty, b, "secret-operand", ins, path)
        if base in INT_CMPS:
            ins.out_type = S32 if ty.secret else I32
        else:
            ins.out_type = ty
        stack.append(ins.out_type)

    def _float_op(self, ins, ty, stack, path, unreachable):
        base = ins.base
        if base.startswith("convert_"):
            src = I32 if "i32" in base else I64
            val = self.pop(stack, ins, path, unreachable)
            ins.in_types = (val,)
            if val is not None and val.secret:
                self.violate("secret-float", ins, path)
            else:
                self.flow(src, val, "secret-float", ins, path)
        else:
            b = self.pop(stack, ins, path, unreachable)
            a = self.pop(stack, ins, path, unreachable)
            ins.in_types = (a, b)
            for v in (a, b):
                if v is not None and v.secret:
                    self.violate("secret-float", ins, path)
                else:
                    self.flow(ty, v, "secret-float", ins, path)
        ins.out_type = ty
        stack.append(ty)


def _check_names(mod: SourceModule, out: TypedModule):
    for kind, items in (("function", mod.functions), ("global", mod.globals), ("memory", mod.memories)):
        seen = set()
        for it in items:
            if it.name in seen:
                out.violations.append(TypeViolation(
                    "duplicate-name", f"{RULES['duplicate-name']}: {kind} {it.name}",
                    it.name, it.name, it.line, it.col))
            seen.add(it.name)
    for fn in mod.functions:
        seen = set()
        for name, _ in list(fn.params) + list(fn.locals):
            if name is not None and name in seen:
                out.violations.append(TypeViolation(
                    "duplicate-name", f"{RULES['duplicate-name']}: local {name}",
                    fn.name, fn.name, fn.line, fn.col))
            seen.add(name)


def typecheck(module: SourceModule) -> TypedModule:
    """Assign secrecy types to every instruction and collect rule violations.

    The returned module is annotated in place (``in_types``/``out_type`` on
    every :class:`Instr`). ``TypedModule.ok`` is false when any violation was
    found; each violation names the broken rule and the instruction path.
    """
    out = TypedModule(module)
    _check_names(module, out)
    for g in module.globals:
        init_ty = g.init.optype
        if init_ty is None or init_ty.width != g.type.width or init_ty.cls != g.type.cls:
            out.violations.append(TypeViolation(
                "type-mismatch", f"{RULES['type-mismatch']}: initializer of {g.name}",
                g.name, g.name, g.line, g.col))
        g.init.out_type = init_ty
    for d in module.data:
        mi = module.memory_index(d.memory)
        if mi is None:
            out.violations.append(TypeViolation(
                "unknown-name", f"{RULES['unknown-name']}: memory {d.memory}", "<data>",
                "<data>", d.line, d.col))
        elif d.offset + len(d.data) > module.memories[mi].pages * 65536:
            out.violations.append(TypeViolation(
                "data-out-of-bounds", RULES["data-out-of-bounds"], "<data>", "<data>", d.line, d.col))
    for fn in module.functions:
        checker = _FuncChecker(module, fn, out)
        checker.check_seq(fn.body, fn.name, fn.results[0] if fn.results else None)
    return out
