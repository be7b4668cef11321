"""Random well-typed programs in the secret-typed dialect.

Programs are built from statements (local/global writes, memory stores,
counted loops with constant bounds, ifs on public conditions, calls) over
typed expression trees. Helpers only call earlier helpers, loops only count
up to a constant, and every memory address is masked into the first page, so
every program terminates without trapping on almost all inputs.

With ``leak_rate > 0`` some statements are replaced by one of the leak
shapes in :data:`LEAKS`; such programs only lower with ``permissive=True``.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

# leak shape -> violation class the verifier is expected to report
LEAKS = {
    "secret-branch": "secret-branch",
    "secret-load-address": "secret-address",
    "secret-store-address": "secret-address",
    "secret-operand": "secret-into-red-op",
    "secret-to-public-store": "secret-to-public-store",
    "secret-to-public-global": "secret-to-public-store",
    "secret-arg": "interface-mismatch",
    "secret-return": "interface-mismatch",
}

PUB = ("i32", "i64")
SEC = ("s32", "s64")
ADDR_MASK = 0x7FF8
MAX_DEPTH = 3
MAX_CALLS = 3
ARITH = ("add", "sub", "mul", "and", "or", "xor", "shl", "shr_u", "shr_s", "rotl", "rotr")
CMPS = ("eq", "ne", "lt_u", "lt_s", "gt_u", "gt_s", "le_u", "le_s", "ge_u", "ge_s")


@dataclass
class GenProgram:
    text: str
    seed: int
    size: int  # source instructions emitted
    secret_density: float
    leaks: list = field(default_factory=list)  # leak shapes injected
    entry: str = "$main"

    @property
    def leak_classes(self) -> set:
        return {LEAKS[k] for k in self.leaks}


def secret(ty: str) -> bool:
    return ty[0] == "s"


def width(ty: str) -> int:
    return int(ty[1:])


def pub_of(ty: str) -> str:
    return "i" + ty[1:]


def sec_of(ty: str) -> str:
    return "s" + ty[1:]


@dataclass
class _Fn:
    name: str
    params: list  # [(name, ty)]
    result: str | None
    locals: list = field(default_factory=list)
    counters: list = field(default_factory=list)
    body: list = field(default_factory=list)
    leak_return: bool = False


class _Gen:
    def __init__(self, rng: random.Random, density: float, leak_rate: float):
        self.rng = rng
        self.density = density
        self.leak_rate = leak_rate
        self.count = 0
        self.leaks: list = []
        self.helpers: list = []
        self.fn: _Fn | None = None
        self.loop_depth = 0
        self.calls = 0
        self.globals = [("$gp32", "i32"), ("$gs32", "s32"), ("$gp64", "i64"), ("$gs64", "s64")]

    # -- expressions ---------------------------------------------------------

    def n(self, k=1):
        self.count += k

    def want_secret(self) -> bool:
        return self.rng.random() < self.density

    def const(self, ty):
        self.n()
        bits = width(ty)
        r = self.rng.random()
        if r < 0.5:
            v = self.rng.randrange(0, 32)
        elif r < 0.8:
            v = self.rng.getrandbits(bits)
        else:
            v = self.rng.choice([0, 1, (1 << bits) - 1, 1 << (bits - 1)])
        return f"({pub_of(ty)}.const {v if v < (1 << (bits - 1)) else v - (1 << bits)})"

    def locals_of(self, ty, assignable=False):
        """Locals readable as ``ty`` (public locals also feed secret uses)."""
        fn = self.fn
        names = []
        for name, t in fn.params + fn.locals:
            if t == ty or (secret(ty) and t == pub_of(ty)):
                names.append(name)
        if not assignable:
            names += [c for c in fn.counters if ty in ("i32", "s32")]
        return names

    def addr(self, depth):
        self.n(2)
        return f"(i32.and {self.expr('i32', depth + 1)} (i32.const {ADDR_MASK}))"

    def expr(self, ty, depth=0):
        """An expression whose type is accepted where ``ty`` is expected."""
        rng = self.rng
        if secret(ty) and not self.want_secret():
            return self.expr(pub_of(ty), depth)
        if depth >= MAX_DEPTH:
            return self.leaf(ty)
        r = rng.random()
        if r < 0.25:
            return self.leaf(ty)
        if r < 0.55:
            op = rng.choice(ARITH)
            self.n()
            return f"({ty}.{op} {self.expr(ty, depth + 1)} {self.expr(ty, depth + 1)})"
        if r < 0.62 and width(ty) == 32:
            cty = rng.choice([ty, ty[0] + "64"])
            self.n()
            return f"({cty}.{rng.choice(CMPS)} {self.expr(cty, depth + 1)} {self.expr(cty, depth + 1)})"
        if r < 0.66 and width(ty) == 32:
            self.n()
            return f"({ty}.eqz {self.expr(ty, depth + 1)})"
        if r < 0.72:
            self.n()
            if width(ty) == 32:
                return f"({ty}.wrap_{ty[0]}64 {self.expr(ty[0] + '64', depth + 1)})"
            return f"({ty}.extend_{ty[0]}32_{rng.choice('us')} {self.expr(ty[0] + '32', depth + 1)})"
        if r < 0.80:
            return self.load(ty, depth)
        if r < 0.86:
            self.n()
            cond = self.expr("i32", depth + 1)
            if secret(ty) and rng.random() < 0.6:
                cond = self.expr("s32", depth + 1)
                return f"({ty}.sselect {self.expr(ty, depth + 1)} {self.expr(ty, depth + 1)} {cond})"
            return f"(select {self.expr(ty, depth + 1)} {self.expr(ty, depth + 1)} {cond})"
        if r < 0.90 and not secret(ty):
            op = rng.choice(("div_u", "rem_u", "div_s", "rem_s"))
            self.n(3)
            return f"({ty}.{op} {self.expr(ty, depth + 1)} ({ty}.or {self.expr(ty, depth + 1)} ({ty}.const 1)))"
        if r < 0.95:
            call = self.call_expr(ty, depth)
            if call is not None:
                return call
        return self.leaf(ty)

    def leaf(self, ty):
        rng = self.rng
        choices = ["const"]
        if self.locals_of(ty):
            choices += ["local"] * 3
        choices.append("global")
        pick = rng.choice(choices)
        if pick == "local":
            self.n()
            return f"(local.get {rng.choice(self.locals_of(ty))})"
        if pick == "global":
            gs = [g for g, t in self.globals if t == ty or (secret(ty) and t == pub_of(ty))]
            self.n()
            return f"(global.get {rng.choice(gs)})"
        return self.const(ty)

    def load(self, ty, depth):
        rng = self.rng
        w = width(ty)
        if secret(ty):
            mem = "$sec" if rng.random() < 0.8 else "$pub"
        else:
            mem = "$pub"
        kind = rng.choice(["load", "load8_u", "load8_s", "load16_u", "load16_s"]
                          + (["load32_u", "load32_s"] if w == 64 else []))
        off = rng.choice([0, 0, 4, 8, 16, 64])
        self.n()
        imm = f" offset={off}" if off else ""
        return f"({ty}.{kind} {mem}{imm} {self.addr(depth)})"

    def can_call(self) -> bool:
        # no calls inside loops and a few call sites per function keep the
        # dynamic call tree small
        return self.loop_depth == 0 and self.calls < MAX_CALLS

    def call_expr(self, ty, depth):
        if not self.can_call():
            return None
        cands = [h for h in self.helpers if h.result is not None
                 and (h.result == ty or (secret(ty) and h.result == pub_of(ty)))]
        if not cands:
            return None
        h = self.rng.choice(cands)
        self.n()
        self.calls += 1
        args = " ".join(self.expr(t, depth + 1) for _, t in h.params)
        return f"(call {h.name} {args})".replace(" )", ")")

    # -- statements ----------------------------------------------------------

    def stmt(self, budget_left):
        rng = self.rng
        if self.leak_rate and rng.random() < self.leak_rate:
            return self.leak()
        r = rng.random()
        if r < 0.35:
            targets = self.fn.params + self.fn.locals
            name, ty = rng.choice(targets)
            self.n()
            return f"(local.set {name} {self.expr(ty)})"
        if r < 0.45:
            name, ty = rng.choice(self.globals)
            self.n()
            return f"(global.set {name} {self.expr(ty)})"
        if r < 0.65:
            ty = rng.choice(PUB + SEC)
            mem = "$sec" if secret(ty) or rng.random() < 0.3 else "$pub"
            kind = rng.choice(["store", "store8", "store16"] + (["store32"] if width(ty) == 64 else []))
            self.n()
            return f"({ty}.{kind} {mem} {self.addr(0)} {self.expr(ty)})"
        if r < 0.75 and budget_left > 8:
            self.n()
            then = self.stmts(rng.randint(1, 3))
            els = self.stmts(rng.randint(0, 2))
            out = f"(if {self.expr('i32')} (then {then})"
            return out + (f" (else {els}))" if els else ")")
        if r < 0.85 and budget_left > 10 and self.loop_depth < 2:
            return self.loop()
        if r < 0.93:
            cands = list(self.helpers) if self.can_call() else []
            if cands:
                h = rng.choice(cands)
                self.n()
                self.calls += 1
                args = " ".join(self.expr(t, 1) for _, t in h.params)
                call = f"(call {h.name} {args})".replace(" )", ")")
                if h.result is not None:
                    self.n()
                    return f"(drop {call})"
                return call
        name, ty = rng.choice(self.fn.params + self.fn.locals)
        self.n()
        return f"(local.set {name} {self.expr(ty)})"

    def stmts(self, k):
        return " ".join(self.stmt(8) for _ in range(k))

    def loop(self):
        rng = self.rng
        c = f"$c{len(self.fn.counters)}"
        self.fn.counters.append(c)
        bound = rng.randint(1, 4)
        self.loop_depth += 1
        body = self.stmts(rng.randint(1, 4))
        self.loop_depth -= 1
        self.n(12)
        return (f"(local.set {c} (i32.const 0)) (block (loop "
                f"(br_if 1 (i32.ge_u (local.get {c}) (i32.const {bound}))) {body} "
                f"(local.set {c} (i32.add (local.get {c}) (i32.const 1))) (br 0)))")

    def sec_expr(self, ty="s32"):
        """An expression that really carries a secret (a secret global is mixed in)."""
        saved = self.density
        self.density = 1.0
        self.n(2)
        e = f"({ty}.xor {self.expr(ty, 1)} (global.get $gs{ty[1:]}))"
        self.density = saved
        return e

    def leak(self):
        rng = self.rng
        kinds = list(LEAKS)
        if not any(t == "i32" for _, t in self.fn.params) or not self.helpers:
            kinds.remove("secret-arg")
        if self.fn.result != "i32" or self.fn.leak_return:
            kinds.remove("secret-return")
        kind = rng.choice(kinds)
        self.leaks.append(kind)
        self.n(4)
        if kind == "secret-branch":
            return f"(if (s32.ne {self.sec_expr()} (i32.const 0)) (then (global.set $gp32 (i32.const 1))))"
        if kind == "secret-load-address":
            return (f"(global.set $gs32 (s32.load $sec (s32.and {self.sec_expr()} "
                    f"(s32.const {ADDR_MASK}))))")
        if kind == "secret-store-address":
            return f"(s32.store $sec (s32.and {self.sec_expr()} (s32.const {ADDR_MASK})) (i32.const 7))"
        if kind == "secret-operand":
            op = rng.choice(("div_u", "rem_u"))
            return f"(global.set $gs32 (i32.{op} {self.sec_expr()} (i32.const 3)))"
        if kind == "secret-to-public-store":
            return f"(i32.store $pub {self.addr(0)} {self.sec_expr()})"
        if kind == "secret-to-public-global":
            return f"(global.set $gp32 {self.sec_expr()})"
        if kind == "secret-arg":
            cands = [h for h in self.helpers if any(t == "i32" for _, t in h.params)]
            if not cands:
                self.leaks[-1] = "secret-to-public-global"
                return f"(global.set $gp32 {self.sec_expr()})"
            h = rng.choice(cands)
            args = []
            hit = False
            for _, t in h.params:
                if t == "i32" and not hit:
                    args.append(self.sec_expr())
                    hit = True
                else:
                    args.append(self.expr(t, 1))
            call = f"(call {h.name} {' '.join(args)})"
            return f"(drop {call})" if h.result is not None else call
        # secret-return: the function's final value becomes secret
        self.fn.leak_return = True
        return "(nop)"

    # -- functions -----------------------------------------------------------

    def function(self, name, params, result, budget):
        fn = _Fn(name, params, result)
        rng = self.rng
        for k in range(rng.randint(1, 4)):
            fn.locals.append((f"$l{k}", rng.choice(PUB + SEC)))
        self.fn = fn
        self.calls = 0
        start = self.count
        while self.count - start < budget:
            fn.body.append(self.stmt(budget - (self.count - start)))
        if result is not None:
            fn.body.append(self.sec_expr() if fn.leak_return else self.expr(result))
        self.fn = None
        return fn


def _format_fn(fn: _Fn) -> str:
    head = [f"(func {fn.name} untrusted"]
    head += [f"(param {n} {t})" for n, t in fn.params]
    if fn.result:
        head.append(f"(result {fn.result})")
    lines = [" ".join(head)]
    decl = [f"(local {n} {t})" for n, t in fn.locals] + [f"(local {c} i32)" for c in fn.counters]
    if decl:
        lines.append("  " + " ".join(decl))
    lines += ["  " + s for s in fn.body]
    return "\n".join(lines) + ")"


def gen(seed: int, size: int = 50, secret_density: float = 0.5, leak_rate: float = 0.0,
        functions: int | None = None) -> GenProgram:
    """Generate a module of roughly ``size`` source instructions.

    ``functions`` defaults to one helper per ~150 instructions plus ``$main``.
    """
    rng = random.Random(seed)
    g = _Gen(rng, secret_density, leak_rate)
    nfn = functions if functions is not None else max(1, min(1 + size // 150, 256))
    share = max(4, size // nfn)
    out = []
    for k in range(nfn - 1):
        params = [(f"$p{j}", rng.choice(PUB + SEC)) for j in range(rng.randint(0, 3))]
        result = rng.choice([None, "i32", "s32", "i64", "s64"])
        h = g.function(f"$h{k}", params, result, share)
        g.helpers.append(h)
        out.append(h)
        if len(g.helpers) > 8:
            g.helpers.pop(0)  # keep call fan-out bounded
    main_params = [("$a", "i32"), ("$s", "s32"), ("$t", "s64"), ("$b", "i32")]
    out.append(g.function("$main", main_params, rng.choice(["i32", "s32"]), max(4, size - g.count)))
    text = "\n".join([
        "(module",
        "  (memory $pub 1)",
        "  (memory $sec secret 1)",
        "  (global $gp32 (mut i32) (i32.const 3))",
        "  (global $gs32 (mut s32) (s32.const 5))",
        "  (global $gp64 (mut i64) (i64.const 7))",
        "  (global $gs64 (mut s64) (s64.const 11))",
        *(_format_fn(f) for f in out),
        ")",
    ])
    return GenProgram(text, seed, g.count, secret_density, list(g.leaks))
