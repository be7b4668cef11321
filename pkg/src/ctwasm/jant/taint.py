"""Taint propagation over one function's machine IR.

Sources are secret parameters, loads from secret globals and memories,
secret call results and stack bytes that were not provably written with a
public value on every path. Taint flows through every micro-op output and
is monotone, so the fixpoint loop terminates.

Stack state is tracked as the set of *clean* bytes (offsets relative to the
entry stack pointer). Joins intersect, which is the conservative merge; an
unwritten byte is never clean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import CtwError
from .access import Access, Matcher
from .view import FunctionView, vkey

NON_DATA = ("const", "ram", "rel", "iop")


class AnalysisError(CtwError):
    pass


@dataclass
class TaintState:
    tainted: set = field(default_factory=set)
    accesses: dict = field(default_factory=dict)  # (pos, op index) -> Access
    clean_in: dict = field(default_factory=dict)  # block start pos -> frozenset of clean stack bytes
    preempted: set = field(default_factory=set)  # MULTIEQUAL outputs tainted by a pcode-relative branch
    call_targets: dict = field(default_factory=dict)  # pos -> resolved address or None
    rounds: int = 0

    def is_tainted(self, v) -> bool:
        return v.space not in NON_DATA and (v.space, v.name) in self.tainted


def resolve_target(view: FunctionView, v, depth: int = 0):
    """Single static destination of a branch/call target varnode, or None."""
    if depth > 32:
        return None
    if v.space in ("const", "ram") and isinstance(v.name, int):
        return v.name
    op = view.def_op(v)
    if op is None:
        return None
    if op.opcode == "COPY":
        return resolve_target(view, op.inputs[0], depth + 1)
    if op.opcode == "LOAD" and v.size == 8:
        a = op.inputs[0]
        if a.space == "const" and a.name in view.program.rodata:
            return view.program.rodata[a.name]
    return None


def basic_blocks(view: FunctionView, extra_succ=None):
    """Return (starts, block_of, succ_blocks, pred_blocks) over positions."""
    n = len(view.insts)
    succ = [list(s) for s in view.succ]
    for pos, tgts in (extra_succ or {}).items():
        succ[pos].extend(tgts)
    leaders = {0} if n else set()
    for i in range(n):
        if len(succ[i]) != 1 or succ[i][0] != i + 1:
            leaders.update(succ[i])
            if i + 1 < n:
                leaders.add(i + 1)
    starts = sorted(leaders)
    block_of = {}
    bounds = []
    for j, s in enumerate(starts):
        e = starts[j + 1] if j + 1 < len(starts) else n
        bounds.append((s, e))
        for p in range(s, e):
            block_of[p] = s
    bsucc = {s: sorted({block_of[t] for t in succ[e - 1]}) for s, e in bounds}
    bpred = {s: [] for s in starts}
    for s, ts in bsucc.items():
        for t in ts:
            bpred[t].append(s)
    return bounds, block_of, bsucc, bpred


def propagate_taint(view: FunctionView, matcher: Matcher | None = None, initial=None,
                    extra_succ=None) -> TaintState:
    matcher = matcher or Matcher(view)
    manifest = view.program.manifest
    sig = manifest.functions[view.func.index]
    st = TaintState(set(initial or ()))
    for i, sec in enumerate(sig.paramSecrecy):
        if sec:
            st.tainted.add(("reg", f"x{i + 1}"))
    entries = {f.entry: f.index for f in view.program.functions}

    call_secret = {}
    for pos, mi in enumerate(view.insts):
        for k, op in enumerate(mi.ops):
            if op.opcode in ("LOAD", "STORE"):
                size = op.output.size if op.opcode == "LOAD" else op.inputs[1].size
                st.accesses[(pos, k)] = matcher.classify(op.inputs[0], size, op.opcode == "LOAD")
            elif op.opcode in ("CALL", "CALLIND"):
                tgt = resolve_target(view, op.inputs[0])
                st.call_targets[pos] = tgt
                idx = entries.get(tgt)
                secret = True if idx is None else any(manifest.functions[idx].returnSecrecy)
                call_secret[pos] = secret

    bounds, _, bsucc, bpred = basic_blocks(view, extra_succ)
    reachable = set()
    work = [0] if bounds else []
    while work:
        b = work.pop()
        if b not in reachable:
            reachable.add(b)
            work.extend(bsucc[b])
    clean_out: dict = {}
    limit = sum(len(op.inputs) + 1 for mi in view.insts for op in mi.ops) + 2
    changed = True
    while changed:
        changed = False
        st.rounds += 1
        if st.rounds > limit:
            raise AnalysisError("taint propagation did not converge")
        for s, e in bounds:
            if s == 0 or s not in reachable:
                clean = set()
            else:
                ins = [clean_out[p] for p in bpred[s] if p in clean_out]
                clean = set(ins[0]).intersection(*ins[1:]) if ins else set()
                if not ins:
                    # no analysed predecessor yet: optimistic top, refined next round
                    clean = None
            st.clean_in[s] = frozenset(clean) if clean is not None else None
            for pos in range(s, e):
                mi = view.insts[pos]
                preempt = False
                for k, op in enumerate(mi.ops):
                    name = op.opcode
                    t = False
                    if name == "LOAD":
                        acc = st.accesses[(pos, k)]
                        t = st.is_tainted(op.inputs[0]) or _load_secret(acc, manifest, clean, op.output.size)
                    elif name == "STORE":
                        acc = st.accesses[(pos, k)]
                        if acc.kind == "stack-slot" and clean is not None:
                            b = range(acc.offset, acc.offset + op.inputs[1].size)
                            if st.is_tainted(op.inputs[1]) or st.is_tainted(op.inputs[0]):
                                clean.difference_update(b)
                            else:
                                clean.update(b)
                        continue
                    elif name == "INDIRECT":
                        t = call_secret.get(pos, True)
                    elif name == "CBRANCH":
                        if op.inputs[0].space == "rel" and st.is_tainted(op.inputs[1]):
                            preempt = True
                        continue
                    elif op.output is None:
                        continue
                    else:
                        t = any(st.is_tainted(v) for v in op.inputs)
                    if name == "MULTIEQUAL" and preempt:
                        t = True
                        st.preempted.add(vkey(op.output))
                    if t and vkey(op.output) not in st.tainted:
                        st.tainted.add(vkey(op.output))
                        changed = True
                if preempt:
                    for op in mi.ops:
                        if op.opcode == "MULTIEQUAL" and vkey(op.output) not in st.tainted:
                            st.tainted.add(vkey(op.output))
                            st.preempted.add(vkey(op.output))
                            changed = True
            new = frozenset(clean) if clean is not None else None
            if new is not None and clean_out.get(s) != new:
                clean_out[s] = new
                changed = True
    return st


def _load_secret(acc: Access, manifest, clean, size) -> bool:
    k = acc.kind
    if k == "global":
        return bool(manifest.globalsSecrecy[acc.index])
    if k == "linear-memory":
        return bool(manifest.memories[acc.index].secret)
    if k in ("memory-base", "constant-addr"):
        return False
    if k == "stack-slot":
        if clean is None:
            return False  # optimistic until a predecessor is analysed
        return not all(b in clean for b in range(acc.offset, acc.offset + size))
    return True
