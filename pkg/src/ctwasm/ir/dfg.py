"""Dataflow graph over φ-form SSA with red/white node coloring.

A node is red when feeding it a secret could leak: non-DIT operations,
memory addresses, public store values, public call arguments, public return
values and branch conditions. A function is constant-time iff no secret
input reaches a red node.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from ..errors import IrError
from ..manifest import Manifest
from .core import Brnz, Return, SsaFunction
from .phi import params_to_phi

RED, WHITE = "red", "white"


@dataclass
class Node:
    id: int
    kind: str  # input, op, phi, const, load-addr, store-addr, store-val, call-param, branch, return
    color: str
    label: str
    value: int | None = None  # SSA value produced, for value-carrying nodes
    source: str | None = None  # for inputs: param, load, global, call, stack


@dataclass
class DataflowGraph:
    nodes: dict = field(default_factory=dict)
    succ: dict = field(default_factory=dict)
    value_node: dict = field(default_factory=dict)

    def add(self, kind, color, label, value=None, source=None) -> int:
        nid = len(self.nodes)
        self.nodes[nid] = Node(nid, kind, color, label, value, source)
        self.succ[nid] = []
        if value is not None:
            self.value_node[value] = nid
        return nid

    def edge(self, a: int, b: int):
        self.succ[a].append(b)

    @property
    def inputs(self) -> list:
        return [n.id for n in self.nodes.values() if n.kind == "input"]

    def red(self) -> set:
        return {n.id for n in self.nodes.values() if n.color == RED}

    def edges(self):
        for a, bs in self.succ.items():
            for b in bs:
                yield a, b


def build_dfg(f: SsaFunction, manifest: Manifest | None = None, func_index: int | None = None,
              callee_secrecy=None) -> DataflowGraph:
    """Build the colored DFG of ``f``.

    Secrecy facts come from ``manifest``: memory/global secrecy for store
    values, callee parameter secrecy for call arguments, and the function's
    own return secrecy (taken from ``f.result_secret``).
    ``callee_secrecy`` may override the lookup with ``callee -> [bool]``.
    """
    if any(b.params for b in f.blocks if b.id != f.entry):
        f = params_to_phi(f)
    manifest = manifest or Manifest()
    g = DataflowGraph()
    pending = []  # (value used, consumer node)

    def use(v, nid):
        pending.append((f.resolve(v), nid))

    def mem_secret(mid):
        if not 0 <= mid < len(manifest.memories):
            raise IrError(f"unknown memory id {mid}")
        return manifest.memories[mid].secret

    def global_secret(gid):
        if not 0 <= gid < len(manifest.globalsSecrecy):
            raise IrError(f"unknown global id {gid}")
        return manifest.globalsSecrecy[gid]

    def param_secrecy(callee):
        if callee_secrecy is not None:
            return list(callee_secrecy(callee))
        if isinstance(callee, int) and 0 <= callee < len(manifest.functions):
            return list(manifest.functions[callee].paramSecrecy)
        raise IrError(f"unknown callee {callee!r}")

    entry = f.block(f.entry)
    for i, (v, _) in enumerate(entry.params):
        g.add("input", WHITE, f"param v{v}", v, "param")

    for b in f.blocks:
        for ins in b.insts:
            op, r = ins.opcode, ins.result
            if op == "iconst":
                g.add("const", WHITE, f"iconst {ins.aux['imm']}", r)
            elif op == "phi":
                nid = g.add("phi", WHITE, "phi", r)
                for a in ins.args:
                    use(a, nid)
            elif op == "load":
                nid = g.add("load-addr", RED, f"load mem{ins.aux['mem']}")
                use(ins.args[0], nid)
                mem_secret(ins.aux["mem"])
                g.add("input", WHITE, f"load v{r}", r, "load")
            elif op == "global_load":
                global_secret(ins.aux["global"])
                g.add("input", WHITE, f"global_load v{r}", r, "global")
            elif op == "stack_load":
                g.add("input", WHITE, f"stack_load v{r}", r, "stack")
            elif op == "store":
                nid = g.add("store-addr", RED, f"store-addr mem{ins.aux['mem']}")
                use(ins.args[0], nid)
                col = WHITE if mem_secret(ins.aux["mem"]) else RED
                nid = g.add("store-val", col, f"store-val mem{ins.aux['mem']}")
                use(ins.args[1], nid)
            elif op == "global_store":
                col = WHITE if global_secret(ins.aux["global"]) else RED
                nid = g.add("store-val", col, f"store-val g{ins.aux['global']}")
                use(ins.args[0], nid)
            elif op == "stack_store":
                nid = g.add("store-val", WHITE, f"store-val ss{ins.aux['slot']}")
                use(ins.args[0], nid)
            elif op == "call":
                sec = param_secrecy(ins.aux["callee"])
                for i, a in enumerate(ins.args):
                    col = WHITE if i < len(sec) and sec[i] else RED
                    nid = g.add("call-param", col, f"call-param {i}")
                    use(a, nid)
                if r is not None:
                    g.add("input", WHITE, f"call v{r}", r, "call")
            else:
                col = WHITE if ins.dit else RED
                nid = g.add("op", col, ins.name, r)
                for a in ins.args:
                    use(a, nid)
        t = b.term
        if isinstance(t, Brnz):
            nid = g.add("branch", RED, "brnz")
            use(t.cond, nid)
        elif isinstance(t, Return):
            for i, v in enumerate(t.values):
                secret = i < len(f.result_secret) and f.result_secret[i]
                nid = g.add("return", WHITE if secret else RED, f"return {i}")
                use(v, nid)

    for v, nid in pending:
        if v not in g.value_node:
            # A value without a definition in the function is a free input.
            g.add("input", WHITE, f"free v{v}", v, "free")
        g.edge(g.value_node[v], nid)
    return g


def secret_inputs(g: DataflowGraph, f: SsaFunction, manifest: Manifest | None = None) -> set:
    """Input nodes that may carry secrets according to signature and manifest."""
    manifest = manifest or Manifest()
    entry = f.block(f.entry)
    param_pos = {v: i for i, (v, _) in enumerate(entry.params)}
    defs = {}
    for ins in f.instructions():
        if ins.result is not None:
            defs[ins.result] = ins
    out = set()
    for nid in g.inputs:
        n = g.nodes[nid]
        if n.source == "param":
            i = param_pos[n.value]
            if i < len(f.param_secret) and f.param_secret[i]:
                out.add(nid)
        elif n.source == "load":
            if manifest.memories[defs[n.value].aux["mem"]].secret:
                out.add(nid)
        elif n.source == "global":
            if manifest.globalsSecrecy[defs[n.value].aux["global"]]:
                out.add(nid)
        elif n.source == "call":
            callee = defs[n.value].aux["callee"]
            if not isinstance(callee, int) or callee >= len(manifest.functions) \
                    or any(manifest.functions[callee].returnSecrecy):
                out.add(nid)
        else:
            out.add(nid)  # unknown provenance is treated as secret
    return out


@dataclass
class CtVerdict:
    safe: bool
    witness: list  # node ids from a secret input to a red node; empty when safe


def is_ct(g: DataflowGraph, secret: set) -> CtVerdict:
    """Multi-source BFS from the secret inputs; the first red node found gives
    the shortest witness path."""
    parent = {s: None for s in secret}
    queue = deque(sorted(secret))
    red = g.red()
    while queue:
        n = queue.popleft()
        if n in red:
            path = [n]
            while parent[path[-1]] is not None:
                path.append(parent[path[-1]])
            return CtVerdict(False, path[::-1])
        for m in g.succ[n]:
            if m not in parent:
                parent[m] = n
                queue.append(m)
    return CtVerdict(True, [])


def reaches_red(g: DataflowGraph) -> set:
    """All nodes with a path to some red node (red nodes included)."""
    pred: dict = {n: [] for n in g.nodes}
    for a, b in g.edges():
        pred[b].append(a)
    seen = set(g.red())
    queue = deque(seen)
    while queue:
        n = queue.popleft()
        for p in pred[n]:
            if p not in seen:
                seen.add(p)
                queue.append(p)
    return seen


def must_public(g: DataflowGraph, sources=("param",)) -> set:
    """SSA values of input nodes (of the given provenance) that reach a red node."""
    hit = reaches_red(g)
    return {g.nodes[n].value for n in g.inputs if n in hit and g.nodes[n].source in sources}


def to_dot(g: DataflowGraph, name: str = "dfg") -> str:
    lines = [f"digraph {name} {{"]
    for n in g.nodes.values():
        label = n.label.replace('"', '\\"')
        shape = "box" if n.kind == "input" else "ellipse"
        fill = "tomato" if n.color == RED else "white"
        lines.append(f'  n{n.id} [label="{label}", shape={shape}, style=filled, fillcolor={fill}];')
    for a, b in g.edges():
        lines.append(f"  n{a} -> n{b};")
    lines.append("}")
    return "\n".join(lines) + "\n"
