"""Generalized expression trees: backward slices that may contain cycles.

Starting from a varnode, definitions are followed backwards until leaves
(constants or input nodes) are reached. A MULTIEQUAL that is already on the
current path becomes a back-edge instead of being expanded again, so loops
produce finite graphs. Shared subexpressions are built once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import CtwError
from .access import Matcher
from .view import FunctionView, vkey

LEAF_KINDS = ("constant", "param", "global-load", "memory-load", "call-result", "stack-slot")
_LOAD_KIND = {"global": "global-load", "memory-base": "global-load", "linear-memory": "memory-load",
              "stack-slot": "stack-slot", "constant-addr": "constant", "unmatched": "memory-load"}


class TreeError(CtwError):
    pass


@dataclass
class TreeNode:
    key: tuple  # varnode key
    label: str
    leaf: str | None = None  # leaf kind, None for interior micro-op nodes
    children: list = field(default_factory=list)  # keys


@dataclass
class GenExprTree:
    root: tuple
    nodes: dict = field(default_factory=dict)  # key -> TreeNode
    back_edges: list = field(default_factory=list)  # (from key, to key)

    def leaves(self) -> list:
        return [n for n in self.nodes.values() if n.leaf is not None]

    def leaf_kinds(self) -> set:
        return {n.leaf for n in self.leaves()}

    def has_cycle(self) -> bool:
        return bool(self.back_edges)

    def to_nested(self, max_depth: int = 8, mark=None) -> list:
        """Nested ``[label, child...]`` arrays; repeated nodes are cut off."""
        seen = set()
        back = set(self.back_edges)

        def go(key, depth, parent):
            node = self.nodes[key]
            label = node.label
            if mark is not None and mark(key):
                label += " *"
            if (parent, key) in back:
                return ["cycle", label]
            if node.leaf is not None:
                return [label]
            if depth >= max_depth or key in seen:
                return [label, "..."]
            seen.add(key)
            return [label] + [go(c, depth + 1, key) for c in node.children]

        return go(self.root, 0, None)


def _name(v) -> str:
    if v.space == "const":
        return f"#{v.name:#x}"
    if v.space == "unique":
        return f"$U{v.name}"
    return str(v.name)


def build_tree(view: FunctionView, v, matcher: Matcher | None = None) -> GenExprTree:
    matcher = matcher or Matcher(view)
    tree = GenExprTree(vkey(v))
    on_path = set()

    def visit(x):
        key = vkey(x)
        if key in tree.nodes:
            return key
        if x.space == "const":
            tree.nodes[key] = TreeNode(key, f"const {_name(x)}", "constant")
            return key
        if x.space in ("ram", "rel", "iop"):
            tree.nodes[key] = TreeNode(key, f"{x.space} {x.name}", "constant")
            return key
        if view.is_input(x):
            tree.nodes[key] = TreeNode(key, f"param {x.name}", "param")
            return key
        d = view.defs.get(key)
        if d is None:
            raise TreeError(f"dangling varnode {_name(x)}")
        mi = view.insts[d[0]]
        op = mi.ops[d[1]]
        if op.opcode == "LOAD":
            acc = matcher.classify(op.inputs[0], x.size, load=True)
            kind = _LOAD_KIND[acc.kind]
            tree.nodes[key] = TreeNode(key, f"{_name(x)} = LOAD [{acc.kind}]", kind)
            return key
        if op.opcode == "INDIRECT":
            tree.nodes[key] = TreeNode(key, f"{_name(x)} = call result @{op.inputs[1].name:#x}"
                                       if isinstance(op.inputs[1].name, int) else f"{_name(x)} = call result",
                                       "call-result")
            return key
        node = TreeNode(key, f"{_name(x)} = {op.opcode}")
        tree.nodes[key] = node
        on_path.add(key)
        for inp in op.inputs:
            ik = vkey(inp)
            if ik in on_path:
                if op.opcode != "MULTIEQUAL" and tree.nodes[ik].label.split(" = ")[-1] != "MULTIEQUAL":
                    raise TreeError(f"cycle through non-MULTIEQUAL node {_name(inp)}")
                tree.back_edges.append((key, ik))
                node.children.append(ik)
                continue
            node.children.append(visit(inp))
        on_path.discard(key)
        return key

    import sys
    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 20000))
    try:
        visit(v)
    finally:
        sys.setrecursionlimit(limit)
    return tree


def tree_inputs(tree: GenExprTree) -> set:
    """Keys of the non-constant leaves."""
    return {n.key for n in tree.leaves() if n.leaf != "constant"}
