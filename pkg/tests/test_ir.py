import random
import re

import networkx as nx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctwasm.gen import gen
from ctwasm.ir import interp
from ctwasm.ir.core import MEMORY_READS, SIDE_EFFECTS, Block, Inst, SsaFunction, inst_uses, validate
from ctwasm.ir.dfg import (RED, WHITE, DataflowGraph, build_dfg, is_ct, must_public, reaches_red,
                           secret_inputs, to_dot)
from ctwasm.ir.phi import params_to_phi
from ctwasm.ir.text import format_function, parse_function

from helpers import fixture, ir_of

FIG_CALLEE = lambda callee: [False, False, True, False]  # noqa: E731  (vmctx, vmctx, secret, public)


def dfg_example():
    return parse_function(fixture("dfg_example.ir"))


def node_of(g, v):
    return g.value_node[v]


def to_nx(g: DataflowGraph):
    h = nx.DiGraph()
    for n in g.nodes.values():
        h.add_node(n.id, sig=(n.kind, n.color, re.sub(r"v\d+", "v", n.label), n.source))
    h.add_edges_from(g.edges())
    return h


def isomorphic(g1, g2) -> bool:
    return nx.is_isomorphic(to_nx(g1), to_nx(g2), node_match=lambda a, b: a["sig"] == b["sig"])


# -- text format ------------------------------------------------------------------

@pytest.mark.parametrize("name", ["gvn_before.ir", "gvn_after.ir", "licm_before.ir", "licm_after.ir",
                                  "dfg_example.ir"])
def test_ir_text_fixpoint(name):
    f = parse_function(fixture(name))
    text = format_function(f)
    assert format_function(parse_function(text)) == text


def test_dit_suffix_round_trips():
    f = dfg_example()
    names = [i.name for i in f.instructions()]
    assert "iaddDIT" in names and "imul" in names
    assert "iaddDIT v11, v3" in format_function(f)


# -- params_to_phi ------------------------------------------------------------------

def test_block_params_become_phi():
    f = params_to_phi(dfg_example())
    b2 = f.block(2)
    assert b2.params == []
    phi = b2.insts[0]
    assert phi.opcode == "phi" and phi.result == 10
    assert sorted(phi.args) == [12, 14]
    assert "v10 = phi" in format_function(f)


def test_blocks_without_params_unchanged():
    f = dfg_example()
    g = params_to_phi(f)
    for bid in (0, 1, 3, 4):
        assert [i.name for i in g.block(bid).insts] == [i.name for i in f.block(bid).insts]


def test_params_to_phi_rejects_bad_arity():
    f = dfg_example()
    f.block(4).term.args = []
    with pytest.raises(Exception):
        params_to_phi(f)


@given(st.integers(0, 10_000), st.integers(20, 120))
def test_params_to_phi_preserves_results(seed, size):
    m = ir_of(gen(seed, size).text)
    m2 = m.copy()
    m2.functions = [params_to_phi(f) for f in m2.functions]
    rng = random.Random(seed)
    f = m.function("$main")
    for _ in range(10):
        args = [rng.getrandbits(32 if t == "i32" else 64) for t in f.params]
        try:
            a = interp.call(m, "$main", args)
        except Exception as e:
            with pytest.raises(type(e)):
                interp.call(m2, "$main", args)
            continue
        assert interp.call(m2, "$main", args) == a


# -- DFG ------------------------------------------------------------------------

def test_dfg_example_must_public_params():
    f = dfg_example()
    g = build_dfg(f, callee_secrecy=FIG_CALLEE)
    pub = must_public(g)
    assert 2 in pub and 4 in pub
    assert 3 not in pub
    # v3 only flows through iaddDIT and a phi into a secret call parameter
    assert is_ct(g, {node_of(g, 3)}).safe
    assert not is_ct(g, {node_of(g, 2)}).safe
    assert not is_ct(g, {node_of(g, 4)}).safe


def test_dfg_example_colors():
    g = build_dfg(dfg_example(), callee_secrecy=FIG_CALLEE)
    by_label = {}
    for n in g.nodes.values():
        by_label.setdefault(n.label, []).append(n.color)
    assert by_label["iaddDIT"] == [WHITE]
    assert by_label["imul"] == [RED]
    assert by_label["phi"] == [WHITE]
    assert by_label["brnz"] == [RED]
    assert sorted(by_label["call-param 2"] + by_label["call-param 3"]) == [RED, WHITE]
    inputs = {g.nodes[n].source for n in g.inputs}
    assert inputs == {"param", "call"}


def test_all_white_body():
    src = """(module (memory $m secret 1)
      (func $f untrusted (param $a s32) (param $b s32)
        (s32.store $m (i32.const 8) (s32.xor (s32.add (local.get $a) (local.get $b)) (local.get $a)))))"""
    m = ir_of(src)
    f = m.functions[0]
    g = build_dfg(f, m.manifest, 0)
    sec = secret_inputs(g, f, m.manifest)
    assert len(sec) == 2
    assert is_ct(g, sec).safe
    assert not (sec & reaches_red(g))


def test_direct_red_use_witness():
    src = """(module (memory $m secret 1)
      (func $f (param $s s32) (s32.store $m (i32.const 0) (local.get $s))))"""
    m = ir_of(src)
    f = m.functions[0]
    # make the multiply non-DIT by hand: a secret into a plain imul
    blk = f.blocks[0]
    s = f.block(f.entry).params[0][0]
    r = f.new_value("i32")
    blk.insts.insert(0, Inst("imul", [s, s], r, "i32"))
    g = build_dfg(f, m.manifest, 0)
    v = is_ct(g, secret_inputs(g, f, m.manifest))
    assert not v.safe
    assert len(v.witness) - 1 == 1
    assert g.nodes[v.witness[-1]].label == "imul"


def test_secret_dit_add_into_secret_store_is_safe():
    src = """(module (memory $m secret 1)
      (func $f untrusted (param $s s32) (s32.store $m (i32.const 0) (s32.add (local.get $s) (i32.const 1)))))"""
    m = ir_of(src)
    f = m.functions[0]
    g = build_dfg(f, m.manifest, 0)
    assert is_ct(g, secret_inputs(g, f, m.manifest)).safe


def test_secret_store_into_public_memory_is_red():
    src = """(module (memory $m secret 1) (memory $p 1)
      (func $f (param $s s32) (i32.store $p (i32.const 0) (i32.declassify (local.get $s)))))"""
    m = ir_of(src)
    f = m.functions[0]
    g = build_dfg(f, m.manifest, 0)
    vals = [n for n in g.nodes.values() if n.kind == "store-val"]
    assert [n.color for n in vals] == [RED]


def _random_graph(draw_nodes, draw_edges, colors):
    g = DataflowGraph()
    for i in range(draw_nodes):
        g.add("input" if i % 3 == 0 else "op", RED if colors[i] else WHITE, f"n{i}", i)
    for a, b in draw_edges:
        if a < draw_nodes and b < draw_nodes and a != b:
            g.edge(a, b)
    return g


def _all_paths_reach_red(g, start):
    """Brute force: enumerate every simple path from ``start``."""
    red = g.red()
    stack = [(start, (start,))]
    while stack:
        n, path = stack.pop()
        if n in red:
            return True
        for m in g.succ[n]:
            if m not in path:
                stack.append((m, path + (m,)))
    return False


graphs = st.integers(1, 12).flatmap(lambda n: st.tuples(
    st.just(n),
    st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=3 * n),
    st.lists(st.booleans(), min_size=n, max_size=n),
))


@given(graphs)
def test_red_reachability_matches_path_enumeration(shape):
    n, edges, colors = shape
    g = _random_graph(n, edges, colors)
    assert reaches_red(g) == {i for i in range(n) if _all_paths_reach_red(g, i)}


@given(graphs, st.data())
def test_is_ct_matches_dfs(shape, data):
    n, edges, colors = shape
    g = _random_graph(n, edges, colors)
    secret = set(data.draw(st.lists(st.integers(0, n - 1), max_size=n)))
    v = is_ct(g, secret)
    expected_safe = not any(_all_paths_reach_red(g, s) for s in secret)
    assert v.safe == expected_safe
    if not v.safe:
        assert v.witness[0] in secret and v.witness[-1] in g.red()
        for a, b in zip(v.witness, v.witness[1:]):
            assert b in g.succ[a]


@given(st.integers(0, 10_000), st.integers(10, 120))
def test_dfg_is_deterministic(seed, size):
    m = ir_of(gen(seed, size).text)
    for i, f in enumerate(m.functions):
        g1, g2 = build_dfg(f, m.manifest, i), build_dfg(f, m.manifest, i)
        assert [(n.kind, n.color, n.label) for n in g1.nodes.values()] == \
               [(n.kind, n.color, n.label) for n in g2.nodes.values()]
        assert sorted(g1.edges()) == sorted(g2.edges())


def _shuffle_block(f: SsaFunction, rng):
    """Random topological reorder of each block; side effects keep their order."""
    for b in f.blocks:
        insts = list(b.insts)
        defined_here = {i.result: k for k, i in enumerate(insts) if i.result is not None}
        deps = {k: set() for k in range(len(insts))}
        last_effect = None
        for k, ins in enumerate(insts):
            for u in inst_uses(ins):
                u = f.resolve(u)
                if u in defined_here and defined_here[u] < k:
                    deps[k].add(defined_here[u])
            if ins.opcode in SIDE_EFFECTS or ins.opcode in MEMORY_READS or ins.opcode in ("udiv", "sdiv", "urem", "srem"):
                if last_effect is not None:
                    deps[k].add(last_effect)
                last_effect = k
        order, done = [], set()
        while len(order) < len(insts):
            ready = [k for k in deps if k not in done and deps[k] <= done]
            k = rng.choice(ready)
            done.add(k)
            order.append(k)
        b.insts = [insts[k] for k in order]


@given(st.integers(0, 10_000), st.integers(10, 100))
def test_dfg_ignores_instruction_order(seed, size):
    m = ir_of(gen(seed, size).text)
    rng = random.Random(seed)
    for i, f in enumerate(m.functions):
        g = f.copy()
        _shuffle_block(g, rng)
        validate(g)
        assert isomorphic(build_dfg(f, m.manifest, i), build_dfg(g, m.manifest, i))


@given(st.integers(0, 10_000), st.integers(10, 150))
def test_every_free_value_is_one_input_node(seed, size):
    m = ir_of(gen(seed, size).text)
    for i, f in enumerate(m.functions):
        g = build_dfg(f, m.manifest, i)
        values = [g.nodes[n].value for n in g.inputs]
        assert len(values) == len(set(values))
        assert {v for v, _ in f.block(f.entry).params} <= set(values)


def test_unknown_callee_is_an_error():
    with pytest.raises(Exception):
        build_dfg(dfg_example())


def test_dot_output():
    text = to_dot(build_dfg(dfg_example(), callee_secrecy=FIG_CALLEE))
    assert text.startswith("digraph") and "tomato" in text and "->" in text
