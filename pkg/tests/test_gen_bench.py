import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctwasm.bench import (bench_corpus, bench_scaling, corpus_sources, linear_fit, sized_program, to_csv,
                          to_table)
from ctwasm.front.ast import parse_text
from ctwasm.front.typecheck import typecheck
from ctwasm.gen import LEAKS, gen
from ctwasm.jant.verify import verify_program
from ctwasm.pipeline import compile_source


# -- generator -------------------------------------------------------------------------

def test_generator_is_deterministic():
    assert gen(11, 120, 0.4).text == gen(11, 120, 0.4).text
    assert gen(11, 120, 0.4).text != gen(12, 120, 0.4).text


@given(st.integers(0, 10_000), st.integers(10, 200), st.floats(0.1, 0.9))
@settings(max_examples=25)
def test_clean_programs_typecheck_and_verify(seed, size, density):
    g = gen(seed, size, density)
    assert not g.leaks
    assert typecheck(parse_text(g.text)).ok
    vs = verify_program(compile_source(g.text).program)
    assert all(v.status == "safe" for v in vs), [v.to_dict() for v in vs]


@given(st.integers(0, 10_000), st.integers(40, 200))
@settings(max_examples=25)
def test_injected_leaks_are_reported(seed, size):
    g = gen(seed, size, 0.5, leak_rate=0.5)
    if not g.leaks:
        return
    assert not typecheck(parse_text(g.text)).ok
    vs = verify_program(compile_source(g.text, permissive=True).program)
    found = set().union(*(v.classes for v in vs))
    assert any(v.status == "unsafe" for v in vs)
    assert g.leak_classes <= found, (g.leaks, found)


def test_every_leak_shape_is_reachable():
    seen = set()
    for seed in range(200):
        seen.update(gen(seed, 150, 0.5, leak_rate=0.5).leaks)
        if seen == set(LEAKS):
            break
    assert seen == set(LEAKS)


def test_size_tracks_request():
    small = compile_source(gen(1, 50).text).program.size
    large = compile_source(gen(1, 800).text).program.size
    assert large > 4 * small


# -- bench -----------------------------------------------------------------------------

def test_corpus_table_and_csv():
    rows = bench_corpus(corpus_sources())
    assert [r.name for r in rows] == ["sha256", "tea", "salsa20"]
    assert all(r.verdict == "safe" and r.overhead >= 1.0 for r in rows)
    text = to_table(rows)
    assert text.splitlines()[0].split()[0] == "name" and "tea" in text
    csv = to_csv(rows).splitlines()
    assert csv[0].split(",")[:2] == ["name", "ir_insts"] and len(csv) == 4


def test_empty_corpus_dir(tmp_path):
    rows = bench_corpus(corpus_sources(tmp_path))
    assert rows == []
    assert to_table(rows) == "(empty)\n" and to_csv(rows) == ""


def test_linear_fit_on_exact_line():
    a, b, r2 = linear_fit([1, 2, 3, 4], [3, 5, 7, 9])
    assert a == pytest.approx(2) and b == pytest.approx(1) and r2 == pytest.approx(1)
    assert linear_fit([1, 2, 3], [5, 5, 5])[2] == 1.0


def test_sized_program_hits_target():
    _, res = sized_program(600, seed=2)
    assert abs(res.program.size - 600) <= 0.25 * 600


def test_small_scaling_run():
    rows = bench_scaling((300, 600), repeats=1)
    assert [r.target for r in rows] == [300, 600]
    assert all(r.verdict == "safe" and r.verify_s > 0 for r in rows)
