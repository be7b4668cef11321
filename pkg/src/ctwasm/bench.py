"""Desk-scale benchmarks: corpus overhead table and verify-time scaling."""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path

from .gen import gen
from .jant.verify import verify_program
from .pipeline import compile_source

SCALING_SIZES = (1000, 2000, 4000, 8000, 16000)


@dataclass
class CorpusRow:
    name: str
    ir_insts: int
    mir_insts: int
    plain_mir_insts: int
    overhead: float
    compile_s: float
    verify_s: float
    verdict: str


@dataclass
class ScalingRow:
    target: int
    mir_insts: int
    functions: int
    verify_s: float
    verdict: str


def corpus_sources(corpus_dir=None) -> list:
    """(name, text) pairs from ``corpus_dir`` or the bundled crypto corpus."""
    if corpus_dir is None:
        from . import corpus
        return [(n, corpus.source(n)) for n in corpus.CRYPTO]
    return [(p.stem, p.read_text(encoding="utf-8")) for p in sorted(Path(corpus_dir).glob("*.wat"))]


def bench_corpus(sources, opt: str = "speed") -> list:
    rows = []
    for name, text in sources:
        t0 = time.perf_counter()
        res = compile_source(text, opt=opt)
        t1 = time.perf_counter()
        verdicts = verify_program(res.program)
        t2 = time.perf_counter()
        plain = compile_source(text, opt=opt, dit=False)
        n, m = res.counts["mir_insts"], plain.counts["mir_insts"]
        status = "safe" if all(v.status == "safe" for v in verdicts) else "rejected"
        rows.append(CorpusRow(name, res.counts["ir_insts"], n, m, round(n / m, 4) if m else 1.0,
                              t1 - t0, t2 - t1, status))
    return rows


def sized_program(target_mir: int, seed: int = 0, secret_density: float = 0.5, rounds: int = 3):
    """Generate a leak-free program whose MIR size is close to ``target_mir``."""
    size = max(10, int(target_mir / 1.4))
    best = None
    for _ in range(rounds):
        g = gen(seed, size=size, secret_density=secret_density)
        res = compile_source(g.text)
        mir = res.program.size
        if best is None or abs(mir - target_mir) < abs(best[1].program.size - target_mir):
            best = (g, res)
        if abs(mir - target_mir) <= 0.05 * target_mir:
            break
        size = max(10, int(size * target_mir / max(mir, 1)))
    return best


def bench_scaling(sizes=SCALING_SIZES, seed: int = 0, repeats: int = 3) -> list:
    rows = []
    for target in sizes:
        _, res = sized_program(target, seed)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            verdicts = verify_program(res.program)
            times.append(time.perf_counter() - t0)
        status = "safe" if all(v.status == "safe" for v in verdicts) else "rejected"
        rows.append(ScalingRow(target, res.program.size, len(res.program.functions), min(times), status))
    return rows


def linear_fit(xs, ys):
    """Least-squares ``y = a*x + b`` and its coefficient of determination."""
    a, b = statistics.linear_regression(xs, ys)
    mean = statistics.fmean(ys)
    ss_tot = sum((y - mean) ** 2 for y in ys)
    ss_res = sum((y - (a * x + b)) ** 2 for x, y in zip(xs, ys))
    r2 = 1.0 - ss_res / ss_tot if ss_tot else 1.0
    return a, b, r2


def to_csv(rows) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    w = csv.DictWriter(buf, fieldnames=list(asdict(rows[0])), lineterminator="\n")
    w.writeheader()
    for r in rows:
        d = asdict(r)
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) and k.endswith("_s") else v) for k, v in d.items()})
    return buf.getvalue()


def to_table(rows) -> str:
    if not rows:
        return "(empty)\n"
    cols = list(asdict(rows[0]))
    cells = [[(f"{v:.4f}" if isinstance(v, float) else str(v)) for v in asdict(r).values()] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"
