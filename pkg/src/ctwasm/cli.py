"""``ctw`` and ``jant`` command-line entry points.

Exit codes: 0 success or safe, 1 verification failure, divergence or trap,
2 usage or input error. Every option can also be set through an environment
variable named ``CTW_`` plus the option's destination in upper case (for
example ``CTW_OPT=none`` or ``CTW_TRIALS=20``); explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from .errors import ContainerError, CtwError, ParseError, TypeCheckError, UnsupportedError

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
PASS_NAMES = ("dce", "peephole", "gvn", "licm")
DUMP_STAGES = ("ssa", "opt", "mir", "all") + PASS_NAMES


@dataclass
class Config:
    """Defaults shared by the subcommands (each overridable by ``CTW_*``)."""

    opt: str = "speed"
    call_mode: str = "indirect"
    seed: int = 0
    fuel: int = 10_000_000
    trials: int = 100
    report: str | None = None
    corpus: str | None = None

    @classmethod
    def from_env(cls, env=None) -> "Config":
        env = os.environ if env is None else env
        c = cls()
        for name, cur in vars(cls()).items():
            raw = env.get("CTW_" + name.upper())
            if raw is None:
                continue
            setattr(c, name, int(raw, 0) if isinstance(cur, int) else raw)
        return c


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}")


def _truthy(raw: str) -> bool:
    return raw.strip().lower() in ("1", "true", "yes", "on")


def _apply_env(parser: argparse.ArgumentParser, env):
    """Turn ``CTW_<DEST>`` variables into defaults for every (sub)parser."""
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                _apply_env(sub, env)
            continue
        if action.dest in ("help", "command") or action.option_strings == []:
            continue
        raw = env.get("CTW_" + action.dest.upper())
        if raw is None:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            action.default = _truthy(raw)
        elif action.nargs in ("*", "+"):
            action.default = [action.type(x) if action.type else x for x in raw.split()]
        elif isinstance(action, argparse._AppendAction):
            action.default = raw.split(os.pathsep)
        else:
            action.default = action.type(raw) if action.type else raw


def _int(x: str) -> int:
    return int(x, 0)


def build_parser(env=None) -> argparse.ArgumentParser:
    cfg = Config.from_env(env)
    p = _Parser(prog="ctw", description="Constant-time compiler, verifier and leakage oracle.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    c = sub.add_parser("compile", help="compile a .wat file to a container")
    c.add_argument("input")
    c.add_argument("-o", "--output")
    c.add_argument("--opt", choices=("none", "speed"), default=cfg.opt)
    c.add_argument("--call-mode", choices=("indirect", "direct"), default=cfg.call_mode)
    c.add_argument("--permissive", action="store_true",
                   help="lower modules with type violations (for leaky test programs)")
    c.add_argument("--plain", action="store_true", help="clear DIT flags (baseline compiler)")
    c.add_argument("--no-scrub", action="store_true", help="do not insert flag-scrubbing compares")
    c.add_argument("--dump-ir", action="append", choices=DUMP_STAGES, default=[],
                   help="write textual IR for a stage next to the output (repeatable)")
    c.add_argument("--timing-report", help="write per-stage times and counts as JSON")

    v = sub.add_parser("verify", help="verify a container")
    _verify_args(v)
    v.add_argument("--spectre", action="store_true", help="also run the structural Spectre checks")

    r = sub.add_parser("run", help="run one function in the leakage oracle")
    r.add_argument("container")
    r.add_argument("--entry", required=True)
    r.add_argument("--args", nargs="*", type=_int, default=[])
    r.add_argument("--mem-init", action="append", default=[],
                   help="INDEX=PATH (or PATH for memory 0): initial bytes of a memory")
    r.add_argument("--global", dest="global_values", action="append", default=[],
                   help="INDEX=VALUE: initial value of a global")
    r.add_argument("--fuel", type=_int, default=cfg.fuel)
    r.add_argument("--trace", help="write the leakage trace as JSON lines")
    r.add_argument("--dump-mem", action="append", default=[], help="INDEX:OFFSET:LENGTH to print as hex")

    f = sub.add_parser("fuzz", help="noninterference trials on a container")
    f.add_argument("container")
    f.add_argument("--entry", action="append", default=[], help="function (default: every untrusted one)")
    f.add_argument("--trials", type=_int, default=cfg.trials)
    f.add_argument("--seed", type=_int, default=cfg.seed)
    f.add_argument("--fuel", type=_int, default=cfg.fuel)
    f.add_argument("--public-args", nargs="*", type=_int, default=None)
    f.add_argument("--report", default=cfg.report, help="write a JSON divergence report")

    m = sub.add_parser("patch-manifest", help="rewrite the manifest of a container")
    m.add_argument("container")
    m.add_argument("-o", "--output", help="output path (default: in place)")
    m.add_argument("--manifest", help="JSON file with the full new manifest")
    m.add_argument("--set-param", action="append", default=[], help="FUNC:INDEX:secret|public")
    m.add_argument("--set-return", action="append", default=[], help="FUNC:secret|public")
    m.add_argument("--set-trusted", action="append", default=[], help="FUNC:true|false")
    m.add_argument("--set-global", action="append", default=[], help="INDEX:secret|public")
    m.add_argument("--set-memory", action="append", default=[], help="INDEX:secret|public")

    b = sub.add_parser("bench", help="corpus overhead and verify-time scaling tables")
    b.add_argument("corpus_dir", nargs="?", default=cfg.corpus)
    b.add_argument("--opt", choices=("none", "speed"), default=cfg.opt)
    b.add_argument("--sizes", nargs="*", type=_int, default=None)
    b.add_argument("--seed", type=_int, default=cfg.seed)
    b.add_argument("--repeats", type=_int, default=3)
    b.add_argument("--no-scaling", action="store_true")
    b.add_argument("--csv", help="write the corpus table as CSV")
    b.add_argument("--scaling-csv", help="write the scaling table as CSV")

    g = sub.add_parser("gen", help="generate a random well-typed program")
    g.add_argument("--size", type=_int, default=50)
    g.add_argument("--secret-density", type=float, default=0.5)
    g.add_argument("--leak-rate", type=float, default=0.0)
    g.add_argument("--functions", type=_int, default=None)
    g.add_argument("--seed", type=_int, default=cfg.seed)
    g.add_argument("-o", "--output")

    _apply_env(p, os.environ if env is None else env)
    return p


def _verify_args(v):
    v.add_argument("container")
    v.add_argument("--json-report")
    v.add_argument("--function")


# -- subcommands --------------------------------------------------------------

def _err(msg):
    print(msg, file=sys.stderr)


def cmd_compile(a) -> int:
    from .ir.text import format_module
    from .mir.container import atomic_write, emit_container
    from .mir.text import format_program
    from .pipeline import compile_source

    src_path = Path(a.input)
    try:
        text = src_path.read_text(encoding="utf-8")
    except OSError as e:
        _err(f"{a.input}: {e}")
        return EXIT_INPUT
    out = Path(a.output) if a.output else src_path.with_suffix(".ctw")
    stages = set(a.dump_ir)
    if "all" in stages:
        stages = set(DUMP_STAGES)
    dumps = {}

    def dump(stage, fn):
        name = stage.rsplit(".", 1)[1]
        if name in stages:
            from .ir.text import format_function
            dumps.setdefault(f"{stage}", []).append(format_function(fn))

    try:
        res = compile_source(text, opt=a.opt, call_mode=a.call_mode, dit=not a.plain,
                             permissive=a.permissive, dump=dump if stages & set(PASS_NAMES) else None,
                             scrub_flags=not a.no_scrub, keep_ssa="ssa" in stages)
    except ParseError as e:
        _err(e.format(a.input))
        return EXIT_INPUT
    except TypeCheckError as e:
        for v in e.violations:
            _err(v.format(a.input))
        return EXIT_INPUT
    except UnsupportedError as e:
        _err(e.format(a.input))
        return EXIT_INPUT
    except CtwError as e:
        _err(f"{a.input}: {e}")
        return EXIT_INPUT
    emit_container(res.program, out)
    base = str(out)
    if "ssa" in stages:
        atomic_write(base + ".ssa.ir", format_module(res.ssa).encode())
    for stage, texts in dumps.items():
        atomic_write(f"{base}.{stage}.ir", "\n".join(texts).encode())
    if "opt" in stages:
        atomic_write(base + ".opt.ir", format_module(res.ir).encode())
    if "mir" in stages:
        atomic_write(base + ".mir", format_program(res.program).encode())
    if a.timing_report:
        atomic_write(a.timing_report, json.dumps(res.report(), indent=2, sort_keys=True).encode())
    c = res.counts
    print(f"{out}: {len(res.program.functions)} functions, {c['ir_insts']} IR / {c['mir_insts']} MIR "
          f"instructions ({c['dit_insts']} DIT), {sum(res.timings.values()):.3f}s")
    return EXIT_OK


def _print_verdicts(verdicts):
    for v in verdicts:
        print(f"{v.function}: {v.status}")
        for x in v.violations:
            print(f"  {x.cls} at {x.address:#x}: {x.detail}")
        for r in v.reasons:
            print(f"  unsupported: {r}")
        for w in v.warnings:
            print(f"  warning: {w}")


def cmd_verify(a) -> int:
    from .jant.spectre import check_spectre_structure
    from .jant.verify import module_safe, verify_program
    from .mir.container import atomic_write, read_container

    try:
        p = read_container(a.container)
        verdicts = verify_program(p, a.function)
    except (ContainerError, OSError) as e:
        _err(f"{a.container}: {e}")
        return EXIT_INPUT
    if a.function is not None and not verdicts:
        _err(f"{a.container}: no untrusted function named {a.function}")
        return EXIT_INPUT
    _print_verdicts(verdicts)
    ok = module_safe(verdicts)
    spectre = None
    if getattr(a, "spectre", False):
        spectre = check_spectre_structure(p)
        print(f"spectre-pht: {'pass' if spectre.pht_ok else 'fail'}")
        print(f"spectre-btb: {'pass' if spectre.btb_ok else 'fail'}")
        for msg in spectre.pht_failures + spectre.btb_failures:
            print(f"  {msg}")
        ok = ok and spectre.ok
    if a.json_report:
        report = [v.to_dict() for v in verdicts]
        if spectre is not None:
            report = {"verdicts": report, "spectre": spectre.to_dict()}
        atomic_write(a.json_report, json.dumps(report, indent=2).encode())
    print("module: " + ("safe" if module_safe(verdicts) else "rejected"))
    return EXIT_OK if ok else EXIT_FAIL


def _split_kv(item, sep="="):
    if sep in item:
        k, v = item.split(sep, 1)
        return int(k, 0), v
    return 0, item


def cmd_run(a) -> int:
    from .mir.container import read_container
    from .oracle.machine import run

    try:
        p = read_container(a.container)
        fn = p.function(a.entry)
        mems = [None] * len(p.memories)
        for item in a.mem_init:
            k, path = _split_kv(item)
            mems[k] = Path(path).read_bytes()
        globs = [None] * len(p.globals)
        for item in a.global_values:
            k, val = _split_kv(item)
            globs[k] = int(val, 0)
    except KeyError:
        _err(f"{a.container}: no function {a.entry}")
        return EXIT_INPUT
    except (ContainerError, OSError, ValueError, IndexError) as e:
        _err(f"{a.container}: {e}")
        return EXIT_INPUT
    if len(a.args) != fn.n_params:
        _err(f"{fn.name} takes {fn.n_params} arguments, got {len(a.args)}")
        return EXIT_INPUT
    res = run(p, fn.name, a.args, mems, globs, fuel=a.fuel)
    if a.trace:
        from .mir.container import atomic_write
        lines = [json.dumps(list(ev)) for ev in res.trace]
        atomic_write(a.trace, ("\n".join(lines) + "\n").encode())
    print(f"result: {res.value if res.value is not None else '-'}")
    print(f"steps: {res.steps}")
    print(f"trace events: {len(res.trace)}")
    for item in a.dump_mem:
        k, off, n = (int(x, 0) for x in item.split(":"))
        buf = res.state.memory.by_name(f"mem{k}").buf
        print(f"mem{k}[{off:#x}:{off + n:#x}]: {bytes(buf[off:off + n]).hex()}")
    if res.trap:
        print(f"trap: {res.trap}")
        return EXIT_FAIL
    return EXIT_OK


def cmd_fuzz(a) -> int:
    from .mir.container import atomic_write, read_container
    from .oracle.noninterference import divergences, noninterference_check

    try:
        p = read_container(a.container)
        entries = a.entry or [f.name for i, f in enumerate(p.functions)
                              if not p.manifest.functions[i].trusted]
        for e in entries:
            p.function(e)
    except KeyError as e:
        _err(f"{a.container}: no function {e}")
        return EXIT_INPUT
    except (ContainerError, OSError) as e:
        _err(f"{a.container}: {e}")
        return EXIT_INPUT
    report = {"seed": a.seed, "trials": a.trials, "functions": {}}
    total = 0
    for e in entries:
        pairs = noninterference_check(p, e, a.trials, a.seed, public_args=a.public_args, fuel=a.fuel,
                                      keep_traces=False)
        d = divergences(pairs)
        total += len(d)
        report["functions"][p.function(e).name] = {"pairs": len(pairs),
                                                    "divergences": [tp.to_dict() for tp in d]}
        print(f"{p.function(e).name}: {len(pairs)} pairs, {len(d)} divergent")
    if a.report:
        atomic_write(a.report, json.dumps(report, indent=2, sort_keys=True).encode())
    return EXIT_FAIL if total else EXIT_OK


def _secrecy(word: str) -> bool:
    if word not in ("secret", "public"):
        raise ValueError(f"expected secret or public, got {word!r}")
    return word == "secret"


def cmd_patch_manifest(a) -> int:
    from .manifest import Manifest
    from .mir.container import patch_manifest, read_container

    try:
        p = read_container(a.container)
        man = Manifest.from_json(Path(a.manifest).read_text()) if a.manifest else p.manifest.copy()
        for item in a.set_param:
            fn, idx, word = item.rsplit(":", 2)
            man.functions[p.function(fn).index].paramSecrecy[int(idx)] = _secrecy(word)
        for item in a.set_return:
            fn, word = item.rsplit(":", 1)
            man.functions[p.function(fn).index].returnSecrecy[0] = _secrecy(word)
        for item in a.set_trusted:
            fn, word = item.rsplit(":", 1)
            man.functions[p.function(fn).index].trusted = _truthy(word)
        for item in a.set_global:
            k, word = item.split(":", 1)
            man.globalsSecrecy[int(k, 0)] = _secrecy(word)
        for item in a.set_memory:
            k, word = item.split(":", 1)
            man.memories[int(k, 0)].secret = _secrecy(word)
        patch_manifest(a.container, man, a.output)
    except (ContainerError, OSError, ValueError, IndexError, KeyError) as e:
        _err(f"{a.container}: {e}")
        return EXIT_INPUT
    print(f"{a.output or a.container}: manifest {man.to_json()}")
    return EXIT_OK


def cmd_bench(a) -> int:
    from .bench import (SCALING_SIZES, bench_corpus, bench_scaling, corpus_sources, linear_fit, to_csv,
                        to_table)
    from .mir.container import atomic_write

    if a.corpus_dir is not None and not Path(a.corpus_dir).is_dir():
        _err(f"{a.corpus_dir}: not a directory")
        return EXIT_INPUT
    try:
        rows = bench_corpus(corpus_sources(a.corpus_dir), a.opt)
    except CtwError as e:
        _err(f"bench: {e}")
        return EXIT_INPUT
    print(to_table(rows), end="")
    if a.csv:
        atomic_write(a.csv, to_csv(rows).encode())
    if a.no_scaling:
        return EXIT_OK
    sizes = tuple(a.sizes) if a.sizes else SCALING_SIZES
    srows = bench_scaling(sizes, a.seed, a.repeats)
    print()
    print(to_table(srows), end="")
    if len(srows) >= 2:
        slope, icpt, r2 = linear_fit([r.mir_insts for r in srows], [r.verify_s for r in srows])
        print(f"fit: verify_s = {slope:.3e} * mir_insts + {icpt:.3e}  (R^2 = {r2:.4f})")
    if a.scaling_csv:
        atomic_write(a.scaling_csv, to_csv(srows).encode())
    return EXIT_OK


def cmd_gen(a) -> int:
    from .gen import gen
    from .mir.container import atomic_write

    if a.size < 1 or not 0.0 <= a.secret_density <= 1.0 or not 0.0 <= a.leak_rate <= 1.0:
        _err("gen: --size must be positive and rates within [0, 1]")
        return EXIT_INPUT
    g = gen(a.seed, a.size, a.secret_density, a.leak_rate, a.functions)
    if a.output:
        atomic_write(a.output, g.text.encode())
        print(f"{a.output}: {g.size} instructions, leaks: {', '.join(g.leaks) or 'none'}")
    else:
        print(g.text)
    return EXIT_OK


COMMANDS = {
    "compile": cmd_compile,
    "verify": cmd_verify,
    "run": cmd_run,
    "fuzz": cmd_fuzz,
    "patch-manifest": cmd_patch_manifest,
    "bench": cmd_bench,
    "gen": cmd_gen,
}


def main(argv=None) -> int:
    try:
        a = build_parser().parse_args(argv)
    except _UsageError as e:
        _err(str(e))
        return EXIT_INPUT
    except (ValueError, TypeError) as e:
        _err(f"ctw: bad value in a CTW_ environment variable: {e}")
        return EXIT_INPUT
    return COMMANDS[a.command](a)


def jant_main(argv=None) -> int:
    """``jant verify <container> [--json-report PATH] [--function NAME]``."""
    p = _Parser(prog="jant", description="Constant-time verifier for compiled containers.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    v = sub.add_parser("verify")
    _verify_args(v)
    v.add_argument("--spectre", action="store_true")
    try:
        a = p.parse_args(argv)
    except _UsageError as e:
        _err(str(e))
        return EXIT_INPUT
    return cmd_verify(a)


def _entry():
    sys.exit(main())


def _jant_entry():
    sys.exit(jant_main())


if __name__ == "__main__":
    _entry()
