"""Trace-pair harness: equal public inputs, different secrets, same trace?"""

from __future__ import annotations

import random
from dataclasses import dataclass

from ..mir.core import MirProgram
from .machine import DEFAULT_FUEL, run


@dataclass
class TracePair:
    input_a: dict
    input_b: dict
    trace_a: list | None
    trace_b: list | None
    divergence: int | None = None

    @property
    def diverged(self) -> bool:
        return self.divergence is not None

    def event_a(self):
        return None if self.divergence is None or self.trace_a is None else _at(self.trace_a, self.divergence)

    def event_b(self):
        return None if self.divergence is None or self.trace_b is None else _at(self.trace_b, self.divergence)

    def to_dict(self) -> dict:
        return {"input_a": _jsonable(self.input_a), "input_b": _jsonable(self.input_b),
                "divergence": self.divergence,
                "event_a": _jsonable(self.event_a()), "event_b": _jsonable(self.event_b())}


def _at(trace, i):
    return trace[i] if i < len(trace) else None


def _jsonable(x):
    if isinstance(x, (bytes, bytearray)):
        return x.hex() if len(x) <= 64 else f"<{len(x)} bytes>"
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def first_divergence(ta: list, tb: list) -> int | None:
    if ta == tb:
        return None
    for i, (a, b) in enumerate(zip(ta, tb)):
        if a != b:
            return i
    return min(len(ta), len(tb))


def boundary_values(size: int) -> list:
    """0, 1, all-ones and the sign bit for a ``size``-byte integer."""
    bits = 8 * size
    return [0, 1, (1 << bits) - 1, 1 << (bits - 1)]


def boundary_pairs(size: int = 4) -> list:
    b = boundary_values(size)
    return [(i, j) for i in range(len(b)) for j in range(i + 1, len(b))]


class _Inputs:
    def __init__(self, p: MirProgram, fidx: int, public_args, mem_bytes: int | None):
        self.p = p
        f = p.functions[fidx]
        sig = p.manifest.functions[fidx]
        self.sizes = list(f.param_sizes)
        self.secret = list(sig.paramSecrecy)
        self.public_args = public_args
        self.mem_secret = [m.secret for m in p.manifest.memories]
        self.mem_sizes = [d["pages"] * 65536 for d in p.memories]
        if mem_bytes is not None:
            self.mem_sizes = [min(s, mem_bytes) for s in self.mem_sizes]
        self.glob_secret = list(p.manifest.globalsSecrecy)
        self.glob_sizes = [g["size"] for g in p.globals]

    @property
    def has_secrets(self) -> bool:
        return any(self.secret) or any(self.mem_secret) or any(self.glob_secret)

    def public(self, rng):
        args = []
        for i, (size, sec) in enumerate(zip(self.sizes, self.secret)):
            if sec:
                args.append(None)
            elif self.public_args is not None and i < len(self.public_args) and self.public_args[i] is not None:
                args.append(self.public_args[i])
            else:
                args.append(rng.randrange(64))
        mems = [None if sec else rng.randbytes(n) for sec, n in zip(self.mem_secret, self.mem_sizes)]
        return args, mems

    def secret_side(self, rng, pub, boundary=None):
        """Fill secret slots; ``boundary`` picks an index into boundary values."""
        args = list(pub[0])
        for i, (size, sec) in enumerate(zip(self.sizes, self.secret)):
            if sec:
                args[i] = boundary_values(size)[boundary] if boundary is not None else rng.getrandbits(8 * size)
        mems = list(pub[1])
        for k, (sec, n) in enumerate(zip(self.mem_secret, self.mem_sizes)):
            if sec:
                if boundary is not None:
                    fill = (0x00, 0x01, 0xFF, 0x80)[boundary]
                    mems[k] = bytes([fill]) * n
                else:
                    mems[k] = rng.randbytes(n)
        globs = [None] * len(self.glob_secret)
        for k, (sec, size) in enumerate(zip(self.glob_secret, self.glob_sizes)):
            if sec:
                globs[k] = boundary_values(size)[boundary] if boundary is not None else rng.getrandbits(8 * size)
        return {"args": args, "memories": mems, "globals": globs}


def noninterference_check(p: MirProgram, entry, trials: int = 100, seed: int = 0, public_args=None,
                          fuel: int = DEFAULT_FUEL, keep_traces: bool = True, mem_bytes: int | None = None,
                          stop_at_first: bool = False) -> list:
    """Run ``trials`` secret-differing input pairs and compare their traces.

    The first pairs combine the boundary secrets (0, 1, all-ones, sign bit)
    pairwise; the rest are random. Public arguments and public memories are
    equal within a pair (random small arguments unless ``public_args`` fixes
    them). A pair passes when both traces, including trap events and public
    outputs, are identical. ``keep_traces=False`` drops the traces of passing
    pairs to save memory.
    """
    fidx = entry if isinstance(entry, int) else p.functions.index(p.function(entry))
    inp = _Inputs(p, fidx, public_args, mem_bytes)
    rng = random.Random(seed)
    bpairs = boundary_pairs()
    out = []
    for t in range(trials):
        pub = inp.public(rng)
        if t < len(bpairs):
            a = inp.secret_side(rng, pub, bpairs[t][0])
            b = inp.secret_side(rng, pub, bpairs[t][1])
        else:
            a = inp.secret_side(rng, pub)
            b = inp.secret_side(rng, pub)
        ra = run(p, fidx, a["args"], a["memories"], a["globals"], fuel=fuel)
        if inp.has_secrets:
            rb = run(p, fidx, b["args"], b["memories"], b["globals"], fuel=fuel)
            tb = rb.trace
        else:
            tb = ra.trace
        d = first_divergence(ra.trace, tb)
        keep = keep_traces or d is not None
        out.append(TracePair(a, b, ra.trace if keep else None, tb if keep else None, d))
        if stop_at_first and d is not None:
            break
    return out


def divergences(pairs) -> list:
    return [tp for tp in pairs if tp.diverged]
