"""Bundled dialect sources: the crypto corpus and a few small snippets."""

from __future__ import annotations

from importlib import resources

CRYPTO = ("sha256", "tea", "salsa20")


def names() -> list:
    files = resources.files(__name__).joinpath("wat")
    return sorted(p.name[:-4] for p in files.iterdir() if p.name.endswith(".wat"))


def source(name: str) -> str:
    return resources.files(__name__).joinpath("wat", f"{name}.wat").read_text(encoding="utf-8")


def _headers(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.startswith(";;"):
            break
        key, _, val = line[2:].partition(":")
        out[key.strip()] = val.strip()
    return out


def _samples(sub: str) -> list:
    files = sorted(resources.files(__name__).joinpath(sub).iterdir(), key=lambda p: p.name)
    out = []
    for p in files:
        if p.name.endswith(".wat"):
            text = p.read_text(encoding="utf-8")
            out.append((p.name[:-4], text, _headers(text)))
    return out


def leaky() -> list:
    """(name, text, headers) for programs that must be rejected; headers hold
    ``expect`` (the violation class) and ``entry``."""
    return _samples("leaky")


def rule_samples() -> list:
    """(name, text, headers) for single-rule type errors; headers hold ``rule``."""
    return _samples("rules")
