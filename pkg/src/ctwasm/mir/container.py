"""Binary container holding the machine IR and the secrecy manifest.

Layout: magic ``CTW1``, little-endian u32 version, then sections of
``(tag: u8, length: u64 LE, payload)``. Tag 0x01 is the manifest as
canonical JSON text, tag 0x02 the code (canonical JSON of the program).
Unknown tags are preserved by :func:`patch_manifest` and ignored by readers.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

from ..errors import ContainerError
from ..manifest import Manifest, canonical_json
from .core import MachineInst, MirFunction, MirProgram, PcodeOp, Varnode

MAGIC = b"CTW1"
VERSION = 1
TAG_MANIFEST = 0x01
TAG_CODE = 0x02


# -- (de)serialization of the program --------------------------------------

def _vn(v: Varnode):
    return [v.space, v.name, v.size]


def _unvn(x) -> Varnode:
    return Varnode(x[0], x[1], x[2])


def program_to_dict(p: MirProgram) -> dict:
    return {
        "call_mode": p.call_mode,
        "layout": p.layout,
        "memories": p.memories,
        "globals": p.globals,
        "data": [{"memory": d["memory"], "offset": d["offset"], "bytes": bytes(d["bytes"]).hex()} for d in p.data],
        "rodata": [[a, v] for a, v in sorted(p.rodata.items())],
        "functions": [
            {
                "name": f.name, "index": f.index, "entry": f.entry, "n_params": f.n_params,
                "param_sizes": f.param_sizes, "result_sizes": f.result_sizes,
                "frame_size": f.frame_size, "blocks": f.blocks,
                "insts": [
                    {"addr": mi.addr, "mnemonic": mi.mnemonic, "text": mi.text,
                     "flags": [_vn(v) for v in mi.flags_written],
                     "ops": [[op.opcode, _vn(op.output) if op.output is not None else None,
                              [_vn(v) for v in op.inputs], list(op.tags)] for op in mi.ops]}
                    for mi in f.insts
                ],
            }
            for f in p.functions
        ],
    }


def program_from_dict(d: dict, manifest: Manifest | None) -> MirProgram:
    try:
        funcs = []
        for fd in d.get("functions", []):
            insts = [
                MachineInst(i["addr"], i["mnemonic"],
                            [PcodeOp(o[0], _unvn(o[1]) if o[1] is not None else None,
                                     [_unvn(v) for v in o[2]], list(o[3])) for o in i["ops"]],
                            i["text"], [_unvn(v) for v in i["flags"]])
                for i in fd["insts"]
            ]
            funcs.append(MirFunction(fd["name"], fd["index"], fd["entry"], insts, fd["n_params"],
                                     fd["param_sizes"], fd["result_sizes"], fd["frame_size"], fd["blocks"]))
        return MirProgram(
            functions=funcs,
            manifest=manifest,
            layout=d.get("layout", {}),
            memories=d.get("memories", []),
            globals=d.get("globals", []),
            data=[{"memory": x["memory"], "offset": x["offset"], "bytes": bytes.fromhex(x["bytes"])}
                  for x in d.get("data", [])],
            rodata={a: v for a, v in d.get("rodata", [])},
            call_mode=d.get("call_mode", "indirect"),
        )
    except (KeyError, TypeError, IndexError, ValueError) as e:
        raise ContainerError(f"malformed code section: {e}") from e


def _is_empty(p: MirProgram) -> bool:
    return not (p.functions or p.memories or p.globals or p.data or p.rodata)


# -- byte level -------------------------------------------------------------

def encode_sections(sections) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    for tag, payload in sections:
        out.append(struct.pack("<BQ", tag, len(payload)))
        out.append(payload)
    return b"".join(out)


def decode_sections(data: bytes) -> list:
    if len(data) < 8 or data[:4] != MAGIC:
        raise ContainerError("not a container (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    pos = 8
    sections = []
    while pos < len(data):
        if pos + 9 > len(data):
            raise ContainerError("truncated section header")
        tag, length = struct.unpack_from("<BQ", data, pos)
        pos += 9
        if pos + length > len(data):
            raise ContainerError("truncated section payload")
        sections.append((tag, data[pos:pos + length]))
        pos += length
    return sections


def to_bytes(p: MirProgram) -> bytes:
    manifest = p.manifest.to_json() if p.manifest is not None else "{}"
    code = b"" if _is_empty(p) else canonical_json(program_to_dict(p)).encode()
    return encode_sections([(TAG_MANIFEST, manifest.encode()), (TAG_CODE, code)])


def from_bytes(data: bytes) -> MirProgram:
    sections = decode_sections(data)
    found = {}
    for tag, payload in sections:
        if tag in found:
            raise ContainerError(f"duplicate section {tag:#x}")
        found[tag] = payload
    if TAG_MANIFEST not in found or TAG_CODE not in found:
        raise ContainerError("container lacks a manifest or code section")
    mtext = found[TAG_MANIFEST].decode("utf-8", errors="strict")
    manifest = Manifest.from_json(mtext) if mtext != "{}" else Manifest()
    if not found[TAG_CODE]:
        return MirProgram(manifest=manifest)
    try:
        code = json.loads(found[TAG_CODE])
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ContainerError(f"code section is not valid JSON: {e}") from e
    return program_from_dict(code, manifest)


def atomic_write(path, data: bytes):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ctw-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit_container(p: MirProgram, path) -> bytes:
    data = to_bytes(p)
    atomic_write(path, data)
    return data


def read_container(path) -> MirProgram:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def read_manifest_text(data: bytes) -> str:
    for tag, payload in decode_sections(data):
        if tag == TAG_MANIFEST:
            return payload.decode()
    raise ContainerError("container lacks a manifest section")


def patch_manifest_bytes(data: bytes, manifest: Manifest) -> bytes:
    """Replace the manifest section only; every other byte is kept."""
    sections = decode_sections(data)
    if not any(t == TAG_MANIFEST for t, _ in sections):
        raise ContainerError("container lacks a manifest section")
    new = manifest.to_json().encode()
    return encode_sections([(t, new if t == TAG_MANIFEST else p) for t, p in sections])


def patch_manifest(path, manifest: Manifest, out_path=None) -> bytes:
    with open(path, "rb") as fh:
        data = fh.read()
    patched = patch_manifest_bytes(data, manifest)
    atomic_write(out_path or path, patched)
    return patched
