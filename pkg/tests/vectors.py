"""Reference implementations and runners for the functional test vectors.

The references are written straight from the algorithm descriptions and do
not share code with the compiler; SHA-256 is checked against hashlib.
"""

from __future__ import annotations

import hashlib
import struct

from ctwasm import corpus
from ctwasm.oracle.machine import run
from ctwasm.pipeline import compile_source

M32 = 0xFFFFFFFF

# published vectors
TEA_ZERO = ((0, 0), (0, 0, 0, 0), (0x41EA3A0A, 0x94BAA940))
SALSA_IN = bytes([
    211, 159, 13, 115, 76, 55, 82, 183, 3, 117, 222, 37, 191, 187, 234, 136,
    49, 237, 179, 48, 1, 106, 178, 219, 175, 199, 166, 48, 86, 16, 179, 207,
    31, 240, 32, 63, 15, 83, 93, 161, 116, 147, 48, 113, 238, 55, 204, 36,
    79, 201, 235, 79, 3, 81, 156, 47, 203, 26, 244, 243, 88, 118, 104, 54])
SALSA_OUT = bytes([
    109, 42, 178, 168, 156, 240, 248, 238, 168, 196, 190, 203, 26, 110, 170, 154,
    29, 29, 150, 26, 150, 30, 235, 249, 190, 163, 251, 48, 69, 144, 51, 57,
    118, 40, 152, 157, 180, 57, 27, 94, 107, 42, 236, 35, 27, 111, 114, 114,
    219, 236, 232, 135, 111, 155, 110, 18, 24, 232, 95, 158, 179, 19, 48, 202])
SHA_ABC = b"abc"
SHA_448 = b"abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq"


def tea_encrypt(v, k):
    v0, v1 = v
    s, delta = 0, 0x9E3779B9
    for _ in range(32):
        s = (s + delta) & M32
        v0 = (v0 + ((((v1 << 4) & M32) + k[0]) ^ (v1 + s) ^ ((v1 >> 5) + k[1]))) & M32
        v1 = (v1 + ((((v0 << 4) & M32) + k[2]) ^ (v0 + s) ^ ((v0 >> 5) + k[3]))) & M32
    return v0, v1


def tea_decrypt(v, k):
    v0, v1 = v
    delta = 0x9E3779B9
    s = (delta * 32) & M32
    for _ in range(32):
        v1 = (v1 - ((((v0 << 4) & M32) + k[2]) ^ (v0 + s) ^ ((v0 >> 5) + k[3]))) & M32
        v0 = (v0 - ((((v1 << 4) & M32) + k[0]) ^ (v1 + s) ^ ((v1 >> 5) + k[1]))) & M32
        s = (s - delta) & M32
    return v0, v1


def _rotl(x, n):
    return ((x << n) | (x >> (32 - n))) & M32


def salsa20_core(block: bytes) -> bytes:
    x = list(struct.unpack("<16I", block))
    z = list(x)

    def qr(a, b, c, d):
        z[b] ^= _rotl((z[a] + z[d]) & M32, 7)
        z[c] ^= _rotl((z[b] + z[a]) & M32, 9)
        z[d] ^= _rotl((z[c] + z[b]) & M32, 13)
        z[a] ^= _rotl((z[d] + z[c]) & M32, 18)

    for _ in range(10):
        qr(0, 4, 8, 12), qr(5, 9, 13, 1), qr(10, 14, 2, 6), qr(15, 3, 7, 11)
        qr(0, 1, 2, 3), qr(5, 6, 7, 4), qr(10, 11, 8, 9), qr(15, 12, 13, 14)
    return struct.pack("<16I", *[(a + b) & M32 for a, b in zip(x, z)])


# -- running the compiled corpus ------------------------------------------------------

def _mem(res, k):
    return bytes(res.state.memory.by_name(f"mem{k}").buf)


def _program(name, opt="speed", plain=False):
    return compile_source(corpus.source(name), opt=opt, dit=not plain).program


def run_tea(v, k, opt="speed", decrypt=False, plain=False):
    p = _program("tea", opt, plain)
    buf = bytearray(64)
    struct.pack_into("<2I", buf, 0, *v)
    struct.pack_into("<4I", buf, 16, *k)
    entry = "$decrypt" if decrypt else "$encrypt"
    res = run(p, entry, [0, 16], memories=[bytes(buf)])
    assert res.trap is None, res.trap
    return struct.unpack_from("<2I", _mem(res, 0), 0)


def run_salsa(block: bytes, opt="speed", plain=False):
    p = _program("salsa20", opt, plain)
    res = run(p, "$core", [0, 128], memories=[block])
    assert res.trap is None, res.trap
    return _mem(res, 0)[128:192]


MSG_AT = 1024


def run_sha256(msg: bytes, opt="speed", plain=False):
    p = _program("sha256", opt, plain)
    mem = bytearray(4096)
    mem[MSG_AT:MSG_AT + len(msg)] = msg
    res = run(p, "$sha256", [MSG_AT, len(msg)], memories=[None, bytes(mem)])
    assert res.trap is None, res.trap
    return _mem(res, 1)[512:544]


def sha256_ref(msg: bytes) -> bytes:
    return hashlib.sha256(msg).digest()
