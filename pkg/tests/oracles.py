"""Independent reference computations.

Nothing here imports the code under test except where a primitive is the
point of comparison (decryption in the peel script).  Parsing, modular
arithmetic and counting are written out longhand.
"""

from __future__ import annotations

import hashlib
import math
import struct
from urllib.parse import urlsplit

# -- modular arithmetic --------------------------------------------------------


def modexp(base: int, exp: int, mod: int) -> int:
    """Right-to-left square-and-multiply; no use of pow()."""
    result, base = 1, base % mod
    while exp:
        if exp & 1:
            result = result * base % mod
        base = base * base % mod
        exp >>= 1
    return result


def modinv(a: int, p: int) -> int:
    """Inverse via the extended Euclidean algorithm."""
    r0, r1, s0, s1 = p, a % p, 0, 1
    while r1:
        q = r0 // r1
        r0, r1, s0, s1 = r1, r0 - q * r1, s1, s0 - q * s1
    if r0 != 1:
        raise ValueError("not invertible")
    return s0 % p


def ure_tuple(p: int, g: int, y: int, m: int, k0: int, k1: int) -> tuple[int, int, int, int]:
    return (m * modexp(y, k0, p) % p, modexp(g, k0, p), modexp(y, k1, p), modexp(g, k1, p))


def ure_open(p: int, x: int, c: tuple[int, int, int, int]) -> int | None:
    a0, b0, a1, b1 = c
    if a1 * modinv(modexp(b1, x, p), p) % p != 1:
        return None
    return a0 * modinv(modexp(b0, x, p), p) % p


# The small worked example, by hand: p=23, g=5, x=6.
#   y  = 5^6 = (5^2)^3 = 2^3 = 8
#   a0 = 2 * 8^3 = 2 * 512 = 2 * 6 = 12   (512 = 22*23 + 6)
#   b0 = 5^3 = 125 = 10                   (125 = 5*23 + 10)
#   a1 = 8^4 = 6 * 8 = 48 = 2
#   b1 = 5^4 = 625 = 4                    (625 = 27*23 + 4)
TOY = {"p": 23, "g": 5, "x": 6, "y": 8, "m": 2, "k0": 3, "k1": 4, "c": (12, 10, 2, 4)}


# -- onion peeling -----------------------------------------------------------


def unpad(slot: bytes) -> bytes:
    (n,) = struct.unpack(">H", slot[:2])
    assert n <= len(slot) - 2
    return slot[2: 2 + n]


def parse_layer(pt: bytes) -> dict:
    """Wire grammar: tag byte, then per-kind fields."""
    tag = pt[0]
    if tag == 0x01:
        ack = pt[1:33]
        (n,) = struct.unpack(">H", pt[33:35])
        return {"kind": "TO_NODE", "ack": ack, "next": pt[35: 35 + n].decode(), "body": pt[35 + n:]}
    if tag == 0x05:
        (n,) = struct.unpack(">H", pt[1:3])
        return {"kind": "TO_NODE", "ack": None, "next": pt[3: 3 + n].decode(), "body": pt[3 + n:]}
    if tag == 0x02:
        return {"kind": "TO_MAILBOX", "mailbox": pt[1:17], "body": pt[17:]}
    if tag == 0x03:
        return {"kind": "GET", "mailbox": pt[1:17], "body": pt[17:]}
    raise AssertionError(f"unexpected tag {tag}")


def peel(first_slot: bytes, keypairs: list, decrypt) -> list[tuple[bytes, dict]]:
    """Decrypt layer by layer with the given keys; returns (plaintext, parsed) per hop."""
    layers = []
    ct = unpad(first_slot)
    for kp in keypairs:
        pt = decrypt(kp, ct)
        assert pt is not None, "layer failed to decrypt"
        parsed = parse_layer(pt)
        layers.append((pt, parsed))
        ct = parsed["body"]
    return layers


def sha256(b: bytes) -> bytes:
    return hashlib.sha256(b).digest()


# -- channel arithmetic ---------------------------------------------------------

_UNRESERVED = set(b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-._~")


def url_encoded_length(payload: bytes) -> int:
    return sum(1 if b in _UNRESERVED else 3 for b in payload)


def transport_length(n: int) -> int:
    """Unpadded 6-bit encoding: every 3 bytes become 4 characters."""
    return math.ceil(n * 4 / 3)


def cookies_needed(n: int, value_limit: int = 4096) -> int:
    return math.ceil(transport_length(n) / value_limit)


# 20 hand-classified cookie domains.  Two-letter TLD needs three dots, a
# longer TLD needs two, anything else is rejected.
DOMAIN_FIXTURES = [
    (".dyndns.org", True),
    (".foo.co.uk", True),
    (".org", False),
    ("dyndns.org", False),
    (".example.com", True),
    (".a.b.com", True),
    (".co.uk", False),
    ("foo.co.uk", False),
    (".a.b.c.de", True),
    (".ab.de", False),
    (".x.y.de", True),
    (".mix.museum", True),
    (".museum", False),
    (".node.example.info", True),
    ("a.b.info", True),
    ("", False),
    (".", False),
    (".foo.x", False),
    ("..de", False),
    (".host.1", False),
]


# -- trace scans ---------------------------------------------------------------------


def clients_contacting(events, host: str, start: int, end: int) -> set[str]:
    """Every client with any request to ``host`` in [start, end]."""
    out = set()
    for e in events:
        if start <= e.tick <= end and urlsplit(e.url).hostname == host:
            out.add(e.client_id)
    return out


def chi_square(counts: list[int]) -> float:
    n = sum(counts)
    exp = n / len(counts)
    return sum((c - exp) ** 2 / exp for c in counts)
