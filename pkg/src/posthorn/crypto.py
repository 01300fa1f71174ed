"""Public-key suites, the ACK hash, and ElGamal universal re-encryption.

Three suites share one interface (``keygen`` / ``encrypt`` / ``decrypt``):

``TEST``
    Keyed stream + HMAC framing.  Fast and reproducible; *not* confidential
    (the public key is enough to decrypt).  Meant for unit tests only.
``HYBRID``
    X25519 ephemeral key agreement, HKDF-SHA256, ChaCha20-Poly1305.
``URE``
    ElGamal universal re-encryption over a safe-prime group, applied to
    byte strings chunk by chunk.  Ciphertexts can be re-randomized by
    anyone without the public key.

All randomness comes from an explicit ``random.Random``-like source so that
whole simulations replay bit-for-bit from a seed.  Pass ``None`` to use the
operating system's CSPRNG.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import random
import struct
from dataclasses import dataclass
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

try:
    from gmpy2 import powmod as _gmp_powmod

    def powmod(base: int, exp: int, mod: int) -> int:
        return int(_gmp_powmod(base, exp, mod))

except ImportError:  # pragma: no cover
    powmod = pow

SLOT_SIZE = 4096
DIGEST_SIZE = 32

_sysrandom = random.SystemRandom()


class CryptoError(Exception):
    pass


class UnsupportedSuiteError(CryptoError):
    pass


class SizeError(CryptoError, ValueError):
    pass


class DomainError(CryptoError, ValueError):
    pass


class Suite(enum.IntEnum):
    TEST = 1
    HYBRID = 2
    URE = 3


def _rng(rng):
    return _sysrandom if rng is None else rng


def digest(m: bytes) -> bytes:
    """SHA-256 of ``m``; the value carried in ACK slots and Ack headers."""
    return hashlib.sha256(m).digest()


# --------------------------------------------------------------------------
# Groups for universal re-encryption


@dataclass(frozen=True)
class UreGroup:
    name: str
    ident: int
    p: int
    g: int
    order: int

    @property
    def element_bytes(self) -> int:
        return (self.p.bit_length() + 7) // 8

    @property
    def safe_prime(self) -> bool:
        return self.order == (self.p - 1) // 2

    def contains(self, e: int) -> bool:
        if not 0 < e < self.p:
            return False
        if self.order == self.p - 1:
            return True
        return powmod(e, self.order, self.p) == 1

    def random_exponent(self, rng=None) -> int:
        return _rng(rng).randrange(1, self.order)


_MODP2048 = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05"
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB"
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF",
    16,
)
_MODP1024 = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE65381FFFFFFFFFFFFFFFF",
    16,
)
# 256-bit safe prime; large enough that components never collide by chance,
# small enough for statistical tests with 10^4 re-encryptions.
_TEST256 = 0x800000000000020000000000000000000000000000000000000000000000551B

TOY23 = UreGroup("toy23", 0, 23, 5, 22)
TEST256 = UreGroup("test256", 1, _TEST256, 4, (_TEST256 - 1) // 2)
MODP1024 = UreGroup("modp1024", 2, _MODP1024, 2, (_MODP1024 - 1) // 2)
MODP2048 = UreGroup("modp2048", 3, _MODP2048, 2, (_MODP2048 - 1) // 2)

GROUPS = {g.ident: g for g in (TOY23, TEST256, MODP1024, MODP2048)}
GROUPS_BY_NAME = {g.name: g for g in GROUPS.values()}


# --------------------------------------------------------------------------
# Keys


@dataclass(frozen=True)
class PublicKey:
    suite: Suite
    key: bytes


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    secret_key: bytes
    suite: Suite

    def public(self) -> PublicKey:
        return PublicKey(self.suite, self.public_key)


def _int_to_bytes(v: int, n: int) -> bytes:
    return v.to_bytes(n, "big")


def ure_group_of(key: bytes) -> UreGroup:
    try:
        return GROUPS[key[0]]
    except (IndexError, KeyError):
        raise DomainError("unknown URE group") from None


def keygen(suite: Suite | int, seed: int, group: UreGroup = MODP2048) -> KeyPair:
    """Derive a key pair deterministically from ``seed``.

    ``group`` only matters for the URE suite.
    """
    try:
        suite = Suite(suite)
    except ValueError:
        raise UnsupportedSuiteError(f"unsupported suite: {suite!r}") from None
    rng = random.Random(f"posthorn-keygen/{int(suite)}/{seed}")
    if suite is Suite.TEST:
        sk = rng.randbytes(32)
        return KeyPair(_test_public(sk), sk, suite)
    if suite is Suite.HYBRID:
        priv = X25519PrivateKey.from_private_bytes(rng.randbytes(32))
        return KeyPair(priv.public_key().public_bytes_raw(), priv.private_bytes_raw(), suite)
    x = group.random_exponent(rng)
    y = powmod(group.g, x, group.p)
    n = group.element_bytes
    return KeyPair(
        bytes([group.ident]) + _int_to_bytes(y, n),
        bytes([group.ident]) + _int_to_bytes(x, n),
        suite,
    )


def ure_keys(kp: KeyPair) -> tuple[UreGroup, int, int]:
    """(group, x, y) of a URE key pair."""
    group = ure_group_of(kp.public_key)
    return group, int.from_bytes(kp.secret_key[1:], "big"), int.from_bytes(kp.public_key[1:], "big")


# --------------------------------------------------------------------------
# Byte-string encryption

TEST_OVERHEAD = 96  # 32-byte nonce + 64-byte HMAC-SHA512 tag
HYBRID_OVERHEAD = 60  # 32-byte ephemeral key + 12-byte nonce + 16-byte tag


def _test_public(sk: bytes) -> bytes:
    return hashlib.sha256(b"posthorn-test-pk" + sk).digest()


def _test_stream(pk: bytes, nonce: bytes, n: int) -> bytes:
    return hashlib.shake_256(pk + nonce).digest(n)


def _xor(a: bytes, b: bytes) -> bytes:
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(len(a), "big")


def _hybrid_key(shared: bytes, eph: bytes, recipient: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(),
        length=32,
        salt=None,
        info=b"posthorn-hybrid" + eph + recipient,
    ).derive(shared)


def overhead(suite: Suite) -> int:
    """Fixed ciphertext expansion of a byte suite."""
    if suite is Suite.TEST:
        return TEST_OVERHEAD
    if suite is Suite.HYBRID:
        return HYBRID_OVERHEAD
    raise UnsupportedSuiteError("URE expansion is not a constant; use ciphertext_length")


def ciphertext_length(pk: PublicKey, n: int) -> int:
    if pk.suite is Suite.URE:
        group = ure_group_of(pk.key)
        chunk = group.element_bytes - 1
        return -(-(n + 2) // chunk) * 4 * group.element_bytes
    return n + overhead(pk.suite)


def max_plaintext(pk: PublicKey, budget: int = SLOT_SIZE) -> int:
    """Largest plaintext whose ciphertext fits in ``budget`` bytes (-1 if none)."""
    if pk.suite is Suite.URE:
        group = ure_group_of(pk.key)
        chunks = budget // (4 * group.element_bytes)
        return min(chunks * (group.element_bytes - 1) - 2, 0xFFFF) if chunks else -1
    return budget - overhead(pk.suite)


def encrypt(pk: PublicKey, m: bytes, rng=None) -> bytes:
    """Probabilistic encryption of ``m`` for ``pk``."""
    if len(m) > max_plaintext(pk):
        raise SizeError(f"plaintext of {len(m)} bytes exceeds suite limit {max_plaintext(pk)}")
    rng = _rng(rng)
    if pk.suite is Suite.TEST:
        nonce = rng.randbytes(32)
        body = _xor(m, _test_stream(pk.key, nonce, len(m)))
        tag = hmac.new(pk.key, nonce + body, hashlib.sha512).digest()
        return nonce + body + tag
    if pk.suite is Suite.HYBRID:
        eph = X25519PrivateKey.from_private_bytes(rng.randbytes(32))
        eph_pub = eph.public_key().public_bytes_raw()
        shared = eph.exchange(X25519PublicKey.from_public_bytes(pk.key))
        nonce = rng.randbytes(12)
        key = _hybrid_key(shared, eph_pub, pk.key)
        return eph_pub + nonce + ChaCha20Poly1305(key).encrypt(nonce, m, None)
    if pk.suite is Suite.URE:
        group = ure_group_of(pk.key)
        return ure_encrypt_bytes(group, int.from_bytes(pk.key[1:], "big"), m, rng)
    raise UnsupportedSuiteError(pk.suite)


def decrypt(kp: KeyPair, c: bytes) -> bytes | None:
    """Return the plaintext, or ``None`` if ``c`` was not made for this key."""
    if kp.suite is Suite.TEST:
        if len(c) < TEST_OVERHEAD:
            return None
        nonce, body, tag = c[:32], c[32:-64], c[-64:]
        want = hmac.new(kp.public_key, nonce + body, hashlib.sha512).digest()
        if not hmac.compare_digest(tag, want):
            return None
        return _xor(body, _test_stream(kp.public_key, nonce, len(body)))
    if kp.suite is Suite.HYBRID:
        if len(c) < HYBRID_OVERHEAD:
            return None
        eph_pub, nonce, body = c[:32], c[32:44], c[44:]
        try:
            priv = X25519PrivateKey.from_private_bytes(kp.secret_key)
            shared = priv.exchange(X25519PublicKey.from_public_bytes(eph_pub))
            key = _hybrid_key(shared, eph_pub, kp.public_key)
            return ChaCha20Poly1305(key).decrypt(nonce, body, None)
        except (InvalidTag, ValueError):
            return None
    if kp.suite is Suite.URE:
        group, x, _ = ure_keys(kp)
        return ure_decrypt_bytes(group, x, c)
    raise UnsupportedSuiteError(kp.suite)


# --------------------------------------------------------------------------
# Universal re-encryption


@dataclass(frozen=True)
class UreCiphertext:
    a0: int
    b0: int
    a1: int
    b1: int

    def components(self) -> tuple[int, int, int, int]:
        return (self.a0, self.b0, self.a1, self.b1)


def _check_element(group: UreGroup, e: int, what: str) -> None:
    if not group.contains(e):
        raise DomainError(f"{what} is not an element of group {group.name}")


def ure_encrypt(group: UreGroup, y: int, m: int, rng=None, k: tuple[int, int] | None = None) -> UreCiphertext:
    """Encrypt group element ``m`` under public key ``y``.

    ``(a0, b0) = (m*y^k0, g^k0)`` and ``(a1, b1) = (y^k1, g^k1)``; the second
    pair is an encryption of the identity that later lets anyone re-randomize.
    """
    _check_element(group, m, "plaintext")
    _check_element(group, y, "public key")
    if k is None:
        k = (group.random_exponent(rng), group.random_exponent(rng))
    k0, k1 = k
    p = group.p
    return UreCiphertext(
        m * powmod(y, k0, p) % p,
        powmod(group.g, k0, p),
        powmod(y, k1, p),
        powmod(group.g, k1, p),
    )


def ure_reencrypt(group: UreGroup, c: UreCiphertext, rng=None, k: tuple[int, int] | None = None) -> UreCiphertext:
    """Re-randomize ``c`` without any key material."""
    for e in c.components():
        _check_element(group, e, "ciphertext component")
    if k is None:
        k = (group.random_exponent(rng), group.random_exponent(rng))
    k0, k1 = k
    p = group.p
    return UreCiphertext(
        c.a0 * powmod(c.a1, k0, p) % p,
        c.b0 * powmod(c.b1, k0, p) % p,
        powmod(c.a1, k1, p),
        powmod(c.b1, k1, p),
    )


def ure_decrypt(group: UreGroup, x: int, c: UreCiphertext) -> int | None:
    p = group.p
    if not all(0 < e < p for e in c.components()):
        return None
    if c.a1 * pow(powmod(c.b1, x, p), -1, p) % p != 1:
        return None
    return c.a0 * pow(powmod(c.b0, x, p), -1, p) % p


# Byte strings ride on URE chunk by chunk.  A chunk of (element_bytes - 1)
# bytes maps to v in [1, q]; v or p - v is a quadratic residue since
# p = 3 mod 4 makes -1 a non-residue.


def encode_element(group: UreGroup, chunk: bytes) -> int:
    if not group.safe_prime:
        raise DomainError(f"group {group.name} cannot carry byte strings")
    if len(chunk) > group.element_bytes - 1:
        raise SizeError("chunk too large for group")
    v = int.from_bytes(chunk, "big") + 1
    return v if powmod(v, group.order, group.p) == 1 else group.p - v


def decode_element(group: UreGroup, e: int, n: int) -> bytes:
    v = e if e <= group.order else group.p - e
    return (v - 1).to_bytes(n, "big")


def _tuple_bytes(group: UreGroup, c: UreCiphertext) -> bytes:
    n = group.element_bytes
    return b"".join(_int_to_bytes(e, n) for e in c.components())


def _split_tuples(group: UreGroup, data: bytes) -> list[UreCiphertext] | None:
    n = group.element_bytes
    if not data or len(data) % (4 * n):
        return None
    out = []
    for off in range(0, len(data), 4 * n):
        vals = [int.from_bytes(data[off + i * n: off + (i + 1) * n], "big") for i in range(4)]
        out.append(UreCiphertext(*vals))
    return out


def ure_encrypt_bytes(group: UreGroup, y: int, m: bytes, rng=None) -> bytes:
    chunk = group.element_bytes - 1
    framed = struct.pack(">H", len(m)) + m
    framed += bytes(-len(framed) % chunk)
    parts = []
    for off in range(0, len(framed), chunk):
        e = encode_element(group, framed[off: off + chunk])
        parts.append(_tuple_bytes(group, ure_encrypt(group, y, e, rng)))
    return b"".join(parts)


def ure_decrypt_bytes(group: UreGroup, x: int, c: bytes) -> bytes | None:
    tuples = _split_tuples(group, c)
    if tuples is None:
        return None
    chunk = group.element_bytes - 1
    framed = bytearray()
    for t in tuples:
        e = ure_decrypt(group, x, t)
        if e is None or not group.contains(e):
            return None
        v = e if e <= group.order else group.p - e
        if v - 1 >= 1 << (8 * chunk):
            return None
        framed += decode_element(group, e, chunk)
    (n,) = struct.unpack(">H", framed[:2])
    if n > len(framed) - 2:
        return None
    return bytes(framed[2: 2 + n])


def ure_reencrypt_bytes(group: UreGroup, c: bytes, rng=None) -> bytes:
    """Re-randomize every tuple of a byte-string URE ciphertext."""
    tuples = _split_tuples(group, c)
    if tuples is None:
        raise DomainError("not a URE byte ciphertext")
    return b"".join(_tuple_bytes(group, ure_reencrypt(group, t, rng)) for t in tuples)


# --------------------------------------------------------------------------
# Key files: suite tag || u16 len || public || u16 len || secret


def dump_key(kp: KeyPair | PublicKey) -> bytes:
    if isinstance(kp, PublicKey):
        suite, pub, sec = kp.suite, kp.key, b""
    else:
        suite, pub, sec = kp.suite, kp.public_key, kp.secret_key
    return bytes([int(suite)]) + struct.pack(">H", len(pub)) + pub + struct.pack(">H", len(sec)) + sec


def load_key(data: bytes) -> KeyPair | PublicKey:
    """Parse a key file; a zero-length secret yields a bare ``PublicKey``."""
    try:
        suite = Suite(data[0])
        (npub,) = struct.unpack(">H", data[1:3])
        pub = data[3: 3 + npub]
        (nsec,) = struct.unpack(">H", data[3 + npub: 5 + npub])
        sec = data[5 + npub: 5 + npub + nsec]
    except (IndexError, ValueError, struct.error):
        raise CryptoError("malformed key file") from None
    if len(pub) != npub or len(sec) != nsec or len(data) != 5 + npub + nsec:
        raise CryptoError("malformed key file")
    if not sec:
        return PublicKey(suite, pub)
    return KeyPair(pub, sec, suite)


def write_keyfile(path: str | Path, kp: KeyPair | PublicKey) -> None:
    Path(path).write_bytes(dump_key(kp))


def read_keyfile(path: str | Path) -> KeyPair | PublicKey:
    return load_key(Path(path).read_bytes())
