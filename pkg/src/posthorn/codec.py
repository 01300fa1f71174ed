"""Slot format, inner-message grammar, and onion construction.

Wire grammar of a decrypted layer (all integers big-endian)::

    TO_NODE      0x01 | ack digest (32) | url len (2) | url | body
    TO_NODE_NOACK 0x05 | url len (2) | url | body
    TO_MAILBOX   0x02 | mailbox id (16) | body
    GET          0x03 | mailbox id (16)
    PAYLOAD      0x04 | body

A Slot is ``u16 length | content | random fill`` and always SLOT_SIZE bytes.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from . import crypto
from .crypto import DIGEST_SIZE, SLOT_SIZE, PublicKey, SizeError

MAILBOX_BYTES = 16
MAX_HOPS = 4
SLOT_CAPACITY = SLOT_SIZE - 2


class CodecError(ValueError):
    pass


class ParseError(CodecError):
    pass


class PathError(CodecError):
    pass


class Kind(enum.Enum):
    TO_NODE = 1
    TO_MAILBOX = 2
    GET = 3
    PAYLOAD = 4


_TAG_TO_NODE = 0x01
_TAG_TO_MAILBOX = 0x02
_TAG_GET = 0x03
_TAG_PAYLOAD = 0x04
_TAG_TO_NODE_NOACK = 0x05


@dataclass(frozen=True)
class InnerMessage:
    kind: Kind
    body: bytes = b""
    next_hop: str | None = None
    mailbox: bytes | None = None
    expected_ack: bytes | None = None

    def __post_init__(self):
        if self.kind is Kind.TO_NODE and not self.next_hop:
            raise CodecError("TO_NODE needs a next hop")
        if self.kind in (Kind.TO_MAILBOX, Kind.GET):
            if self.mailbox is None or len(self.mailbox) != MAILBOX_BYTES:
                raise CodecError("mailbox ids are exactly 128 bits")
        if self.expected_ack is not None:
            if self.kind is not Kind.TO_NODE:
                raise CodecError("only TO_NODE carries an Ack header")
            if len(self.expected_ack) != DIGEST_SIZE:
                raise CodecError("ack digest must be 32 bytes")
        if self.kind is Kind.GET and self.body:
            raise CodecError("GET has no body")


@dataclass
class OnionPlan:
    first_hop: str
    first_slot: bytes
    per_hop_acks: list[tuple[str, bytes]] = field(default_factory=list)


def mailbox_id(value: int | bytes | str) -> bytes:
    """Normalize an int, 16 raw bytes, or 32 hex chars to a mailbox id."""
    if isinstance(value, int):
        if not 0 <= value < 1 << 128:
            raise CodecError("mailbox id out of range")
        return value.to_bytes(MAILBOX_BYTES, "big")
    if isinstance(value, str):
        try:
            value = bytes.fromhex(value)
        except ValueError:
            raise CodecError("mailbox id is not hex") from None
    if len(value) != MAILBOX_BYTES:
        raise CodecError("mailbox ids are exactly 128 bits")
    return bytes(value)


# --------------------------------------------------------------------------
# Slots


def pad_to_slot(payload: bytes, rng=None) -> bytes:
    if len(payload) > SLOT_CAPACITY:
        raise SizeError(f"payload of {len(payload)} bytes exceeds slot capacity {SLOT_CAPACITY}")
    fill = SLOT_CAPACITY - len(payload)
    tail = crypto._rng(rng).randbytes(fill) if fill else b""
    return struct.pack(">H", len(payload)) + payload + tail


def unpad(slot: bytes) -> bytes | None:
    """Inverse of ``pad_to_slot``; ``None`` if the length prefix is impossible."""
    if len(slot) != SLOT_SIZE:
        return None
    (n,) = struct.unpack(">H", slot[:2])
    if n > SLOT_CAPACITY:
        return None
    return slot[2: 2 + n]


def random_slot(rng=None) -> bytes:
    return crypto._rng(rng).randbytes(SLOT_SIZE)


def make_ack(dig: bytes, rng=None) -> bytes:
    if len(dig) != DIGEST_SIZE:
        raise CodecError("ack digest must be 32 bytes")
    return dig + crypto._rng(rng).randbytes(SLOT_SIZE - DIGEST_SIZE)


def refresh_ack(slot: bytes, rng=None) -> bytes:
    """Same ACK, new random tail."""
    return make_ack(slot[:DIGEST_SIZE], rng)


# --------------------------------------------------------------------------
# Inner messages


def encode_inner(msg: InnerMessage) -> bytes:
    if msg.kind is Kind.TO_NODE:
        url = msg.next_hop.encode("utf-8")
        if len(url) > 0xFFFF:
            raise CodecError("next hop URL too long")
        head = struct.pack(">H", len(url)) + url
        if msg.expected_ack is None:
            return bytes([_TAG_TO_NODE_NOACK]) + head + msg.body
        return bytes([_TAG_TO_NODE]) + msg.expected_ack + head + msg.body
    if msg.kind is Kind.TO_MAILBOX:
        return bytes([_TAG_TO_MAILBOX]) + msg.mailbox + msg.body
    if msg.kind is Kind.GET:
        return bytes([_TAG_GET]) + msg.mailbox
    return bytes([_TAG_PAYLOAD]) + msg.body


def header_size(msg_kind: Kind, next_hop: str | None = None, ack: bool = True) -> int:
    if msg_kind is Kind.TO_NODE:
        return 1 + (DIGEST_SIZE if ack else 0) + 2 + len(next_hop.encode("utf-8"))
    if msg_kind in (Kind.TO_MAILBOX, Kind.GET):
        return 1 + MAILBOX_BYTES
    return 1


def _parse_url(data: bytes, off: int) -> tuple[str, int]:
    if len(data) < off + 2:
        raise ParseError("truncated address length")
    (n,) = struct.unpack(">H", data[off: off + 2])
    if n == 0 or len(data) < off + 2 + n:
        raise ParseError("truncated address")
    try:
        url = data[off + 2: off + 2 + n].decode("ascii")
    except UnicodeDecodeError:
        raise ParseError("address is not ASCII") from None
    if "://" not in url:
        raise ParseError("address is not a URL")
    return url, off + 2 + n


def parse_inner(plaintext: bytes) -> InnerMessage:
    if not plaintext:
        raise ParseError("empty plaintext")
    tag = plaintext[0]
    if tag == _TAG_TO_NODE:
        if len(plaintext) < 1 + DIGEST_SIZE:
            raise ParseError("truncated ack header")
        ack = plaintext[1: 1 + DIGEST_SIZE]
        url, off = _parse_url(plaintext, 1 + DIGEST_SIZE)
        return InnerMessage(Kind.TO_NODE, plaintext[off:], next_hop=url, expected_ack=ack)
    if tag == _TAG_TO_NODE_NOACK:
        url, off = _parse_url(plaintext, 1)
        return InnerMessage(Kind.TO_NODE, plaintext[off:], next_hop=url)
    if tag in (_TAG_TO_MAILBOX, _TAG_GET):
        if len(plaintext) < 1 + MAILBOX_BYTES:
            raise ParseError("bad mailbox length")
        box = plaintext[1: 1 + MAILBOX_BYTES]
        rest = plaintext[1 + MAILBOX_BYTES:]
        if tag == _TAG_GET:
            if rest:
                raise ParseError("trailing bytes after GET header")
            return InnerMessage(Kind.GET, mailbox=box)
        return InnerMessage(Kind.TO_MAILBOX, rest, mailbox=box)
    if tag == _TAG_PAYLOAD:
        return InnerMessage(Kind.PAYLOAD, plaintext[1:])
    raise ParseError(f"unknown kind tag 0x{tag:02x}")


# --------------------------------------------------------------------------
# Onions


def _check_path(path) -> None:
    if not path:
        raise PathError("empty path")
    if len(path) > MAX_HOPS:
        raise PathError(f"path of {len(path)} hops exceeds MAX_HOPS={MAX_HOPS}")
    for (a, _), (b, _) in zip(path, path[1:]):
        if a == b:
            raise PathError(f"consecutive hops to the same node {a}")


def max_payload(path: list[tuple[str, PublicKey]], acks: bool = True) -> int:
    """Largest payload ``build_onion`` accepts for ``path``.

    For the byte suites this is
    ``SLOT_SIZE - 2 - sum(header_i + overhead)`` over the hops.
    """
    _check_path(path)
    budget = SLOT_CAPACITY
    for i, (_, pk) in enumerate(path):
        pt = crypto.max_plaintext(pk, budget)
        if i + 1 < len(path):
            pt -= header_size(Kind.TO_NODE, path[i + 1][0], ack=acks)
        else:
            pt -= header_size(Kind.TO_MAILBOX)
        if pt < 0:
            return -1
        budget = pt
    return budget


def build_onion(
    payload: bytes,
    path: list[tuple[str, PublicKey]],
    final_mailbox: bytes,
    rng=None,
    acks: bool = True,
) -> OnionPlan:
    """Wrap ``payload`` for delivery to ``final_mailbox`` on the last node.

    ``path[0]`` is the first hop.  With ``acks`` each forwarding layer tells
    its node which digest the next node will send back.
    """
    _check_path(path)
    limit = max_payload(path, acks)
    if len(payload) > limit:
        raise SizeError(f"payload of {len(payload)} bytes exceeds {limit} for {len(path)} hops")
    final_mailbox = mailbox_id(final_mailbox)
    plaintext = encode_inner(InnerMessage(Kind.TO_MAILBOX, payload, mailbox=final_mailbox))
    acks_rev: list[tuple[str, bytes]] = []
    for i in range(len(path) - 1, -1, -1):
        url, pk = path[i]
        ct = crypto.encrypt(pk, plaintext, rng)
        if i == 0:
            break
        prev_url = path[i - 1][0]
        ack = crypto.digest(plaintext) if acks else None
        if acks:
            acks_rev.append((prev_url, ack))
        plaintext = encode_inner(InnerMessage(Kind.TO_NODE, ct, next_hop=url, expected_ack=ack))
    return OnionPlan(path[0][0], pad_to_slot(ct, rng), list(reversed(acks_rev)))


def build_get(mailbox: bytes | int | str, node_pk: PublicKey, rng=None) -> bytes:
    pt = encode_inner(InnerMessage(Kind.GET, mailbox=mailbox_id(mailbox)))
    return pad_to_slot(crypto.encrypt(node_pk, pt, rng), rng)


# --------------------------------------------------------------------------
# Hex-dump fixtures


def hexdump(slot: bytes) -> str:
    h = slot.hex()
    return "\n".join(h[i: i + 64] for i in range(0, len(h), 64)) + "\n"


def from_hexdump(text: str) -> bytes:
    return bytes.fromhex("".join(text.split()))
