"""Mix node state machine.

A node owns three tables: the pool of outgoing slots, the table of ACKs it
is still waiting for, and its mailboxes.  Everything a node does is a
reaction to a client request; ``receive`` handles a POSTed slot and
``dispatch`` handles a frameset visit that carries no slot.

Mutating functions take the state explicitly and must be called serially
for any one node.
"""

from __future__ import annotations

import enum
import logging
import random
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

from . import codec, crypto
from .codec import Kind
from .crypto import DIGEST_SIZE, SLOT_SIZE, KeyPair, Suite

log = logging.getLogger(__name__)

RETRY_INTERVAL = 64
RETRY_MAX = 16
SEEN_CACHE_MAX = 1 << 16


class ProtocolError(ValueError):
    pass


class ResponseKind(enum.Enum):
    CARRY = "carry"
    FIXED_HTML = "fixed"


@dataclass(frozen=True)
class NodeResponse:
    kind: ResponseKind
    carry_slot: bytes | None = None
    carry_target: str | None = None

    @classmethod
    def fixed(cls) -> "NodeResponse":
        return cls(ResponseKind.FIXED_HTML)


FIXED = NodeResponse(ResponseKind.FIXED_HTML)


@dataclass
class NodeConfig:
    coin_bias: float = 0.5
    retry_interval: int = RETRY_INTERVAL
    retry_max: int | None = RETRY_MAX  # fire-and-forget entries only; None = unbounded
    acks: bool = True
    trickle: bool = False
    reencrypt: bool = False  # URE suite: re-randomize pooled slots before every send

    def __post_init__(self):
        if not 0.0 <= self.coin_bias <= 1.0:
            raise ValueError("coin_bias must lie in [0, 1]")
        if self.retry_interval < 0:
            raise ValueError("retry_interval must be >= 0")


@dataclass
class PoolEntry:
    id: int
    slot: bytes
    destination: str
    expected_ack: bytes | None
    entered_at: int
    retries: int = 0
    last_sent: int | None = None
    is_ack: bool = False

    def eligible(self, now: int, interval: int) -> bool:
        return self.last_sent is None or now - self.last_sent > interval


@dataclass
class AckRef:
    entry_id: int
    destination: str


@dataclass
class NodeState:
    url: str
    keypair: KeyPair
    config: NodeConfig = field(default_factory=NodeConfig)
    rng: random.Random = field(default_factory=random.Random)
    pool: list[PoolEntry] = field(default_factory=list)
    ack_table: dict[bytes, AckRef] = field(default_factory=dict)
    mailboxes: dict[bytes, list[bytes]] = field(default_factory=dict)
    peers: list[str] = field(default_factory=list)
    seen: OrderedDict = field(default_factory=OrderedDict)
    clock: int = 0
    next_id: int = 0
    decrypt_calls: int = 0

    def entry(self, entry_id: int) -> PoolEntry | None:
        for e in self.pool:
            if e.id == entry_id:
                return e
        return None

    def pending_messages(self) -> int:
        """Pooled entries that still wait for an ACK."""
        return sum(1 for e in self.pool if e.expected_ack is not None)


def new_node(url: str, keypair: KeyPair, seed: int = 0, config: NodeConfig | None = None,
             peers=()) -> NodeState:
    state = NodeState(url, keypair, config or NodeConfig(), random.Random(f"posthorn-node/{seed}"))
    if state.config.reencrypt and keypair.suite is not Suite.URE:
        raise ValueError("re-encryption of pooled slots needs a URE key pair")
    for p in peers:
        register_peer(state, p)
    return state


def register_peer(state: NodeState, url: str) -> NodeState:
    if "://" not in url:
        raise ValueError(f"not a URL: {url!r}")
    if url not in state.peers:
        state.peers.append(url)
    return state


def random_peer(state: NodeState) -> str | None:
    others = [p for p in state.peers if p != state.url]
    return state.rng.choice(others) if others else None


def _coin(state: NodeState, force: bool | None) -> bool:
    heads = state.rng.random() < state.config.coin_bias
    return heads if force is None else force


def _enqueue(state: NodeState, slot: bytes, destination: str, expected_ack: bytes | None,
             is_ack: bool = False) -> PoolEntry:
    entry = PoolEntry(state.next_id, slot, destination, expected_ack, state.clock, is_ack=is_ack)
    state.next_id += 1
    state.pool.append(entry)
    return entry


def _remove_entry(state: NodeState, entry_id: int) -> None:
    state.pool = [e for e in state.pool if e.id != entry_id]


def _rerandomize(state: NodeState, entry: PoolEntry) -> None:
    if entry.is_ack:
        entry.slot = codec.refresh_ack(entry.slot, state.rng)
        return
    group = crypto.ure_group_of(state.keypair.public_key)
    ct = codec.unpad(entry.slot)
    try:
        ct = crypto.ure_reencrypt_bytes(group, ct, state.rng)
    except (crypto.DomainError, TypeError):
        entry.slot = codec.random_slot(state.rng)
        return
    entry.slot = codec.pad_to_slot(ct, state.rng)


def _send_entry(state: NodeState, entry: PoolEntry) -> NodeResponse:
    if state.config.reencrypt and entry.last_sent is not None:
        _rerandomize(state, entry)
    entry.retries += 1
    entry.last_sent = state.clock
    if not state.config.acks:
        _remove_entry(state, entry.id)
    elif entry.expected_ack is None:
        limit = state.config.retry_max
        if limit is not None and entry.retries >= limit:
            _remove_entry(state, entry.id)
    return NodeResponse(ResponseKind.CARRY, entry.slot, entry.destination)


def _carry_from_pool(state: NodeState) -> NodeResponse:
    now, interval = state.clock, state.config.retry_interval
    eligible = [e for e in state.pool if e.eligible(now, interval)]
    if eligible:
        return _send_entry(state, state.rng.choice(eligible))
    if state.config.trickle:
        target = random_peer(state)
        if target is not None:
            return NodeResponse(ResponseKind.CARRY, codec.random_slot(state.rng), target)
    return FIXED


def respond(state: NodeState, force_coin: bool | None = None) -> NodeResponse:
    """The outward coin toss: a pooled slot through the client, or the fixed page."""
    if _coin(state, force_coin):
        return _carry_from_pool(state)
    return FIXED


dispatch = respond


def _mark_seen(state: NodeState, dig: bytes) -> bool:
    """Record ``dig``; True if it was already there."""
    if dig in state.seen:
        return True
    state.seen[dig] = None
    if len(state.seen) > SEEN_CACHE_MAX:
        state.seen.popitem(last=False)
    return False


def _ack_back(state: NodeState, plaintext: bytes, referer: str | None) -> None:
    if not state.config.acks or referer is None or referer == state.url:
        return
    _enqueue(state, codec.make_ack(crypto.digest(plaintext), state.rng), referer, None, is_ack=True)


def receive(state: NodeState, slot: bytes, referer: str | None = None,
            force_coin: bool | None = None) -> NodeResponse:
    """Process one POSTed slot and choose what the client gets back."""
    if len(slot) != SLOT_SIZE:
        raise ProtocolError(f"slot must be {SLOT_SIZE} bytes, got {len(slot)}")

    if state.config.acks:
        ref = state.ack_table.get(slot[:DIGEST_SIZE])
        if ref is not None and (referer is None or referer == ref.destination):
            del state.ack_table[slot[:DIGEST_SIZE]]
            _remove_entry(state, ref.entry_id)
            return FIXED

    ct = codec.unpad(slot)
    state.decrypt_calls += 1
    plaintext = crypto.decrypt(state.keypair, ct) if ct else None
    if plaintext is None:
        return respond(state, force_coin)
    try:
        msg = codec.parse_inner(plaintext)
    except codec.ParseError as exc:
        log.debug("%s: discarding unparsable layer: %s", state.url, exc)
        return respond(state, force_coin)

    if msg.kind is Kind.GET:
        box = state.mailboxes.get(msg.mailbox)
        if not box:
            return respond(state, force_coin)
        if not _coin(state, force_coin):
            return FIXED
        target = random_peer(state)
        if target is None:
            return FIXED
        content = box.pop(0)
        if not box:
            del state.mailboxes[msg.mailbox]
        return NodeResponse(ResponseKind.CARRY, content, target)

    if msg.kind is Kind.TO_MAILBOX:
        if not _mark_seen(state, crypto.digest(plaintext)):
            state.mailboxes.setdefault(msg.mailbox, []).append(codec.pad_to_slot(msg.body, state.rng))
        _ack_back(state, plaintext, referer)
    elif msg.kind is Kind.TO_NODE:
        duplicate = _mark_seen(state, crypto.digest(plaintext))
        if msg.next_hop == state.url:
            log.debug("%s: dropping layer addressed to itself", state.url)
        elif not duplicate and len(msg.body) <= codec.SLOT_CAPACITY:
            ack = msg.expected_ack if state.config.acks else None
            entry = _enqueue(state, codec.pad_to_slot(msg.body, state.rng), msg.next_hop, ack)
            if ack is not None:
                state.ack_table[ack] = AckRef(entry.id, msg.next_hop)
        _ack_back(state, plaintext, referer)
    return respond(state, force_coin)


def flush_tick(state: NodeState, now: int, trickle: bool | None = None,
               dispatch_due: bool = False) -> NodeResponse | None:
    """Advance the node clock.

    Entries last sent more than ``retry_interval`` ticks ago become eligible
    for the next coin-heads.  When ``dispatch_due`` is set and nothing in
    the pool is eligible, a trickle-enabled node emits a dummy slot of pure
    randomness to a random peer.
    """
    state.clock = max(state.clock, now)
    trickle = state.config.trickle if trickle is None else trickle
    if not dispatch_due:
        return None
    interval = state.config.retry_interval
    if any(e.eligible(state.clock, interval) for e in state.pool):
        return None
    if trickle:
        target = random_peer(state)
        if target is not None:
            return NodeResponse(ResponseKind.CARRY, codec.random_slot(state.rng), target)
    return None


def eligible_count(state: NodeState) -> int:
    return sum(1 for e in state.pool if e.eligible(state.clock, state.config.retry_interval))


# --------------------------------------------------------------------------
# Snapshots

_MAGIC = b"PHSN"
_VERSION = 1


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack(">H", len(b)) + b


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise ValueError("truncated snapshot")
        b = self.data[self.off: self.off + n]
        self.off += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack(">H")
        return self.take(n).decode("utf-8")


def dump_state(state: NodeState) -> bytes:
    """Serialize everything but the key pair and config."""
    out = [_MAGIC, bytes([_VERSION]), _pack_str(state.url),
           struct.pack(">QQQ", state.clock, state.next_id, state.decrypt_calls)]
    version, words, gauss = state.rng.getstate()
    out.append(struct.pack(">B625I", version, *words))
    out.append(struct.pack(">?d", gauss is not None, gauss or 0.0))
    out.append(struct.pack(">I", len(state.peers)))
    out.extend(_pack_str(p) for p in state.peers)
    out.append(struct.pack(">I", len(state.pool)))
    for e in state.pool:
        out.append(struct.pack(">Q", e.id) + e.slot + _pack_str(e.destination))
        out.append(struct.pack(">B", (e.expected_ack is not None) | (e.is_ack << 1)))
        if e.expected_ack is not None:
            out.append(e.expected_ack)
        out.append(struct.pack(">IQq", e.retries, e.entered_at, -1 if e.last_sent is None else e.last_sent))
    out.append(struct.pack(">I", len(state.ack_table)))
    for dig, ref in state.ack_table.items():
        out.append(dig + struct.pack(">Q", ref.entry_id) + _pack_str(ref.destination))
    out.append(struct.pack(">I", len(state.mailboxes)))
    for box, slots in state.mailboxes.items():
        out.append(box + struct.pack(">I", len(slots)))
        out.extend(slots)
    out.append(struct.pack(">I", len(state.seen)))
    out.extend(state.seen.keys())
    return b"".join(out)


def load_state(data: bytes, keypair: KeyPair, config: NodeConfig | None = None) -> NodeState:
    r = _Reader(data)
    if r.take(4) != _MAGIC:
        raise ValueError("not a node snapshot")
    (version,) = r.unpack(">B")
    if version != _VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    state = NodeState(r.string(), keypair, config or NodeConfig())
    state.clock, state.next_id, state.decrypt_calls = r.unpack(">QQQ")
    rv, *words = r.unpack(">B625I")
    has_gauss, gauss = r.unpack(">?d")
    state.rng.setstate((rv, tuple(words), gauss if has_gauss else None))
    (n,) = r.unpack(">I")
    state.peers = [r.string() for _ in range(n)]
    (n,) = r.unpack(">I")
    for _ in range(n):
        (eid,) = r.unpack(">Q")
        slot = r.take(SLOT_SIZE)
        dest = r.string()
        (flags,) = r.unpack(">B")
        ack = r.take(DIGEST_SIZE) if flags & 1 else None
        retries, entered, last = r.unpack(">IQq")
        state.pool.append(PoolEntry(eid, slot, dest, ack, entered, retries,
                                    None if last < 0 else last, bool(flags & 2)))
    (n,) = r.unpack(">I")
    for _ in range(n):
        dig = r.take(DIGEST_SIZE)
        (eid,) = r.unpack(">Q")
        state.ack_table[dig] = AckRef(eid, r.string())
    (n,) = r.unpack(">I")
    for _ in range(n):
        box = r.take(codec.MAILBOX_BYTES)
        (k,) = r.unpack(">I")
        state.mailboxes[box] = [r.take(SLOT_SIZE) for _ in range(k)]
    (n,) = r.unpack(">I")
    for _ in range(n):
        state.seen[r.take(DIGEST_SIZE)] = None
    if r.off != len(data):
        raise ValueError("trailing bytes in snapshot")
    return state
