import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import parse_layer, peel, sha256, unpad
from posthorn import codec, crypto
from posthorn.codec import InnerMessage, Kind
from posthorn.crypto import SLOT_SIZE, Suite

URLS = [f"http://n{i}.example/mix" for i in range(5)]
TEST_KEYS = [crypto.keygen(Suite.TEST, 100 + i) for i in range(5)]
HYB_KEYS = [crypto.keygen(Suite.HYBRID, 200 + i) for i in range(5)]
BOX = codec.mailbox_id(0xABCDEF)


def _path(keys, n):
    return [(URLS[i], keys[i].public()) for i in range(n)]


# -- padding ----------------------------------------------------------------------


def test_pad_full_and_empty():
    full = bytes(range(256)) * 15 + bytes(254)
    assert len(full) == 4094
    s = codec.pad_to_slot(full)
    assert len(s) == SLOT_SIZE and codec.unpad(s) == full
    e = codec.pad_to_slot(b"", random.Random(1))
    assert len(e) == SLOT_SIZE and e[:2] == b"\x00\x00"
    assert e[2:] != bytes(4094)
    with pytest.raises(crypto.SizeError):
        codec.pad_to_slot(bytes(4095))


@settings(max_examples=1000)
@given(st.binary(max_size=4094))
def test_pad_unpad_identity(p):
    s = codec.pad_to_slot(p)
    assert len(s) == SLOT_SIZE
    assert codec.unpad(s) == p == unpad(s)


def test_unpad_rejects_bad_lengths():
    assert codec.unpad(b"\xff\xff" + bytes(4094)) is None
    assert codec.unpad(b"\x00") is None


def test_fill_is_random_not_zero():
    a, b = codec.pad_to_slot(b"hi"), codec.pad_to_slot(b"hi")
    assert a[:4] == b[:4] and a[4:] != b[4:]


# -- header grammar ------------------------------------------------------------------


def test_to_mailbox_round_trip():
    m = InnerMessage(Kind.TO_MAILBOX, b"body", mailbox=BOX)
    assert codec.parse_inner(codec.encode_inner(m)) == m


def test_to_node_round_trip():
    ack = sha256(b"x")
    m = InnerMessage(Kind.TO_NODE, b"ciphertext", next_hop=URLS[1], expected_ack=ack)
    enc = codec.encode_inner(m)
    assert parse_layer(enc) == {"kind": "TO_NODE", "ack": ack, "next": URLS[1], "body": b"ciphertext"}
    assert codec.parse_inner(enc) == m


@pytest.mark.parametrize("blob", [b"\xff", b"", b"\x02" + bytes(5), b"\x01" + bytes(10),
                                  b"\x05\x00\x09http:", b"\x03" + bytes(17), b"\x05\x00\x03abc"])
def test_parse_errors(blob):
    with pytest.raises(codec.ParseError):
        codec.parse_inner(blob)


def test_mailbox_must_be_128_bits():
    with pytest.raises(codec.CodecError):
        InnerMessage(Kind.TO_MAILBOX, b"", mailbox=b"short")
    with pytest.raises(codec.CodecError):
        InnerMessage(Kind.TO_MAILBOX, b"", mailbox=BOX, expected_ack=bytes(32))


_messages = st.one_of(
    st.builds(lambda b, box: InnerMessage(Kind.TO_MAILBOX, b, mailbox=box),
              st.binary(max_size=64), st.binary(min_size=16, max_size=16)),
    st.builds(lambda box: InnerMessage(Kind.GET, mailbox=box), st.binary(min_size=16, max_size=16)),
    st.builds(lambda b, u, a: InnerMessage(Kind.TO_NODE, b, next_hop=u, expected_ack=a),
              st.binary(max_size=64), st.sampled_from(URLS), st.one_of(st.none(), st.binary(min_size=32, max_size=32))),
    st.builds(lambda b: InnerMessage(Kind.PAYLOAD, b), st.binary(max_size=64)),
)


@settings(max_examples=10_000)
@given(_messages)
def test_encoding_prefix_unambiguous(m):
    enc = codec.encode_inner(m)
    back = codec.parse_inner(enc)
    assert back == m
    assert codec.encode_inner(back) == enc


# -- onions --------------------------------------------------------------------------


def test_one_hop_onion():
    plan = codec.build_onion(b"payload", _path(TEST_KEYS, 1), BOX)
    assert plan.per_hop_acks == []
    assert plan.first_hop == URLS[0]
    assert len(plan.first_slot) == SLOT_SIZE
    (pt, layer), = peel(plan.first_slot, TEST_KEYS[:1], crypto.decrypt)
    assert layer == {"kind": "TO_MAILBOX", "mailbox": BOX, "body": b"payload"}


def test_three_hop_peel_oracle():
    payload = random.Random(1).randbytes(1000)
    plan = codec.build_onion(payload, _path(TEST_KEYS, 3), BOX)
    layers = peel(plan.first_slot, TEST_KEYS[:3], crypto.decrypt)
    assert [l["kind"] for _, l in layers] == ["TO_NODE", "TO_NODE", "TO_MAILBOX"]
    assert layers[0][1]["next"] == URLS[1] and layers[1][1]["next"] == URLS[2]
    assert layers[2][1]["body"] == payload and layers[2][1]["mailbox"] == BOX
    # node k is told to expect the hash of what node k+1 decrypts
    for k in range(2):
        assert plan.per_hop_acks[k] == (URLS[k], sha256(layers[k + 1][0]))
        assert layers[k][1]["ack"] == sha256(layers[k + 1][0])
    assert len({d for _, d in plan.per_hop_acks}) == 2


@settings(max_examples=60)
@given(n=st.integers(1, 4), size=st.integers(0, 2000), suite=st.sampled_from(["TEST", "HYBRID"]))
def test_peel_identity_property(n, size, suite):
    keys = TEST_KEYS if suite == "TEST" else HYB_KEYS
    path = _path(keys, n)
    size = min(size, codec.max_payload(path))
    payload = bytes(size)
    plan = codec.build_onion(payload, path, BOX)
    layers = peel(plan.first_slot, keys[:n], crypto.decrypt)
    assert layers[-1][1]["body"] == payload
    assert [d for _, d in plan.per_hop_acks] == [sha256(pt) for pt, _ in layers[1:]]


@pytest.mark.parametrize("n", [1, 2, 3, 4])
@pytest.mark.parametrize("keys", [TEST_KEYS, HYB_KEYS], ids=["TEST", "HYBRID"])
def test_capacity_law_boundary(keys, n):
    path = _path(keys, n)
    o = crypto.overhead(keys[0].suite)
    hdr = [1 + 32 + 2 + len(URLS[i + 1]) for i in range(n - 1)] + [1 + 16]
    expected = SLOT_SIZE - 2 - sum(h + o for h in hdr)
    assert codec.max_payload(path) == expected
    codec.build_onion(bytes(expected), path, BOX)
    with pytest.raises(crypto.SizeError):
        codec.build_onion(bytes(expected + 1), path, BOX)


def test_path_errors():
    with pytest.raises(codec.PathError):
        codec.build_onion(b"", [], BOX)
    with pytest.raises(codec.PathError):
        codec.build_onion(b"", _path(TEST_KEYS, 5), BOX)
    with pytest.raises(codec.PathError):
        codec.build_onion(b"", [_path(TEST_KEYS, 1)[0]] * 2, BOX)


def test_onion_without_acks_uses_short_header():
    plan = codec.build_onion(b"p", _path(TEST_KEYS, 2), BOX, acks=False)
    layers = peel(plan.first_slot, TEST_KEYS[:2], crypto.decrypt)
    assert layers[0][1]["ack"] is None and plan.per_hop_acks == []


# -- GET and ACK slots ---------------------------------------------------------------


def test_build_get():
    kp = HYB_KEYS[0]
    a, b = codec.build_get(BOX, kp.public()), codec.build_get(BOX, kp.public())
    assert a != b and len(a) == len(b) == SLOT_SIZE
    msg = codec.parse_inner(crypto.decrypt(kp, codec.unpad(a)))
    assert msg.kind is Kind.GET and msg.mailbox == BOX
    zero = codec.parse_inner(crypto.decrypt(kp, codec.unpad(codec.build_get(0, kp.public()))))
    assert zero.mailbox == bytes(16)


def test_make_ack():
    d = sha256(b"m")
    a, b = codec.make_ack(d), codec.make_ack(d)
    assert a[:32] == b[:32] == d
    assert a[32:] != b[32:] and len(a) == SLOT_SIZE
    r = codec.refresh_ack(a)
    assert r[:32] == d and r[32:] != a[32:]


@pytest.mark.parametrize("kp", [TEST_KEYS[0], HYB_KEYS[0]], ids=["TEST", "HYBRID"])
def test_ack_slot_never_decrypts(kp):
    rng = random.Random(9)
    hits = 0
    for _ in range(1000):
        s = codec.make_ack(rng.randbytes(32), rng)
        ct = codec.unpad(s)
        hits += ct is not None and crypto.decrypt(kp, ct) is not None
    assert hits == 0


def test_mailbox_id_forms():
    assert codec.mailbox_id(1) == codec.mailbox_id("00000000000000000000000000000001") == bytes(15) + b"\x01"
    with pytest.raises(codec.CodecError):
        codec.mailbox_id(b"123")
    with pytest.raises(codec.CodecError):
        codec.mailbox_id(1 << 128)


def test_hexdump_round_trip():
    s = codec.random_slot(random.Random(2))
    text = codec.hexdump(s)
    lines = text.strip().split("\n")
    assert all(len(l) == 64 for l in lines) and len(lines) == SLOT_SIZE * 2 // 64
    assert text == text.lower()
    assert codec.from_hexdump(text) == s
