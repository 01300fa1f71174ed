import json
import random
import socket
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor

import pytest

from oracles import sha256
from posthorn import channels, codec, crypto, node
from posthorn.crypto import Suite
from posthorn.gateway import Browser, Gateway, GatewayConfig, GatewayError, serve
from posthorn.node import NodeConfig, ResponseKind

A_URL, B_URL, C_URL = "http://a.example/mix", "http://b.example/mix", "http://c.example/mix"
KEYS = [crypto.keygen(Suite.TEST, 500 + i) for i in range(3)]
BOX = codec.mailbox_id(0x77)


def make_gateway(coin_bias=0.5, trickle=False, seed=0, peers=(B_URL, C_URL)):
    state = node.new_node(A_URL, KEYS[0], seed, NodeConfig(coin_bias=coin_bias, trickle=trickle), peers)
    return Gateway(state)


def forward_slot(payload=b"p"):
    """A slot that makes node A pool one layer for B, plus its plan."""
    plan = codec.build_onion(payload, [(A_URL, KEYS[0].public()), (B_URL, KEYS[1].public())], BOX)
    return plan.first_slot, plan


def post(gw, slot, referer=None):
    headers = {"Referer": referer} if referer else {}
    return gw.handle_post(channels.form_body(slot), headers)


def fixed_bytes():
    return channels.STATIC_DOCUMENT.body


# -- handlers --------------------------------------------------------------------------


def test_ack_slot_removes_entry():
    gw = make_gateway(coin_bias=0.0)
    slot, plan = forward_slot()
    post(gw, slot)
    assert len(gw.state.pool) == 1
    url, dig = plan.per_hop_acks[0]
    r = post(gw, codec.make_ack(dig), referer="http://b.example/mix?x")
    assert r.status == 200 and r.body == fixed_bytes()
    assert gw.state.pool == [] and gw.state.ack_table == {}


@pytest.mark.parametrize("body", [b"m=garbage", b"", b"x=1", b"m=" + b"A" * 5000, b"\xff\x00\xfe"],
                         ids=["junk", "empty", "no-field", "short-slot", "binary"])
def test_malformed_input_hidden(body):
    gw = make_gateway()
    r = gw.handle_post(body, {})
    assert (r.status, r.body, r.content_type) == (200, fixed_bytes(), "text/html; charset=utf-8")
    assert gw.malformed == 1


def test_to_node_heads_carries_pooled_slot():
    gw = make_gateway(coin_bias=1.0)
    slot, _ = forward_slot()
    r = post(gw, slot)
    target, carried = channels.parse_carrier(r.body.decode())
    assert target == B_URL
    assert carried in [e.slot for e in gw.state.pool]


def test_frameset_empty_pool_is_static():
    gw = make_gateway(coin_bias=1.0)
    r = gw.handle_frameset()
    page = r.body.decode()
    assert channels.frameset_inner(page) == channels.STATIC_DOCUMENT.html
    assert len(r.body) <= 16384


def test_frameset_carries_pool_slot():
    gw = make_gateway(coin_bias=0.0)
    slot, _ = forward_slot()
    post(gw, slot)
    gw.state.config.coin_bias = 1.0
    r = gw.handle_frameset()
    inner = channels.frameset_inner(r.body.decode())
    assert channels.parse_carrier(inner) == (B_URL, gw.state.pool[0].slot)
    assert len(r.body) <= 16384 + len(gw.banner)


def test_fragment_route_reassembles():
    gw = make_gateway(coin_bias=0.0)
    slot, _ = forward_slot()
    frags = channels.split_redirects(slot, A_URL, "tok")
    for f in frags[:-1]:
        assert gw.handle_fragment(f.query, {}).body == fixed_bytes()
        assert gw.state.pool == []
    gw.handle_fragment(frags[-1].query, {})
    assert len(gw.state.pool) == 1
    assert gw.handle_fragment("d=zz", {}).body == fixed_bytes()


def test_wire_indistinguishability():
    gw = make_gateway(trickle=True)
    rng = random.Random(5)
    fixed, carry = set(), set()
    for _ in range(1000):
        r = post(gw, codec.random_slot(rng))
        (carry if r.node_response.kind is ResponseKind.CARRY else fixed).add(
            r.body if r.node_response.kind is not ResponseKind.CARRY else len(r.body))
    assert fixed == {fixed_bytes()}
    assert len(carry) == 1


def test_referer_maps_to_peer_origin():
    gw = make_gateway()
    assert gw._peer_for("http://B.example/other/page?q=1") == B_URL
    assert gw._peer_for(None) is None
    assert gw._peer_for("http://stranger.example/mix") == "http://stranger.example/mix"


# -- live service ----------------------------------------------------------------------------


@pytest.fixture
def keyfile(tmp_path):
    p = tmp_path / "a.key"
    crypto.write_keyfile(p, KEYS[0])
    return p


def live(keyfile, tmp_path, **kw):
    cfg = GatewayConfig(key_file=str(keyfile), listen="127.0.0.1:0", seed=1, **kw)
    return serve(cfg)


def test_health_and_unknown_routes(keyfile, tmp_path):
    srv = live(keyfile, tmp_path)
    try:
        with urllib.request.urlopen(srv.url + "/health") as r:
            assert r.read() == b"ok\n"
        with urllib.request.urlopen(srv.url + "/banner.img") as r:
            assert r.headers["Content-Type"] == "image/gif"
        with pytest.raises(urllib.error.HTTPError) as err:
            urllib.request.urlopen(srv.url + "/nope")
        assert err.value.code == 404
    finally:
        srv.close()


def test_restart_preserves_pool(keyfile, tmp_path):
    snap = tmp_path / "node.snap"
    srv = live(keyfile, tmp_path, snapshot_path=str(snap), coin_bias=0.0)
    url = srv.gateway.state.url
    plan = codec.build_onion(b"keep", [(url, KEYS[0].public()), (B_URL, KEYS[1].public())], BOX)
    Browser().post_slot(url, plan.first_slot)
    before = [(e.slot, e.destination) for e in srv.gateway.state.pool]
    assert len(before) == 1
    srv.close()
    assert snap.exists()
    srv2 = live(keyfile, tmp_path, snapshot_path=str(snap), coin_bias=0.0)
    try:
        assert [(e.slot, e.destination) for e in srv2.gateway.state.pool] == before
        assert set(srv2.gateway.state.ack_table) == {plan.per_hop_acks[0][1]}
    finally:
        srv2.close()


def test_two_gateways_deliver(tmp_path):
    files = []
    for i in range(2):
        p = tmp_path / f"n{i}.key"
        crypto.write_keyfile(p, KEYS[i])
        files.append(p)
    a = serve(GatewayConfig(key_file=str(files[0]), listen="127.0.0.1:0", seed=1, coin_bias=1.0, trickle=True))
    b = serve(GatewayConfig(key_file=str(files[1]), listen="127.0.0.1:0", seed=2))
    try:
        a_url, b_url = a.gateway.state.url, b.gateway.state.url
        node.register_peer(a.gateway.state, b_url)
        node.register_peer(b.gateway.state, a_url)
        payload = b"through the browser"
        plan = codec.build_onion(payload, [(b_url, KEYS[1].public())], BOX)
        used = []

        def substitute(slot, target):
            if used:
                return None
            used.append(target)
            return plan.first_slot, plan.first_hop

        chain = Browser().visit(a.url, substitute)
        assert used == [b_url] and chain[1].url == b_url
        stored = b.gateway.state.mailboxes[BOX]
        assert [codec.unpad(s) for s in stored] == [payload]
        # B acknowledges back to A through its pool
        assert any(e.is_ack and e.destination == a_url for e in b.gateway.state.pool)
    finally:
        a.close()
        b.close()


def test_parallel_posts_conserve_count(keyfile, tmp_path):
    srv = live(keyfile, tmp_path, coin_bias=0.0)
    url = srv.gateway.state.url
    slots = [codec.build_onion(bytes([i]), [(url, KEYS[0].public()), (B_URL, KEYS[1].public())], BOX).first_slot
             for i in range(16)]
    try:
        with ThreadPoolExecutor(16) as ex:
            codes = list(ex.map(lambda s: Browser().post_slot(url, s).status, slots))
        assert codes == [200] * 16
        assert len(srv.gateway.state.pool) == 16 == len(srv.gateway.state.ack_table)
    finally:
        srv.close()


# -- startup errors ----------------------------------------------------------------------------


def test_config_rejects_unknown_fields(tmp_path):
    p = tmp_path / "gw.json"
    p.write_text(json.dumps({"key_file": "x", "colour": "blue"}))
    with pytest.raises(GatewayError, match="colour"):
        GatewayConfig.load(p)


def test_missing_or_public_key(tmp_path):
    with pytest.raises(GatewayError):
        Gateway.from_config(GatewayConfig(key_file=str(tmp_path / "absent.key")))
    pub = tmp_path / "a.pub"
    crypto.write_keyfile(pub, KEYS[0].public())
    with pytest.raises(GatewayError, match="secret"):
        Gateway.from_config(GatewayConfig(key_file=str(pub)))


def test_bind_failure(keyfile):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        s.listen()
        port = s.getsockname()[1]
        with pytest.raises(GatewayError, match="bind"):
            serve(GatewayConfig(key_file=str(keyfile), listen=f"127.0.0.1:{port}"))


def test_ack_digest_matches_hop_plaintext():
    gw = make_gateway(coin_bias=1.0)
    slot, plan = forward_slot(b"zz")
    r = post(gw, slot)
    _, carried = channels.parse_carrier(r.body.decode())
    pt = crypto.decrypt(KEYS[1], codec.unpad(carried))
    assert sha256(pt) == plan.per_hop_acks[0][1]
