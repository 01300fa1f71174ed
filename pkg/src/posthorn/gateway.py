"""HTTP front end for one mix node, plus a scripted browser for talking to it.

Routes::

    POST /mix        form field "m" carries one transport-encoded slot
    GET  /mix?d=...  redirect-channel fragments (script-free fallback)
    GET  /frameset   banner frame + invisible carrier frame
    GET  /banner.img banner asset
    GET  /health     liveness

Every response to /mix and /frameset is 200 text/html; malformed input gets
the same static page as any other non-carrying response.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import sys
import tempfile
import threading
import time
import urllib.request
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlsplit, urlunsplit

from . import channels, crypto, node
from .crypto import KeyPair
from .node import NodeConfig, NodeResponse, NodeState, ResponseKind

log = logging.getLogger(__name__)

CONFIG_ENV = "POSTHORN_GATEWAY_CONFIG"
MIX_PATH = "/mix"

# 1x1 transparent GIF
DEFAULT_BANNER = bytes.fromhex(
    "47494638396101000100800000000000ffffff21f90401000000002c00000000010001000002024401003b"
)


class GatewayError(Exception):
    pass


@dataclass
class GatewayConfig:
    key_file: str
    peers: list[str] = field(default_factory=list)
    listen: str = "127.0.0.1:8080"
    public_url: str | None = None
    banner_path: str | None = None
    snapshot_path: str | None = None
    trickle: bool = False
    retry_interval: int = node.RETRY_INTERVAL
    retry_max: int | None = node.RETRY_MAX
    coin_bias: float = 0.5
    acks: bool = True
    seed: int | None = None
    tick_seconds: float = 1.0

    @property
    def host_port(self) -> tuple[str, int]:
        host, _, port = self.listen.rpartition(":")
        return host or "127.0.0.1", int(port)

    def node_config(self) -> NodeConfig:
        return NodeConfig(coin_bias=self.coin_bias, retry_interval=self.retry_interval,
                          retry_max=self.retry_max, acks=self.acks, trickle=self.trickle)

    @classmethod
    def load(cls, path: str | Path) -> "GatewayConfig":
        data = json.loads(Path(path).read_text())
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise GatewayError(f"unknown gateway config fields: {', '.join(sorted(unknown))}")
        return cls(**data)


@dataclass
class HttpResponse:
    status: int
    body: bytes
    content_type: str = "text/html; charset=utf-8"
    node_response: NodeResponse | None = None

    def headers(self) -> list[tuple[str, str]]:
        return [("Content-Type", self.content_type), ("Content-Length", str(len(self.body))),
                ("Cache-Control", "no-cache")]


def _origin(url: str) -> str:
    p = urlsplit(url)
    return urlunsplit((p.scheme, p.netloc.lower(), "", "", ""))


class Gateway:
    """Request handling for one node; all state access is serialized."""

    def __init__(self, state: NodeState, banner: bytes = DEFAULT_BANNER, snapshot_path: str | None = None):
        self.state = state
        self.banner = banner
        self.snapshot_path = snapshot_path
        self.lock = threading.Lock()
        self._fragments: dict[str, dict[int, bytes]] = {}
        self.malformed = 0

    @classmethod
    def from_config(cls, config: GatewayConfig) -> "Gateway":
        try:
            kp = crypto.read_keyfile(config.key_file)
        except OSError as exc:
            raise GatewayError(f"cannot read key file {config.key_file}: {exc}") from None
        except crypto.CryptoError as exc:
            raise GatewayError(f"bad key file {config.key_file}: {exc}") from None
        if not isinstance(kp, KeyPair):
            raise GatewayError("key file holds no secret key")
        host, port = config.host_port
        url = config.public_url or f"http://{host}:{port}{MIX_PATH}"
        snap = config.snapshot_path
        if snap and Path(snap).exists():
            state = node.load_state(Path(snap).read_bytes(), kp, config.node_config())
        else:
            seed = config.seed if config.seed is not None else int.from_bytes(os.urandom(8), "big")
            state = node.new_node(url, kp, seed, config.node_config())
        for p in config.peers:
            node.register_peer(state, p)
        banner = Path(config.banner_path).read_bytes() if config.banner_path else DEFAULT_BANNER
        return cls(state, banner, snap)

    # -- helpers ---------------------------------------------------------

    def _peer_for(self, referer: str | None) -> str | None:
        """Map a Referer onto the peer's script URL when it names a known node."""
        ref = channels.decode_referer(referer)
        if ref is None:
            return None
        if ref in self.state.peers or ref == self.state.url:
            return ref
        origin = _origin(ref)
        for p in self.state.peers + [self.state.url]:
            if _origin(p) == origin:
                return p
        return ref

    def _document(self, resp: NodeResponse) -> channels.CarrierDocument:
        return channels.emit_carrier(resp, self.state.url)

    def advance(self, now: int) -> None:
        with self.lock:
            node.flush_tick(self.state, now)

    # -- routes ------------------------------------------------------------

    def handle_post(self, body: bytes, headers) -> HttpResponse:
        slot = channels.parse_form_body(body)
        if slot is None:
            self.malformed += 1
            log.info("malformed POST body (%d bytes)", len(body))
            return HttpResponse(200, channels.STATIC_DOCUMENT.body, node_response=node.FIXED)
        return self._receive(slot, headers.get("Referer"))

    def _receive(self, slot: bytes, referer: str | None) -> HttpResponse:
        with self.lock:
            resp = node.receive(self.state, slot, self._peer_for(referer))
        return HttpResponse(200, self._document(resp).body, node_response=resp)

    def handle_fragment(self, query: str, headers) -> HttpResponse:
        """One redirect-channel fragment; the last one completes the slot."""
        q = parse_qs(query)
        try:
            frag = q["d"][0].encode("ascii")
            i, n, token = int(q["i"][0]), int(q["n"][0]), q["t"][0]
        except (KeyError, ValueError, UnicodeEncodeError):
            return HttpResponse(200, channels.STATIC_DOCUMENT.body, node_response=node.FIXED)
        with self.lock:
            parts = self._fragments.setdefault(token, {})
            parts[i] = frag
            complete = len(parts) == n
            if complete:
                del self._fragments[token]
        if not complete:
            return HttpResponse(200, channels.STATIC_DOCUMENT.body, node_response=node.FIXED)
        try:
            slot = channels.join_redirects(parts, n)
        except channels.ChannelError:
            return HttpResponse(200, channels.STATIC_DOCUMENT.body, node_response=node.FIXED)
        if len(slot) != crypto.SLOT_SIZE:
            return HttpResponse(200, channels.STATIC_DOCUMENT.body, node_response=node.FIXED)
        return self._receive(slot, headers.get("Referer"))

    def handle_frameset(self, headers=None) -> HttpResponse:
        with self.lock:
            resp = node.dispatch(self.state)
        page = channels.emit_frameset(self._document(resp), "/banner.img")
        return HttpResponse(200, page.encode("utf-8"), node_response=resp)

    def handle_banner(self) -> HttpResponse:
        return HttpResponse(200, self.banner, content_type="image/gif")

    # -- persistence -----------------------------------------------------------

    def snapshot(self) -> bytes:
        with self.lock:
            return node.dump_state(self.state)

    def save_snapshot(self, path: str | None = None) -> None:
        path = path or self.snapshot_path
        if not path:
            return
        data = self.snapshot()
        target = Path(path)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=target.name, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, target)


class _Handler(BaseHTTPRequestHandler):
    server_version = "Apache"
    sys_version = ""
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def _send(self, resp: HttpResponse) -> None:
        self.send_response(resp.status)
        for k, v in resp.headers():
            self.send_header(k, v)
        self.end_headers()
        self.wfile.write(resp.body)

    def do_GET(self):
        gw: Gateway = self.server.gateway
        parts = urlsplit(self.path)
        if parts.path == "/frameset":
            self._send(gw.handle_frameset(self.headers))
        elif parts.path == "/banner.img":
            self._send(gw.handle_banner())
        elif parts.path == "/health":
            self._send(HttpResponse(200, b"ok\n", content_type="text/plain"))
        elif parts.path == MIX_PATH and parts.query:
            self._send(gw.handle_fragment(parts.query, self.headers))
        else:
            self._send(HttpResponse(404, b"not found\n", content_type="text/plain"))

    def do_POST(self):
        gw: Gateway = self.server.gateway
        try:
            n = int(self.headers.get("Content-Length", "0"))
        except ValueError:
            n = 0
        body = self.rfile.read(max(0, min(n, 1 << 20)))
        if urlsplit(self.path).path != MIX_PATH:
            self._send(HttpResponse(404, b"not found\n", content_type="text/plain"))
            return
        self._send(gw.handle_post(body, self.headers))


class GatewayServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, gateway: Gateway, address: tuple[str, int], tick_seconds: float = 1.0):
        super().__init__(address, _Handler)
        self.gateway = gateway
        self.tick_seconds = tick_seconds
        self._stop = threading.Event()
        self._workers: list[threading.Thread] = []

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def _ticker(self) -> None:
        start = time.monotonic()
        base = self.gateway.state.clock
        while not self._stop.wait(self.tick_seconds):
            self.gateway.advance(base + int((time.monotonic() - start) / self.tick_seconds))

    def start(self) -> "GatewayServer":
        # short poll so close() returns promptly
        loop = lambda: self.serve_forever(poll_interval=0.05)
        for target in (loop, self._ticker):
            t = threading.Thread(target=target, daemon=True)
            t.start()
            self._workers.append(t)
        return self

    def close(self) -> None:
        self._stop.set()
        self.shutdown()
        self.server_close()
        self.gateway.save_snapshot()


def serve(config: GatewayConfig, gateway: Gateway | None = None) -> GatewayServer:
    """Start a gateway in background threads; ``close()`` persists the node."""
    gateway = gateway or Gateway.from_config(config)
    try:
        server = GatewayServer(gateway, config.host_port, config.tick_seconds)
    except OSError as exc:
        raise GatewayError(f"cannot bind {config.listen}: {exc}") from None
    if config.public_url is None and gateway.state.url.endswith(":0" + MIX_PATH):
        # ephemeral port: the node learns its real URL after bind
        gateway.state.url = server.url + MIX_PATH
    return server.start()


# --------------------------------------------------------------------------
# Scripted browser


@dataclass
class Exchange:
    method: str
    url: str
    referer: str | None
    status: int
    body: bytes
    wire_size: int


class Browser:
    """Fetches framesets and executes carrier documents like a surfer would.

    ``substitute(slot, target)`` may return a replacement ``(slot, target)``
    for the next auto-submit; that is how senders and receivers inject their
    own traffic.
    """

    def __init__(self, timeout: float = 10.0):
        self.timeout = timeout
        self.history: list[Exchange] = []

    def _request(self, method: str, url: str, referer: str | None, body: bytes | None = None) -> Exchange:
        req = urllib.request.Request(url, data=body, method=method)
        if referer:
            req.add_header("Referer", referer)
        if body is not None:
            req.add_header("Content-Type", "application/x-www-form-urlencoded")
        with urllib.request.urlopen(req, timeout=self.timeout) as r:
            data = r.read()
            head = f"HTTP/1.1 {r.status} {r.reason}\r\n" + "".join(f"{k}: {v}\r\n" for k, v in r.getheaders())
            ex = Exchange(method, url, referer, r.status, data, len(head) + 2 + len(data))
        self.history.append(ex)
        return ex

    def post_slot(self, url: str, slot: bytes, referer: str | None = None) -> Exchange:
        return self._request("POST", url, referer, channels.form_body(slot))

    def visit(self, base_url: str, substitute=None, max_chain: int = 64) -> list[Exchange]:
        """Load ``base_url``/frameset and follow auto-submits until a static page."""
        first = self._request("GET", base_url.rstrip("/") + "/frameset", None)
        chain = [first]
        html = channels.frameset_inner(first.body.decode("utf-8"))
        origin = base_url.rstrip("/") + MIX_PATH
        while html is not None and len(chain) < max_chain:
            carried = channels.parse_carrier(html)
            if carried is None:
                break
            target, slot = carried
            if substitute is not None:
                replacement = substitute(slot, target)
                if replacement is not None:
                    slot, target = replacement
            ex = self.post_slot(target, slot, origin)
            chain.append(ex)
            html = ex.body.decode("utf-8")
            origin = target
        return chain


def _parse_args(argv=None):
    import argparse

    p = argparse.ArgumentParser(prog="posthorn-gateway", description="Run one mix node over HTTP.")
    p.add_argument("--config", default=os.environ.get(CONFIG_ENV),
                   help=f"GatewayConfig JSON (default: ${CONFIG_ENV})")
    p.add_argument("--listen")
    p.add_argument("--key-file")
    p.add_argument("--peers", help="comma-separated peer script URLs")
    p.add_argument("--public-url")
    p.add_argument("--banner-path")
    p.add_argument("--snapshot-path")
    p.add_argument("--trickle", action="store_true", default=None)
    p.add_argument("--retry-interval", type=int)
    return p.parse_args(argv)


def main(argv=None) -> int:
    import signal

    args = _parse_args(argv)
    try:
        config = GatewayConfig.load(args.config) if args.config else None
    except (OSError, ValueError, TypeError, GatewayError) as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return 2
    overrides = {k: v for k, v in vars(args).items() if k != "config" and v is not None}
    if "peers" in overrides:
        overrides["peers"] = [u for u in overrides["peers"].split(",") if u]
    if config is None:
        if "key_file" not in overrides:
            print("error: no config and no --key-file", file=sys.stderr)
            return 2
        config = GatewayConfig(**overrides)
    else:
        config = dataclasses.replace(config, **overrides)
    try:
        server = serve(config)
    except GatewayError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    print(f"serving {server.gateway.state.url}", flush=True)
    stop.wait()
    server.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
