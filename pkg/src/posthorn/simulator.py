"""Deterministic discrete-event simulation of a Posthorn deployment.

Actors:

* nodes: in-memory ``NodeState`` objects behind frameset and POST endpoints
* linkers: pages that embed one node's frameset
* surfers: browsers that visit linker pages and execute whatever carrier
  documents come back, until a static page ends the chain
* senders / receivers: browsers that behave exactly like surfers but swap
  the slot of the first carrier they get for their own onion or GET

Time is a logical tick counter.  One ``random.Random`` seeded from the
config drives every decision, so equal configs give equal reports.
"""

from __future__ import annotations

import hashlib
import json
import random
import struct
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

from . import channels, codec, crypto, node
from .crypto import Suite
from .node import NodeConfig, NodeResponse, ResponseKind

SURFER = "SURFER"
SENDER = "SENDER"
RECEIVER = "RECEIVER"
ROLES = (SURFER, SENDER, RECEIVER)


class ConfigError(ValueError):
    pass


class UndefinedError(ValueError):
    pass


def node_url(i: int) -> str:
    return f"http://node{i}.mix.example/mix"


def frameset_url(i: int) -> str:
    return f"http://node{i}.mix.example/frameset"


def linker_url(j: int) -> str:
    return f"http://www.linker{j}.example/index.html"


_UA = "Mozilla/5.0 (X11; Linux x86_64; rv:115.0) Gecko/20100101 Firefox/115.0"


def request_size(method: str, url: str, referer: str | None, body_len: int = 0) -> int:
    """Bytes of an HTTP/1.1 request as a browser would send it."""
    rest = url.split("://", 1)[-1]
    host, _, path = rest.partition("/")
    lines = [f"{method} /{path} HTTP/1.1", f"Host: {host}", f"User-Agent: {_UA}",
             "Accept: text/html,application/xhtml+xml,*/*;q=0.8", "Connection: keep-alive"]
    if referer is not None:
        lines.append(f"Referer: {referer}")
    if method == "POST":
        lines += ["Content-Type: application/x-www-form-urlencoded", f"Content-Length: {body_len}"]
    return len("\r\n".join(lines)) + 4 + body_len


def response_size(body_len: int) -> int:
    head = ("HTTP/1.1 200 OK\r\nContent-Type: text/html; charset=utf-8\r\n"
            f"Content-Length: {body_len}\r\nCache-Control: no-cache\r\n\r\n")
    return len(head) + body_len


# --------------------------------------------------------------------------
# Configuration


@dataclass
class SenderSpec:
    payload: bytes
    path: list[int]
    mailbox: bytes
    start_tick: int = 0


@dataclass
class ReceiverSpec:
    mailbox: bytes
    node: int
    poll_rate: float = 0.1


@dataclass
class SimConfig:
    n_nodes: int = 3
    n_linkers: int = 3
    n_surfers: int = 20
    senders: list[SenderSpec] = field(default_factory=list)
    receivers: list[ReceiverSpec] = field(default_factory=list)
    surfer_visit_rate: float = 0.1
    sender_visit_rate: float | None = None  # defaults to surfer_visit_rate
    coin_bias: float = 0.5
    trickle: bool = False
    seed: int = 0
    max_ticks: int = 1000
    suite: str = "HYBRID"
    ure_group: str = "modp1024"
    acks: bool = True
    retry_interval: int = node.RETRY_INTERVAL
    retry_max: int | None = node.RETRY_MAX
    stop_when_quiescent: bool = False
    broken_double_post: bool = False
    record_inbound: bool = False

    def validate(self) -> None:
        errors = []
        for name in ("n_nodes", "n_linkers", "n_surfers", "max_ticks", "retry_interval"):
            if getattr(self, name) < 0:
                errors.append(f"{name}: must be >= 0")
        if self.n_nodes < 1:
            errors.append("n_nodes: need at least one node")
        if self.n_linkers < 1:
            errors.append("n_linkers: need at least one linker")
        for name in ("surfer_visit_rate", "coin_bias"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                errors.append(f"{name}: must lie in [0, 1]")
        if self.sender_visit_rate is not None and not 0.0 <= self.sender_visit_rate <= 1.0:
            errors.append("sender_visit_rate: must lie in [0, 1]")
        if self.suite not in Suite.__members__:
            errors.append(f"suite: unknown suite {self.suite!r}")
        if self.ure_group not in crypto.GROUPS_BY_NAME:
            errors.append(f"ure_group: unknown group {self.ure_group!r}")
        for k, s in enumerate(self.senders):
            if not s.path or any(not 0 <= i < self.n_nodes for i in s.path):
                errors.append(f"senders[{k}].path: node index out of range")
            if len(s.path) > codec.MAX_HOPS:
                errors.append(f"senders[{k}].path: more than {codec.MAX_HOPS} hops")
            if len(s.mailbox) != codec.MAILBOX_BYTES:
                errors.append(f"senders[{k}].mailbox: must be 128 bits")
            if s.start_tick < 0:
                errors.append(f"senders[{k}].start_tick: must be >= 0")
        for k, r in enumerate(self.receivers):
            if not 0 <= r.node < self.n_nodes:
                errors.append(f"receivers[{k}].node: out of range")
            if not 0.0 <= r.poll_rate <= 1.0:
                errors.append(f"receivers[{k}].poll_rate: must lie in [0, 1]")
            if len(r.mailbox) != codec.MAILBOX_BYTES:
                errors.append(f"receivers[{k}].mailbox: must be 128 bits")
        if errors:
            raise ConfigError("; ".join(errors))

    # JSON ---------------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["senders"] = [
            {"payload_hex": s.payload.hex(), "path": s.path, "mailbox": s.mailbox.hex(),
             "start_tick": s.start_tick}
            for s in self.senders
        ]
        d["receivers"] = [
            {"mailbox": r.mailbox.hex(), "node": r.node, "poll_rate": r.poll_rate} for r in self.receivers
        ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(sorted(unknown))}")
        try:
            senders = []
            for s in d.pop("senders", []):
                if "payload_hex" in s:
                    payload = bytes.fromhex(s["payload_hex"])
                else:
                    payload = s["payload"].encode("utf-8")
                senders.append(SenderSpec(payload, list(s["path"]), codec.mailbox_id(s["mailbox"]),
                                          int(s.get("start_tick", 0))))
            receivers = [
                ReceiverSpec(codec.mailbox_id(r["mailbox"]), int(r["node"]), float(r.get("poll_rate", 0.1)))
                for r in d.pop("receivers", [])
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad sender/receiver entry: {exc}") from None
        cfg = cls(senders=senders, receivers=receivers, **d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "SimConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    def node_config(self) -> NodeConfig:
        return NodeConfig(
            coin_bias=self.coin_bias,
            retry_interval=self.retry_interval,
            retry_max=self.retry_max,
            acks=self.acks,
            trickle=self.trickle,
            reencrypt=self.suite == "URE",
        )


# --------------------------------------------------------------------------
# Reports


@dataclass
class TraceEvent:
    tick: int
    client_id: str
    client_role: str
    method: str
    url: str
    referer: str | None
    request_size: int
    response_size: int
    response_class: str  # CARRIER or STATIC
    body_digest: str | None = None  # sha256 of the carried slot, for payload-level scans


@dataclass
class SimReport:
    delivered: list[int | None]
    delivered_ok: list[bool]
    carry_chain_lengths: list[int]
    pool_sizes_over_time: dict[str, list[int]]
    ack_sizes_over_time: dict[str, list[int]]
    trace: list[TraceEvent]
    ticks_run: int = 0
    quiescent: bool = False
    inbound: dict[str, list] = field(default_factory=dict)

    def summary(self) -> dict:
        lat = [t for t in self.delivered if t is not None]
        return {
            "ticks_run": self.ticks_run,
            "requests": len(self.trace),
            "visits": len(self.carry_chain_lengths),
            "mean_chain_length": float(mean_chain_length(self)) if self.carry_chain_lengths else None,
            "delivered": sum(t is not None for t in self.delivered),
            "senders": len(self.delivered),
            "delivery_ticks": self.delivered,
            "all_delivered_bit_exact": all(self.delivered_ok[i] for i, t in enumerate(self.delivered)
                                           if t is not None),
            "quiescent": self.quiescent,
            "max_latency": max(lat) if lat else None,
        }

    def to_dict(self, include_trace: bool = False) -> dict:
        d = {
            "delivered": self.delivered,
            "delivered_ok": self.delivered_ok,
            "carry_chain_lengths": self.carry_chain_lengths,
            "pool_sizes_over_time": self.pool_sizes_over_time,
            "ack_sizes_over_time": self.ack_sizes_over_time,
            "ticks_run": self.ticks_run,
            "quiescent": self.quiescent,
            "summary": self.summary(),
        }
        if include_trace:
            d["trace"] = [asdict(e) for e in self.trace]
        return d

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report_path = out / "report.json"
        trace_path = out / "trace.jsonl"
        report_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        with trace_path.open("w") as fh:
            for e in self.trace:
                fh.write(json.dumps(asdict(e), sort_keys=True) + "\n")
        return report_path, trace_path


def load_trace(path: str | Path) -> list[TraceEvent]:
    with Path(path).open() as fh:
        return [TraceEvent(**json.loads(line)) for line in fh if line.strip()]


def mean_chain_length(report: SimReport | list[int]) -> Fraction:
    """Mean number of requests per visit.

    A visit is the frameset fetch plus every auto-submit it triggers; it ends
    at the first static response.  Bias-0 coins give exactly 1.
    """
    chains = report if isinstance(report, list) else report.carry_chain_lengths
    if not chains:
        raise UndefinedError("no chains recorded")
    return Fraction(sum(chains), len(chains))


def snapshot_pools(report: SimReport) -> dict[str, list[int]]:
    return {k: list(v) for k, v in report.pool_sizes_over_time.items()}


# --------------------------------------------------------------------------
# The run


@dataclass
class _Client:
    cid: str
    role: str
    rate: float
    sender: int | None = None
    receiver: int | None = None
    plan: codec.OnionPlan | None = None
    submitted: bool = False


class Simulation:
    """One run; ``run()`` is the usual entry point."""

    def __init__(self, config: SimConfig):
        config.validate()
        self.config = config
        self.rng = random.Random(f"posthorn-sim/{config.seed}")
        suite = Suite[config.suite]
        group = crypto.GROUPS_BY_NAME[config.ure_group]
        self.nodes = make_nodes(config)
        self.by_url = {n.url: i for i, n in enumerate(self.nodes)}
        self.linkers = [j % config.n_nodes for j in range(config.n_linkers)]
        self.receiver_keys = [crypto.keygen(suite, _seed(config.seed, "receiver", k), group)
                              for k in range(len(config.receivers))]
        self.delivered: list[int | None] = [None] * len(config.senders)
        self.delivered_ok = [False] * len(config.senders)
        self.chains: list[int] = []
        self.trace: list[TraceEvent] = []
        self.inbound: dict[str, list] = {n.url: [] for n in self.nodes}
        self.pending_by_mailbox: dict[bytes, int] = {}
        for s in config.senders:
            self.pending_by_mailbox[s.mailbox] = self.pending_by_mailbox.get(s.mailbox, 0) + 1
        self.clients = self._make_clients(suite)

    def _make_clients(self, suite: Suite) -> list[_Client]:
        cfg = self.config
        crng = random.Random(f"posthorn-sim-onions/{cfg.seed}")
        box_owner = {r.mailbox: k for k, r in enumerate(cfg.receivers)}
        sender_rate = cfg.surfer_visit_rate if cfg.sender_visit_rate is None else cfg.sender_visit_rate
        clients = []
        for k, s in enumerate(cfg.senders):
            inner = struct.pack(">I", k) + s.payload
            owner = box_owner.get(s.mailbox)
            if owner is not None:
                inner = crypto.encrypt(self.receiver_keys[owner].public(), inner, crng)
            path = [(self.nodes[i].url, self.nodes[i].keypair.public()) for i in s.path]
            plan = codec.build_onion(inner, path, s.mailbox, crng, acks=cfg.acks)
            clients.append(_Client("", SENDER, sender_rate, sender=k, plan=plan))
        for k, r in enumerate(cfg.receivers):
            clients.append(_Client("", RECEIVER, r.poll_rate, receiver=k))
        clients += [_Client("", SURFER, cfg.surfer_visit_rate) for _ in range(cfg.n_surfers)]
        order = list(range(len(clients)))
        self.rng.shuffle(order)
        for label, idx in enumerate(order):
            clients[idx].cid = f"c{label:05d}"
        return clients

    # -- transactions ----------------------------------------------------

    def _log(self, tick, client, method, url, referer, req, doc: channels.CarrierDocument, resp_body_len):
        carried = doc.embedded_slot
        self.trace.append(TraceEvent(
            tick, client.cid, client.role, method, url, referer, req, response_size(resp_body_len),
            "STATIC" if doc.behavior is channels.Behavior.STATIC else "CARRIER",
            hashlib.sha256(carried).hexdigest() if carried is not None else None,
        ))

    def _frameset(self, tick: int, client: _Client, i: int, linker: str) -> tuple[NodeResponse, str]:
        n = self.nodes[i]
        if self.config.record_inbound:
            self.inbound[n.url].append((tick, "frameset", None, None))
        resp = node.dispatch(n)
        doc = channels.emit_carrier(resp, n.url)
        page = channels.emit_frameset(doc, f"http://node{i}.mix.example/banner.img")
        url = frameset_url(i)
        self._log(tick, client, "GET", url, linker, request_size("GET", url, linker), doc, len(page))
        return resp, n.url

    def _post(self, tick: int, client: _Client, target: str, slot: bytes, referer: str,
              double: bool = False) -> NodeResponse | None:
        body = channels.form_body(slot, double=double)
        i = self.by_url.get(target)
        if i is None:
            return None
        n = self.nodes[i]
        if self.config.record_inbound:
            self.inbound[n.url].append((tick, "post", slot, referer))
        resp = node.receive(n, slot, channels.decode_referer(referer))
        doc = channels.emit_carrier(resp, n.url)
        self._log(tick, client, "POST", target, referer, request_size("POST", target, referer, len(body)),
                  doc, len(doc.body))
        return resp

    def _visit(self, tick: int, client: _Client) -> None:
        cfg = self.config
        linker = self.rng.randrange(cfg.n_linkers)
        resp, origin = self._frameset(tick, client, self.linkers[linker], linker_url(linker))
        length = 1
        polled = False
        while resp is not None and resp.kind is ResponseKind.CARRY:
            slot, target, double = resp.carry_slot, resp.carry_target, False
            if client.role == SENDER and not client.submitted and tick >= cfg.senders[client.sender].start_tick:
                slot, target = client.plan.first_slot, client.plan.first_hop
                client.submitted = True
                double = cfg.broken_double_post
            elif client.role == RECEIVER and not polled and self._wants_poll(client):
                r = cfg.receivers[client.receiver]
                n = self.nodes[r.node]
                slot = codec.build_get(r.mailbox, n.keypair.public(), self.rng)
                target = n.url
                polled = True
                double = cfg.broken_double_post
            resp = self._post(tick, client, target, slot, origin, double)
            origin = target
            length += 1
            if polled and client.role == RECEIVER and resp is not None and resp.kind is ResponseKind.CARRY:
                self._try_extract(tick, client, resp.carry_slot)
        self.chains.append(length)

    def _wants_poll(self, client: _Client) -> bool:
        box = self.config.receivers[client.receiver].mailbox
        return self.pending_by_mailbox.get(box, 0) > 0

    def _try_extract(self, tick: int, client: _Client, slot: bytes) -> None:
        data = codec.unpad(slot)
        if not data:
            return
        pt = crypto.decrypt(self.receiver_keys[client.receiver], data)
        if pt is None or len(pt) < 4:
            return
        (k,) = struct.unpack(">I", pt[:4])
        if k >= len(self.delivered) or self.delivered[k] is not None:
            return
        self.delivered[k] = tick
        self.delivered_ok[k] = pt[4:] == self.config.senders[k].payload
        box = self.config.receivers[client.receiver].mailbox
        self.pending_by_mailbox[box] -= 1

    # -- loop ---------------------------------------------------------------

    def quiescent(self) -> bool:
        return (all(t is not None for t in self.delivered)
                and all(not n.pool and not n.ack_table for n in self.nodes))

    def run(self) -> SimReport:
        cfg = self.config
        pools = {n.url: [] for n in self.nodes}
        acks = {n.url: [] for n in self.nodes}
        tick = 0
        quiet = False
        for tick in range(cfg.max_ticks):
            for n in self.nodes:
                node.flush_tick(n, tick)
            order = list(range(len(self.clients)))
            self.rng.shuffle(order)
            for idx in order:
                c = self.clients[idx]
                if self.rng.random() < c.rate:
                    self._visit(tick, c)
            for n in self.nodes:
                pools[n.url].append(len(n.pool))
                acks[n.url].append(len(n.ack_table))
            if cfg.stop_when_quiescent and self.quiescent():
                quiet = True
                break
        return SimReport(
            delivered=list(self.delivered),
            delivered_ok=list(self.delivered_ok),
            carry_chain_lengths=self.chains,
            pool_sizes_over_time=pools,
            ack_sizes_over_time=acks,
            trace=self.trace,
            ticks_run=tick + 1 if cfg.max_ticks else 0,
            quiescent=quiet or self.quiescent(),
            inbound=self.inbound if cfg.record_inbound else {},
        )

    def labels(self) -> dict[str, str]:
        return {c.cid: c.role for c in self.clients}


def _seed(seed: int, what: str, k: int) -> int:
    h = hashlib.sha256(f"{seed}/{what}/{k}".encode()).digest()
    return int.from_bytes(h[:8], "big")


def make_nodes(config: SimConfig) -> list[node.NodeState]:
    """The node states a run starts from; the gateway replay uses the same."""
    suite = Suite[config.suite]
    group = crypto.GROUPS_BY_NAME[config.ure_group]
    urls = [node_url(i) for i in range(config.n_nodes)]
    nodes = []
    for i, url in enumerate(urls):
        kp = crypto.keygen(suite, _seed(config.seed, "node-key", i), group)
        nodes.append(node.new_node(url, kp, _seed(config.seed, "node", i), config.node_config(), urls))
    return nodes


def run(config: SimConfig) -> SimReport:
    return Simulation(config).run()
