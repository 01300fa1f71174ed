"""The header-level observer and the experiments run against it.

The observer sees, per HTTP transaction: time, an opaque client label,
method, URL, whether a Referer was sent, and request/response sizes.  It
never sees bodies or ground-truth roles; ``project`` is the only way from a
simulator trace to what the observer works with.
"""

from __future__ import annotations

import random
import statistics
from dataclasses import asdict, dataclass, field
from urllib.parse import urlsplit

from . import channels, codec, crypto, node
from .crypto import Suite
from .node import NodeConfig, ResponseKind
from .simulator import RECEIVER, SENDER, TraceEvent, node_url


class AdversaryError(ValueError):
    pass


class SampleSizeError(AdversaryError):
    pass


class DomainError(AdversaryError):
    pass


@dataclass(frozen=True)
class HeaderEvent:
    tick: int
    client_id: str
    method: str
    url: str
    referer_present: bool
    request_size: int
    response_size: int


@dataclass
class HeaderTrace:
    events: list[HeaderEvent] = field(default_factory=list)

    def __len__(self):
        return len(self.events)

    def clients(self) -> set[str]:
        return {e.client_id for e in self.events}


def project(trace) -> HeaderTrace:
    """Drop everything the observer cannot see."""
    if isinstance(trace, HeaderTrace):
        trace = trace.events
    out = []
    for e in trace:
        if isinstance(e, HeaderEvent):
            out.append(e)
        else:
            out.append(HeaderEvent(e.tick, e.client_id, e.method, e.url, e.referer is not None,
                                   e.request_size, e.response_size))
    return HeaderTrace(out)


# --------------------------------------------------------------------------
# Anonymity sets


@dataclass(frozen=True)
class Action:
    """An observed effect: something reached ``node_url`` between two ticks."""

    node_url: str
    start: int
    end: int


def _host(url: str) -> str:
    return urlsplit(url).netloc.lower()


def anonymity_set(ht: HeaderTrace, action: Action) -> set[str]:
    """Clients whose observed requests could have caused ``action``.

    Any request to the node's host inside the window qualifies: frameset
    fetches and auto-submits look alike to the observer, and a submission
    can ride on any carrier.
    """
    if action.end < action.start:
        raise DomainError("window ends before it starts")
    if not ht.events:
        raise DomainError("empty trace")
    first, last = ht.events[0].tick, ht.events[-1].tick
    if action.start > last or action.end < first:
        raise DomainError("window lies outside the trace")
    host = _host(action.node_url)
    if not any(_host(e.url) == host for e in ht.events):
        raise DomainError(f"no transaction with {host} in the trace")
    return {
        e.client_id for e in ht.events
        if action.start <= e.tick <= action.end and _host(e.url) == host
    }


def delivery_action(config, report, sender: int) -> Action:
    """Ground-truth window of one delivery: from submission time to receipt."""
    tick = report.delivered[sender]
    if tick is None:
        raise DomainError(f"sender {sender} was never delivered")
    s = config.senders[sender]
    return Action(node_url(s.path[0]), s.start_tick, tick)


# --------------------------------------------------------------------------
# Distinguisher

FEATURES = ("request_count", "mean_chain_length", "post_fraction", "gap_variance", "max_request_size")


def client_features(ht: HeaderTrace, clients=None) -> dict[str, tuple[float, ...]]:
    by_client: dict[str, list[HeaderEvent]] = {}
    for e in ht.events:
        by_client.setdefault(e.client_id, []).append(e)
    if clients is None:
        clients = by_client.keys()
    out = {}
    for cid in clients:
        evs = by_client.get(cid, [])
        n = len(evs)
        visits = sum(1 for e in evs if e.method == "GET")
        posts = n - visits
        ticks = [e.tick for e in evs]
        gaps = [b - a for a, b in zip(ticks, ticks[1:])]
        out[cid] = (
            float(n),
            n / visits if visits else 0.0,
            posts / n if n else 0.0,
            statistics.pvariance(gaps) if len(gaps) > 1 else 0.0,
            float(max((e.request_size for e in evs), default=0)),
        )
    return out


@dataclass
class DistinguisherResult:
    accuracy: float
    n_trials: int
    feature_set: str
    rule: str = ""
    train_accuracy: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _is_positive(label) -> bool:
    if isinstance(label, bool):
        return label
    return label in (SENDER, RECEIVER)


def _fit_stump(xs: list[tuple[float, ...]], ys: list[bool]) -> tuple[int, float, bool, float]:
    """Best single-feature threshold rule on the training split.

    Returns (feature index, threshold, positive_above, training accuracy).
    Ties go to the earliest feature, then the lowest threshold.
    """
    n = len(ys)
    total_pos = sum(ys)
    best = (0, float("-inf"), True, -1.0)
    for f in range(len(xs[0])):
        pairs = sorted(zip((x[f] for x in xs), ys))
        # cands: (threshold, number of training points at or below it)
        cands = [(float("-inf"), 0)]
        cum = [0]
        for i, (v, y) in enumerate(pairs):
            cum.append(cum[-1] + y)
            if i + 1 == n or pairs[i + 1][0] != v:
                nxt = pairs[i + 1][0] if i + 1 < n else v + 1.0
                cands.append(((v + nxt) / 2, i + 1))
        for thr, k in cands:
            acc_above = ((k - cum[k]) + (total_pos - cum[k])) / n
            if acc_above > best[3]:
                best = (f, thr, True, acc_above)
            if 1.0 - acc_above > best[3]:
                best = (f, thr, False, 1.0 - acc_above)
    return best


def distinguisher(ht: HeaderTrace, labels: dict, seed: int = 0, train_fraction: float = 0.5,
                  min_per_class: int = 100) -> DistinguisherResult:
    """Train a threshold rule on half the labeled clients, score it on the rest.

    Labels map client ids to roles (or booleans); senders and receivers are
    the positive class.  Features per client are request count, requests per
    visit, POST fraction, variance of inter-request gaps, and the largest
    request size.
    """
    cids = sorted(labels)
    pos = [c for c in cids if _is_positive(labels[c])]
    neg = [c for c in cids if not _is_positive(labels[c])]
    if len(pos) < min_per_class or len(neg) < min_per_class:
        raise SampleSizeError(f"need {min_per_class} clients per class, have {len(pos)}/{len(neg)}")
    rng = random.Random(f"posthorn-distinguisher/{seed}")
    rng.shuffle(pos)
    rng.shuffle(neg)
    kp, kn = int(len(pos) * train_fraction), int(len(neg) * train_fraction)
    train = pos[:kp] + neg[:kn]
    test = pos[kp:] + neg[kn:]
    feats = client_features(ht, cids)
    f, thr, above, train_acc = _fit_stump([feats[c] for c in train], [_is_positive(labels[c]) for c in train])
    correct = 0
    for c in test:
        guess = (feats[c][f] > thr) == above
        correct += guess == _is_positive(labels[c])
    rule = f"{FEATURES[f]} {'>' if above else '<='} {thr:g} => sender/receiver"
    return DistinguisherResult(correct / len(test), len(test), ", ".join(FEATURES), rule, train_acc)


def shuffled_labels(labels: dict, seed: int = 0) -> dict:
    keys = sorted(labels)
    values = [labels[k] for k in keys]
    random.Random(f"posthorn-shuffle/{seed}").shuffle(values)
    return dict(zip(keys, values))


# --------------------------------------------------------------------------
# DoS: drain a node's pool by fetching its frameset


@dataclass
class DrainReport:
    ack_enabled: bool
    n_fetches: int
    pool_size: int
    pool_series: list[int]
    pending_series: list[int]
    drain_fetch: int | None
    min_pending_during_attack: int
    delivered: int = 0
    final_pool: int = 0
    final_ack_table: int = 0
    carriage_steps: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _real_pending(state: node.NodeState, dest: str) -> int:
    return sum(1 for e in state.pool if e.destination == dest and not e.is_ack)


def dos_drain(ack_enabled: bool, n_fetches: int, pool_size: int = 5, seed: int = 0,
              resume_carriage: bool = True, suite: Suite = Suite.TEST,
              retry_interval: int = node.RETRY_INTERVAL, max_carriage_steps: int = 100_000) -> DrainReport:
    """Attack a node holding ``pool_size`` real messages with frameset fetches.

    The attacker fetches and throws the carriers away, one fetch per tick.
    Afterwards, if ``resume_carriage``, honest clients carry everything again
    until the messages reach their mailboxes and the node's tables drain.
    """
    urls = ["http://a.mix.example/mix", "http://b.mix.example/mix"]
    cfg = NodeConfig(acks=ack_enabled, retry_interval=retry_interval)
    a = node.new_node(urls[0], crypto.keygen(suite, seed * 2 + 1), seed * 2 + 1, cfg, urls)
    b = node.new_node(urls[1], crypto.keygen(suite, seed * 2 + 2), seed * 2 + 2, cfg, urls)
    rng = random.Random(f"posthorn-dos/{seed}")
    path = [(urls[0], a.keypair.public()), (urls[1], b.keypair.public())]
    payloads = {}
    for k in range(pool_size):
        box = codec.mailbox_id(k + 1)
        payloads[box] = f"message {k}".encode()
        plan = codec.build_onion(payloads[box], path, box, rng, acks=ack_enabled)
        node.receive(a, plan.first_slot, None, force_coin=False)

    pool_series, pending_series = [], []
    drain = None
    for f in range(n_fetches):
        node.flush_tick(a, a.clock + 1)
        node.dispatch(a)
        pending = _real_pending(a, urls[1])
        pool_series.append(len(a.pool))
        pending_series.append(pending)
        if drain is None and pending == 0:
            drain = f + 1
    report = DrainReport(ack_enabled, n_fetches, pool_size, pool_series, pending_series, drain,
                         min(pending_series, default=_real_pending(a, urls[1])))

    if resume_carriage:
        states = {urls[0]: a, urls[1]: b}
        steps = 0
        while steps < max_carriage_steps:
            steps += 1
            for s in states.values():
                node.flush_tick(s, s.clock + 1)
            origin = urls[steps % 2]
            resp = node.dispatch(states[origin])
            while resp.kind is ResponseKind.CARRY:
                target = resp.carry_target
                resp = node.receive(states[target], resp.carry_slot, origin)
                origin = target
            delivered = sum(1 for box in payloads if b.mailboxes.get(box))
            if (delivered == pool_size or not ack_enabled) and not a.ack_table and _real_pending(a, urls[1]) == 0:
                break
        report.carriage_steps = steps
        report.delivered = sum(
            1 for box, p in payloads.items()
            if any(codec.unpad(s) == p for s in b.mailboxes.get(box, []))
        )
        report.final_pool = _real_pending(a, urls[1])
        report.final_ack_table = len(a.ack_table)
    return report


# --------------------------------------------------------------------------
# Re-send linkage: identical bodies betray a retried message


def repeated_bodies(bodies) -> int:
    """How many bodies equal one seen earlier."""
    seen, repeats = set(), 0
    for b in bodies:
        if b is None:
            continue
        if b in seen:
            repeats += 1
        seen.add(b)
    return repeats


def trace_repeats(trace: list[TraceEvent]) -> int:
    return repeated_bodies(e.body_digest for e in trace if e.response_class == "CARRIER")


@dataclass
class ResendScan:
    suite: str
    sends: int
    repeats: int


def resend_leak(suite: Suite, n_fetches: int = 400, retry_interval: int = 8, seed: int = 0,
                group: crypto.UreGroup = crypto.MODP1024) -> ResendScan:
    """Fetch a node's frameset while its one message never gets ACKed.

    Every re-send of the pooled message shows up as a carrier body; with the
    byte suites re-sends are verbatim, with URE the node re-randomizes first.
    """
    urls = ["http://a.mix.example/mix", "http://b.mix.example/mix"]
    cfg = NodeConfig(retry_interval=retry_interval, reencrypt=suite is Suite.URE)
    ka = crypto.keygen(suite, seed * 2 + 1, group)
    kb = crypto.keygen(suite, seed * 2 + 2, group)
    a = node.new_node(urls[0], ka, seed, cfg, urls)
    rng = random.Random(f"posthorn-resend/{seed}")
    path = [(urls[0], ka.public()), (urls[1], kb.public())]
    plan = codec.build_onion(b"retry me", path, codec.mailbox_id(1), rng)
    node.receive(a, plan.first_slot, None, force_coin=False)
    bodies = []
    for _ in range(n_fetches):
        node.flush_tick(a, a.clock + 1)
        resp = node.dispatch(a)
        if resp.kind is ResponseKind.CARRY:
            bodies.append(channels.emit_carrier(resp, a.url).body)
    return ResendScan(suite.name, len(bodies), repeated_bodies(bodies))


# --------------------------------------------------------------------------
# URE unlinkability surrogate


def ure_matching_game(group: crypto.UreGroup, trials: int, seed: int = 0) -> float:
    """Success rate of guessing which of two ciphertexts a re-encryption came from.

    The guesser matches on any shared group element and flips a coin when
    nothing matches.
    """
    rng = random.Random(f"posthorn-ure-game/{seed}")
    kp = crypto.keygen(Suite.URE, seed, group)
    _, _, y = crypto.ure_keys(kp)
    wins = 0
    for _ in range(trials):
        ma = crypto.powmod(group.g, group.random_exponent(rng), group.p)
        mb = crypto.powmod(group.g, group.random_exponent(rng), group.p)
        ca = crypto.ure_encrypt(group, y, ma, rng)
        cb = crypto.ure_encrypt(group, y, mb, rng)
        pick = rng.random() < 0.5
        out = crypto.ure_reencrypt(group, ca if pick else cb, rng)
        comps = set(out.components())
        if comps & set(ca.components()):
            guess = True
        elif comps & set(cb.components()):
            guess = False
        else:
            guess = rng.random() < 0.5
        wins += guess == pick
    return wins / trials
