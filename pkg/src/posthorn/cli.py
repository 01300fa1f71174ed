"""``posthorn`` command line: keygen, send, poll, simulate, attack, report.

Exit codes: 0 success, 1 I/O problem, 2 invalid input.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import random
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import adversary, channels, codec, crypto, simulator
from .crypto import Suite
from .gateway import MIX_PATH, Browser
from .simulator import ConfigError, ReceiverSpec, SenderSpec, SimConfig

EXIT_OK, EXIT_IO, EXIT_INVALID = 0, 1, 2


class UsageError(Exception):
    """Bad arguments; maps to exit code 2."""


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# keygen


def cmd_keygen(args) -> int:
    suite = Suite[args.suite]
    group = crypto.GROUPS_BY_NAME[args.group]
    kp = crypto.keygen(suite, args.seed, group)
    out = _out(args)
    crypto.write_keyfile(out / f"{args.name}.key", kp)
    crypto.write_keyfile(out / f"{args.name}.pub", kp.public())
    print(f"wrote {out / (args.name + '.key')} and {out / (args.name + '.pub')} ({suite.name})")
    return EXIT_OK


# --------------------------------------------------------------------------
# send / poll


def capacity_law(path: list[tuple[str, crypto.PublicKey]], recipient: crypto.PublicKey | None,
                 extra: int = 0) -> tuple[int, str]:
    """Largest payload for ``path`` and a one-line explanation of where the bytes go."""
    onion = codec.max_payload(path)
    cap = onion - extra
    if recipient is not None:
        cap = crypto.max_plaintext(recipient, onion) - extra
    spent = codec.SLOT_CAPACITY - onion
    text = (f"capacity {cap} bytes = {codec.SLOT_CAPACITY} (slot minus length field) "
            f"- {spent} (per-hop headers and layer overheads over {len(path)} hops)")
    if recipient is not None:
        text += f" - {crypto.overhead(recipient.suite)} (end-to-end layer)"
    if extra:
        text += f" - {extra} (message index)"
    return cap, text


def _split(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _read_public(path: str) -> crypto.PublicKey:
    key = crypto.read_keyfile(path)
    return key.public() if isinstance(key, crypto.KeyPair) else key


def _gateway_base(url: str) -> str:
    return url[: -len(MIX_PATH)] if url.endswith(MIX_PATH) else url.rstrip("/")


def cmd_send(args) -> int:
    payload = Path(args.payload).read_bytes()
    mailbox = codec.mailbox_id(args.mailbox)
    if args.simulate is not None:
        return _send_simulated(args, payload, mailbox)
    urls, keyfiles = _split(args.path), _split(args.keys or "")
    if len(urls) != len(keyfiles):
        raise UsageError(f"--path names {len(urls)} nodes but --keys names {len(keyfiles)} key files")
    if args.to is None:
        raise UsageError("--to (recipient public key) is required unless --simulate is given")
    path = [(u, _read_public(k)) for u, k in zip(urls, keyfiles)]
    recipient = _read_public(args.to)
    try:
        codec._check_path(path)
    except codec.PathError as exc:
        raise UsageError(str(exc)) from None
    cap, law = capacity_law(path, recipient)
    if len(payload) > cap:
        print(f"payload of {len(payload)} bytes too large; {law}", file=sys.stderr)
        return EXIT_INVALID
    rng = random.Random(args.seed) if args.seed is not None else None
    inner = crypto.encrypt(recipient, payload, rng)
    plan = codec.build_onion(inner, path, mailbox, rng)
    print(f"first hop: {plan.first_hop}")
    for url, ack in plan.per_hop_acks:
        print(f"expected ack from {url}: {ack.hex()}")
    if args.dry_run:
        return EXIT_OK
    _submit(plan, args.visits, args.timeout)
    return EXIT_OK


def _submit(plan: codec.OnionPlan, visits: int, timeout: float) -> None:
    """Swap the onion into the first carrier seen at the entry node, else post it directly."""
    browser = Browser(timeout)
    base = _gateway_base(plan.first_hop)
    done = []

    def substitute(slot, target):
        if done:
            return None
        done.append(target)
        return plan.first_slot, plan.first_hop

    for _ in range(visits):
        browser.visit(base, substitute)
        if done:
            print("submitted in place of a carrier")
            return
    browser.post_slot(plan.first_hop, plan.first_slot)
    print("no carrier offered; submitted directly")


def _send_simulated(args, payload: bytes, mailbox: bytes) -> int:
    cfg = SimConfig.load(args.simulate) if args.simulate != "-" else SimConfig()
    try:
        hops = [int(i) for i in _split(args.path)]
    except ValueError:
        raise UsageError("simulator paths are comma-separated node indices") from None
    cfg.senders = list(cfg.senders) + [SenderSpec(payload, hops, mailbox)]
    cfg.receivers = list(cfg.receivers) + [ReceiverSpec(mailbox, hops[-1] if hops else 0, args.poll_rate)]
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.trickle = True
    cfg.stop_when_quiescent = True
    cfg.validate()
    nodes = simulator.make_nodes(cfg)
    path = [(nodes[i].url, nodes[i].keypair.public()) for i in hops]
    recipient = crypto.keygen(Suite[cfg.suite], 0, crypto.GROUPS_BY_NAME[cfg.ure_group]).public()
    cap, law = capacity_law(path, recipient, extra=4)
    if len(payload) > cap:
        print(f"payload of {len(payload)} bytes too large; {law}", file=sys.stderr)
        return EXIT_INVALID
    report = simulator.run(cfg)
    tick = report.delivered[-1]
    if args.out:
        report.write(_out(args))
    if tick is None:
        print(f"not delivered within {cfg.max_ticks} ticks")
        return EXIT_OK
    print(f"delivered at tick {tick} (bit-exact: {report.delivered_ok[-1]})")
    return EXIT_OK


def cmd_poll(args) -> int:
    kp = crypto.read_keyfile(args.key)
    if not isinstance(kp, crypto.KeyPair):
        raise UsageError(f"{args.key} holds no secret key")
    node_pk = _read_public(args.node_key)
    mailbox = codec.mailbox_id(args.mailbox)
    browser = Browser(args.timeout)
    for _ in range(args.visits):
        polled = []

        def substitute(slot, target):
            if polled:
                return None
            polled.append(1)
            return codec.build_get(mailbox, node_pk), args.node

        chain = browser.visit(_gateway_base(args.node), substitute)
        if not polled:
            continue
        for ex in chain[1:]:
            carried = channels.parse_carrier(ex.body.decode("utf-8"))
            if carried is None:
                continue
            data = codec.unpad(carried[1])
            message = crypto.decrypt(kp, data) if data else None
            if message is not None:
                if args.output:
                    Path(args.output).write_bytes(message)
                else:
                    sys.stdout.buffer.write(message + b"\n")
                return EXIT_OK
    print("no message retrieved", file=sys.stderr)
    return EXIT_IO


# --------------------------------------------------------------------------
# simulate


_SCALAR_FIELDS = [f for f in dataclasses.fields(SimConfig) if f.name not in ("senders", "receivers")]


def _apply_overrides(cfg: SimConfig, args) -> SimConfig:
    for f in _SCALAR_FIELDS:
        value = getattr(args, f"cfg_{f.name}")
        if value is not None:
            setattr(cfg, f.name, value)
    return cfg


def simulate_summary(sim: simulator.Simulation, report: simulator.SimReport) -> dict:
    summary = report.summary()
    try:
        res = adversary.distinguisher(adversary.project(report.trace), sim.labels())
        summary["distinguisher_accuracy"] = res.accuracy
        summary["distinguisher_rule"] = res.rule
    except adversary.SampleSizeError as exc:
        summary["distinguisher_accuracy"] = None
        summary["distinguisher_rule"] = str(exc)
    return summary


def _run_one(cfg: SimConfig, out: Path) -> dict:
    sim = simulator.Simulation(cfg)
    report = sim.run()
    report.write(out)
    summary = simulate_summary(sim, report)
    _write_json(out / "summary.json", summary)
    (out / "summary.txt").write_text(_table(summary))
    return summary


def _table(d: dict) -> str:
    width = max((len(k) for k in d), default=0)
    lines = []
    for k in sorted(d):
        v = d[k]
        if isinstance(v, float):
            v = f"{v:.4f}"
        lines.append(f"{k:<{width}}  {v}")
    return "\n".join(lines) + "\n"


def cmd_simulate(args) -> int:
    cfg = SimConfig.load(args.config) if args.config else SimConfig()
    cfg = _apply_overrides(cfg, args)
    cfg.validate()
    out = _out(args)
    seeds = [int(s) for s in _split(args.seeds)] if args.seeds else None
    if not seeds:
        print(_table(_run_one(cfg, out)), end="")
        return EXIT_OK
    configs = [dataclasses.replace(cfg, seed=s) for s in seeds]
    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        summaries = list(pool.map(lambda c: _run_one(c, out / f"seed-{c.seed}"), configs))
    for s, summary in zip(seeds, summaries):
        print(f"seed {s}: mean chain {summary['mean_chain_length']}, delivered {summary['delivered']}"
              f"/{summary['senders']}, accuracy {summary['distinguisher_accuracy']}")
    return EXIT_OK


# --------------------------------------------------------------------------
# attack


def cmd_attack(args) -> int:
    out = _out(args)
    if args.kind == "dos":
        rep = adversary.dos_drain(args.ack == "on", args.fetches, args.pool_size, args.seed)
        data = {"kind": "dos", **rep.to_dict()}
        _write_json(out / "drain.json", data)
        if rep.drain_fetch is None:
            print(f"pool not drained after {rep.n_fetches} fetches "
                  f"(min pending {rep.min_pending_during_attack}, delivered {rep.delivered})")
        else:
            print(f"pool drained after fetch {rep.drain_fetch}; delivered {rep.delivered}")
    elif args.kind == "resend":
        scans = [adversary.resend_leak(Suite[s], args.fetches, seed=args.seed) for s in _split(args.suites)]
        data = {"kind": "resend", "scans": [dataclasses.asdict(s) for s in scans]}
        _write_json(out / "resend.json", data)
        for s in scans:
            print(f"{s.suite}: {s.repeats} repeated bodies over {s.sends} carrier responses")
    elif args.kind == "ure-game":
        acc = adversary.ure_matching_game(crypto.GROUPS_BY_NAME[args.group], args.trials, args.seed)
        _write_json(out / "ure_game.json", {"kind": "ure-game", "group": args.group,
                                             "trials": args.trials, "accuracy": acc})
        print(f"matching accuracy {acc:.4f} over {args.trials} trials")
    else:  # distinguish
        if args.trace is None:
            raise UsageError("distinguish needs --trace")
        trace = simulator.load_trace(args.trace)
        labels = {e.client_id: e.client_role for e in trace}
        res = adversary.distinguisher(adversary.project(trace), labels, seed=args.seed)
        _write_json(out / "accuracy.json", {"kind": "distinguish", **dataclasses.asdict(res)})
        print(f"accuracy {res.accuracy:.4f} on {res.n_trials} held-out clients; rule: {res.rule}")
    return EXIT_OK


# --------------------------------------------------------------------------
# report


def _chart(path: Path, title: str, xlabel: str, ylabel: str, series: dict[str, list], kind: str = "line") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "posthorn"
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name in sorted(series):
        ys = series[name]
        if kind == "line":
            ax.plot(range(len(ys)), ys, label=name, linewidth=1)
        else:
            xs = sorted(set(ys))
            ax.bar(xs, [ys.count(x) for x in xs], label=name)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if series and any(series.values()):
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def render_report(data: dict, out: Path) -> list[Path]:
    """Charts and a text table for a simulate/attack output; a pure function of ``data``."""
    written = []
    kind = data.get("kind", "simulate")
    if kind == "dos":
        label = "acks on" if data["ack_enabled"] else "acks off"
        p = out / "pool_sizes.svg"
        _chart(p, "pool under fetch loop", "attacker fetch", "pending messages", {label: data["pending_series"]})
        written.append(p)
        rows = {k: data[k] for k in ("ack_enabled", "n_fetches", "drain_fetch", "delivered",
                                      "min_pending_during_attack", "final_pool", "final_ack_table")}
    elif kind == "simulate":
        p = out / "pool_sizes.svg"
        _chart(p, "pool size per node", "tick", "entries", data.get("pool_sizes_over_time", {}))
        written.append(p)
        p = out / "chain_lengths.svg"
        _chart(p, "requests per visit", "chain length", "visits",
               {"visits": data.get("carry_chain_lengths", [])}, kind="hist")
        written.append(p)
        rows = dict(data.get("summary", {}))
        rows.pop("delivery_ticks", None)
    elif kind == "resend":
        rows = {s["suite"]: f"{s['repeats']} repeats / {s['sends']} sends" for s in data["scans"]}
    elif kind in ("ure-game", "distinguish"):
        rows = {k: v for k, v in data.items() if not isinstance(v, (list, dict))}
    else:
        raise UsageError(f"unknown report kind {kind!r}")
    if kind == "simulate" or "accuracy" in data:
        acc = rows.get("distinguisher_accuracy", data.get("accuracy"))
        rows["accuracy_table"] = "n/a" if acc is None else f"{acc:.4f} (threshold 0.55)"
    p = out / "report.txt"
    p.write_text(_table(rows))
    written.append(p)
    return written


def cmd_report(args) -> int:
    src = Path(args.report)
    data = json.loads(src.read_text())
    if "kind" not in data:
        summary = src.with_name("summary.json")
        if summary.exists():
            data.setdefault("summary", {}).update(json.loads(summary.read_text()))
    for p in render_report(data, _out(args)):
        print(p)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _optional_int(text: str) -> int | None:
    return None if text.lower() == "none" else int(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="posthorn", description="Web-surfer-carried mix network tools.")
    sub = p.add_subparsers(dest="command", required=True)

    k = sub.add_parser("keygen", help="generate a node or recipient key pair")
    k.add_argument("--suite", choices=[s.name for s in Suite], default="HYBRID")
    k.add_argument("--group", choices=sorted(crypto.GROUPS_BY_NAME), default="modp2048",
                   help="group for the URE suite")
    k.add_argument("--seed", type=int, default=None, help="deterministic key (tests only)")
    k.add_argument("--name", default="node")
    k.add_argument("--out", default=".")
    k.set_defaults(func=cmd_keygen)

    s = sub.add_parser("send", help="build an onion and submit it")
    s.add_argument("--payload", required=True, help="file holding the message")
    s.add_argument("--path", required=True,
                   help="comma-separated node URLs (or node indices with --simulate)")
    s.add_argument("--keys", help="comma-separated public key files, one per hop")
    s.add_argument("--to", help="recipient public key file")
    s.add_argument("--mailbox", required=True, help="128-bit mailbox id in hex")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--dry-run", action="store_true", help="print the plan without submitting")
    s.add_argument("--visits", type=int, default=8, help="frameset visits to wait for a carrier")
    s.add_argument("--timeout", type=float, default=10.0)
    s.add_argument("--simulate", metavar="CONFIG", nargs="?", const="-",
                   help="inject into a simulated network instead (CONFIG optional)")
    s.add_argument("--poll-rate", type=float, default=0.2, help="receiver poll rate in simulator mode")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_send)

    q = sub.add_parser("poll", help="fetch a message from a mailbox")
    q.add_argument("--node", required=True, help="script URL of the mailbox node")
    q.add_argument("--node-key", required=True, help="public key file of that node")
    q.add_argument("--key", required=True, help="recipient secret key file")
    q.add_argument("--mailbox", required=True)
    q.add_argument("--visits", type=int, default=16)
    q.add_argument("--timeout", type=float, default=10.0)
    q.add_argument("--output", default=None, help="write the message here instead of stdout")
    q.set_defaults(func=cmd_poll)

    m = sub.add_parser("simulate", help="run the simulator")
    m.add_argument("config", nargs="?", help="SimConfig JSON file")
    m.add_argument("--out", default="sim-out")
    m.add_argument("--seeds", help="comma-separated seed sweep")
    m.add_argument("--workers", type=int, default=4)
    for f in _SCALAR_FIELDS:
        t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        if t == "bool":
            conv = _bool
        elif t == "int":
            conv = int
        elif "int" in t and "None" in t:
            conv = _optional_int
        elif "float" in t:
            conv = float
        else:
            conv = str
        m.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", type=conv, default=None,
                       help=f"override config field {f.name}")
    m.set_defaults(func=cmd_simulate)

    a = sub.add_parser("attack", help="adversary experiments")
    a.add_argument("kind", choices=["dos", "resend", "ure-game", "distinguish"])
    a.add_argument("--ack", choices=["on", "off"], default="off")
    a.add_argument("--fetches", type=int, default=1000)
    a.add_argument("--pool-size", type=int, default=5)
    a.add_argument("--suites", default="TEST,HYBRID,URE")
    a.add_argument("--group", choices=sorted(crypto.GROUPS_BY_NAME), default="test256")
    a.add_argument("--trials", type=int, default=10000)
    a.add_argument("--trace", help="trace.jsonl for distinguish")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", default="attack-out")
    a.set_defaults(func=cmd_attack)

    r = sub.add_parser("report", help="render charts and tables from a JSON result")
    r.add_argument("report", help="report.json, drain.json, resend.json, ...")
    r.add_argument("--out", default="report-out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, crypto.SizeError, codec.CodecError, adversary.AdversaryError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, crypto.CryptoError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
