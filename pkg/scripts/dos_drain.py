"""Attacker fetch loop against a small pool, with and without ACKs; writes the pending curves.

    python3 scripts/dos_drain.py --fetches 10000
"""

import argparse
import json
from pathlib import Path

from posthorn import adversary


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fetches", type=int, default=10_000)
    ap.add_argument("--pool-size", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/dos_drain.json")
    args = ap.parse_args()

    result = {}
    for acks in (False, True):
        rep = adversary.dos_drain(acks, args.fetches, args.pool_size, args.seed)
        result["on" if acks else "off"] = rep.to_dict()
        print(f"acks {'on ' if acks else 'off'}: drain fetch {rep.drain_fetch}, "
              f"min pending {rep.min_pending_during_attack}, delivered {rep.delivered}/{args.pool_size}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(result, indent=2) + "\n")


if __name__ == "__main__":
    main()
