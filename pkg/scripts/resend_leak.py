"""Repeated carrier bodies per suite, plus the URE component-matching game.

    python3 scripts/resend_leak.py
"""

import argparse
import json
from pathlib import Path

from posthorn import adversary, crypto
from posthorn.crypto import Suite


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fetches", type=int, default=400)
    ap.add_argument("--trials", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/resend_leak.json")
    args = ap.parse_args()

    scans = {}
    for suite in (Suite.TEST, Suite.HYBRID, Suite.URE):
        s = adversary.resend_leak(suite, args.fetches, seed=args.seed)
        scans[suite.name] = {"sends": s.sends, "repeats": s.repeats}
        print(f"{suite.name:6s}: {s.repeats} repeated bodies in {s.sends} carrier responses")
    game = adversary.ure_matching_game(crypto.TEST256, args.trials, args.seed)
    print(f"URE matching game: accuracy {game:.4f} over {args.trials} trials")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"scans": scans, "matching_accuracy": game}, indent=2) + "\n")


if __name__ == "__main__":
    main()
