"""Mean requests per surfer visit as the coin bias varies.

    python3 scripts/chain_length.py --out results/chain_length.json
"""

import argparse
import json
import time
from pathlib import Path

from posthorn import simulator
from posthorn.simulator import SimConfig


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--biases", default="0,0.25,0.5,0.75")
    ap.add_argument("--surfers", type=int, default=200)
    ap.add_argument("--ticks", type=int, default=550)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--out", default="results/chain_length.json")
    args = ap.parse_args()

    rows = []
    for bias in (float(b) for b in args.biases.split(",")):
        t0 = time.perf_counter()
        rep = simulator.run(SimConfig(n_surfers=args.surfers, coin_bias=bias, trickle=True,
                                      max_ticks=args.ticks, seed=args.seed))
        mean = float(simulator.mean_chain_length(rep))
        rows.append({"coin_bias": bias, "visits": len(rep.carry_chain_lengths), "mean_chain_length": mean,
                     "expected": 1 / (1 - bias) if bias < 1 else None,
                     "seconds": round(time.perf_counter() - t0, 2)})
        print(f"bias {bias:.2f}: mean {mean:.4f} over {rows[-1]['visits']} visits "
              f"(geometric law {rows[-1]['expected']:.4f})")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(rows, indent=2) + "\n")


if __name__ == "__main__":
    main()
