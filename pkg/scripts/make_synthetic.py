"""Write a simulated observed dataset and its schema, ready for ``pomi estimate``.

    python scripts/make_synthetic.py --n 2931 --seed 5 --out data/
"""
import argparse
import json
from pathlib import Path

from pomi.data import write_csv
from pomi.samplers import SIM_ROLES, SimConfig, make_rng, simulate_observed


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2931)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--alpha", type=float, default=0.0)
    ap.add_argument("--out", default="data")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = SimConfig(n=args.n, alpha=args.alpha)
    d = simulate_observed(cfg, make_rng(args.seed))
    write_csv(d, out / "observed.csv")
    with open(out / "schema.json", "w") as fh:
        json.dump({"columns": {k: v.value for k, v in SIM_ROLES.items()}, "na_token": "NA"}, fh, indent=2)
        fh.write("\n")
    print(f"wrote {out / 'observed.csv'} ({d.n_rows} rows) and {out / 'schema.json'}")


if __name__ == "__main__":
    main()
