"""Write the bundled fixtures: a demo pipeline tree and the 10,507-row label CSV.

    python scripts/make_fixtures.py --out demo
"""

import argparse
from pathlib import Path

from xraykit.fixtures import table1_csv, write_demo


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="demo")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-train", type=int, default=240)
    ap.add_argument("--n-test", type=int, default=60)
    args = ap.parse_args()

    root = Path(args.out)
    ini = write_demo(root, seed=args.seed, n_train=args.n_train, n_test=args.n_test)
    (root / "distribution_labels.csv").write_text(table1_csv(args.seed))
    print(f"wrote {ini}")
    print(f"wrote {root / 'distribution_labels.csv'}")


if __name__ == "__main__":
    main()
