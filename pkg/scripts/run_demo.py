"""Build the demo tree in a scratch directory, run every stage, print the report.

    python scripts/run_demo.py [--keep DIR]
"""

import argparse
import json
import sys
import tempfile
from pathlib import Path

from xraykit.cli import main as cli_main
from xraykit.fixtures import write_demo


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--keep", help="write into this directory instead of a temporary one")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(args.keep) if args.keep else Path(tmp)
        ini = write_demo(root, seed=args.seed)
        code = cli_main(["run", "--config", str(ini)])
        if code:
            sys.exit(code)
        out = root / "out"
        print((out / "report.txt").read_text())
        det = json.loads((out / "detection.json").read_text())
        print(f"detection AP@{det['iou_threshold']}: {det['ap']:.3f}")


if __name__ == "__main__":
    main()
