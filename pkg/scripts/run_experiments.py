"""Run every config in scripts/configs through the CLI and print each summary.

    python3 scripts/run_experiments.py [--out runs] [config ...]
"""
import argparse
import os
import sys
from pathlib import Path

from hedsgd import cli

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("configs", nargs="*", help="config files (default: scripts/configs/*.ini)")
    ap.add_argument("--out", default="runs", help="output root (sets %s)" % cli.OUTPUT_ROOT_ENV)
    args = ap.parse_args()
    os.environ[cli.OUTPUT_ROOT_ENV] = args.out
    configs = args.configs or sorted(str(p) for p in (HERE / "configs").glob("*.ini"))
    status = 0
    for path in configs:
        print(f"== {path}")
        code = cli.main(["run", path])
        if code:
            print(f"   exit {code}")
            status = status or code
            continue
        spec, _ = cli.validate_config(Path(path).read_text())
        print(cli.resolve_output_dir(spec).joinpath("summary.txt").read_text())
    return status


if __name__ == "__main__":
    sys.exit(main())
