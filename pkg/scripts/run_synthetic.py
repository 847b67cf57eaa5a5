"""Generate the synthetic grant file and run the whole pipeline on it.

    python3 scripts/run_synthetic.py [--config configs/synthetic.toml]
"""
import argparse
import sys
from pathlib import Path

from fitrank.cli import main

ROOT = Path(__file__).resolve().parents[1]


def run(config: Path) -> int:
    for cmd in ("synth", "all"):
        code = main([cmd, "--config", str(config)])
        if code:
            print(f"{cmd} failed with exit code {code}", file=sys.stderr)
            return code
    return 0


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "synthetic.toml")
    sys.exit(run(ap.parse_args().config))
