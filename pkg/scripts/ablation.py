"""Run every quantization mode with the same seed and budget and write the
per-mode runs plus a combined cost table (``qanas ablate`` with defaults)."""

import sys

from qanas import cli

if __name__ == "__main__":
    argv = sys.argv[1:] or ["--out", "runs/ablation"]
    raise SystemExit(cli.main(["ablate", *argv]))
