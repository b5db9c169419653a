"""
RGLM - reconstructive graph instruction tuning, main entry point.

Thin controller around ``rglm.cli``; run ``python main.py --help`` for the
subcommands (gen-data, pretrain-gnn, train, eval, ablate, sweep, mi-verify,
grad-check, attention-report, timing-report, cross-eval).
"""

import pathlib
import sys

# Ensure repository root is on sys.path for imports
_REPO_ROOT = pathlib.Path(__file__).resolve().parent
if str(_REPO_ROOT) not in sys.path:
    sys.path.insert(0, str(_REPO_ROOT))

from rglm.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
