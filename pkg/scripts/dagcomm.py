"""
Run the dagcomm command line from a checkout without installing the package.

Usage:
    python scripts/dagcomm.py train --config run.yaml --out runs/tj
"""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), ".."))

from dagcomm.cli import main  # noqa: E402

if __name__ == "__main__":
    exit(main())
