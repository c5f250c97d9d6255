#!/usr/bin/env python3
"""
Launcher for the pemn command line.

    python pemn.py train --preset mlp_small --strategy rp --rate 1e-2 --dataset mnist
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
