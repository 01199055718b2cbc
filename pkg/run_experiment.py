#!/usr/bin/env python3
"""
Script to run a binflow experiment from the repository root.
"""

import sys

from binflow.main import main

if __name__ == "__main__":
    sys.exit(main())
