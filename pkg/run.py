#!/usr/bin/env python3
"""
Entry point for jamident.
This script allows running the workbench from the project root.
"""

import sys

from src.jamident import main

if __name__ == "__main__":
    sys.exit(main())
