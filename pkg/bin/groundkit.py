#!/usr/bin/env python3
"""
Command-line entry point for groundkit.
"""
import os
import sys

# Add repository root to Python path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from groundkit.cli import main

if __name__ == "__main__":
    sys.exit(main())
