import os
import sys

# Make the groundkit package importable from the repository root
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
