import sys
from pathlib import Path

# make the sibling oracle helpers importable when running from the repo root
sys.path.insert(0, str(Path(__file__).resolve().parent))
