import sys
from pathlib import Path

# make the scalar reference oracles importable from test modules
sys.path.insert(0, str(Path(__file__).parent))
