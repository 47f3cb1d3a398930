import sys
from pathlib import Path

# Let tests import sibling oracle modules without packaging the test tree.
sys.path.insert(0, str(Path(__file__).parent))
