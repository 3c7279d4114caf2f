from __future__ import annotations

import sys
from pathlib import Path

# Make sibling helper modules (_synth, _oracles) importable from any test.
sys.path.insert(0, str(Path(__file__).parent))
