"""The SENT desk laboratory."""

from __future__ import annotations

import json
from pathlib import Path

__version__ = json.loads(
    (Path(__file__).parent / "manifest.json").read_text(encoding="utf-8")
)["version"]
