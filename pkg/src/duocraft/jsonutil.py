"""Canonical JSON: sorted keys, compact separators, UTF-8, LF.

Log replay and determinism checks compare serialized bytes, so every
writer in the package must go through these helpers.
"""

from __future__ import annotations

import json
from typing import Any


def canonical_dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def canonical_line(obj: Any) -> str:
    return canonical_dumps(obj) + "\n"
