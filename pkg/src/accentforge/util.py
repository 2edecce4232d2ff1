"""Small shared helpers: stable seeds and content fingerprints."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path


def stable_seed(*parts) -> int:
    """Deterministic 63-bit seed from arbitrary string/int parts.

    Unlike hash(), stable across processes and Python versions.
    """
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little") >> 1


def fingerprint(obj) -> str:
    """Short content hash of a JSON-serializable object."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def file_fingerprint(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
