"""Hashing and canonical JSON used to chain pipeline artifacts together.

Every stage writes a manifest describing its inputs and outputs; downstream
stages refuse to run when the recorded hashes disagree with the files on
disk.  Hashes of scene files always cover the canonical serialization, so
comments and whitespace never break provenance.
"""

from __future__ import annotations

import hashlib
import json


def canonical_json(obj):
    """Deterministic JSON: sorted keys, no whitespace, repr-style floats."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_text(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
