"""Small shared helpers: rounding, seeding, canonical JSON."""

import hashlib
import json
import math

import numpy as np


def round_half_up(x: float) -> int:
    """Round to nearest integer with ties going up (0.5 -> 1), unlike banker's round()."""
    return int(math.floor(x + 0.5))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Derive n independent generators from one seed; order defines the stream identity."""
    seqs = np.random.SeedSequence(seed).spawn(n)
    return [np.random.default_rng(s) for s in seqs]


def canonical_json(obj) -> str:
    """Deterministic JSON serialization (sorted keys, fixed separators)."""
    return json.dumps(obj, sort_keys=True, indent=2)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
