"""Shared plumbing: stateless seeded RNG derivation, atomic file writes."""

from __future__ import annotations

import hashlib
import os
import tempfile

import numpy as np


def seeded_rng(*keys) -> np.random.Generator:
    """Derive an independent PCG64 generator from a tuple of ints/strings.

    Stateless by construction: the same key tuple always yields the same
    stream, so training loops can re-derive per-step randomness after a
    resume instead of persisting generator state.
    """
    h = hashlib.sha256()
    for k in keys:
        if isinstance(k, (int, np.integer)):
            h.update(b"i" + int(k).to_bytes(16, "little", signed=True))
        elif isinstance(k, str):
            h.update(b"s" + k.encode("utf-8"))
        else:
            raise TypeError(f"rng key must be int or str, got {type(k)!r}")
        h.update(b"\x00")
    digest = h.digest()
    words = [int.from_bytes(digest[i : i + 8], "little") for i in range(0, 32, 8)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def atomic_write_text(path: str, text: str) -> None:
    dirname = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=dirname, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path: str, blob: bytes) -> None:
    dirname = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=dirname, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fmt_float(x: float) -> str:
    """Shortest round-trip decimal form; keeps metrics CSVs bitwise reproducible."""
    return repr(float(x))
