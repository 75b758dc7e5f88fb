"""Shared binary checkpoint primitives: magic-tagged JSON blocks + raw arrays."""
from __future__ import annotations

import json

import numpy as np


def write_json_block(f, magic: bytes, payload: dict) -> None:
    raw = json.dumps(payload, sort_keys=True).encode("utf-8")
    f.write(magic)
    f.write(len(raw).to_bytes(8, "little"))
    f.write(raw)


def read_json_block(f, magic: bytes) -> dict:
    got = f.read(len(magic))
    if got != magic:
        raise ValueError(f"bad checkpoint magic: expected {magic!r}, got {got!r}")
    n = int.from_bytes(f.read(8), "little")
    return json.loads(f.read(n).decode("utf-8"))


def write_arrays(f, arrays) -> None:
    for arr in arrays:
        np.save(f, np.ascontiguousarray(arr), allow_pickle=False)


def read_arrays(f, count: int) -> list[np.ndarray]:
    return [np.load(f, allow_pickle=False) for _ in range(count)]
