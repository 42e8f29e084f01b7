"""Parameter checkpoints: a JSON manifest of (name, shape, offset) then raw float32."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import FormatError
from ..formats import MAGIC_CHECKPOINT, read_container, write_container
from .core import Parameter


def save_checkpoint(path, params: Sequence[Parameter], meta: dict | None = None) -> None:
    entries = []
    offset = 0
    for p in params:
        entries.append({"name": p.name, "shape": list(p.shape), "dtype": "f32le", "offset": offset})
        offset += p.size * 4
    header = {"params": entries, "meta": meta or {}}
    payload = np.concatenate([p.data.astype(np.float32).reshape(-1) for p in params]) if params else np.zeros(0)
    write_container(path, MAGIC_CHECKPOINT, header, payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``({name: array}, meta)``."""
    header, flat = read_container(path, MAGIC_CHECKPOINT)
    arrays: dict[str, np.ndarray] = {}
    for entry in header.get("params", []):
        start = entry["offset"] // 4
        n = int(np.prod(entry["shape"], dtype=np.int64))
        if start + n > flat.size:
            raise FormatError(f"{path}: parameter {entry['name']!r} overruns the payload at byte {entry['offset']}")
        arrays[entry["name"]] = flat[start:start + n].reshape(entry["shape"]).copy()
    return arrays, header.get("meta", {})
