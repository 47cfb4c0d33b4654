"""Named-tensor binary container with a JSON manifest.

``save_tensors("out/x", {...}, meta)`` writes ``out/x.json`` (names, shapes,
dtypes, byte offsets and free-form metadata) next to ``out/x.bin`` holding the
raw little-endian buffers back to back.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".json", ".bin") else path


def save_tensors(path, tensors: dict, meta: dict | None = None) -> Path:
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(stem.with_suffix(".bin"), "wb") as fh:
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            dt = arr.dtype.newbyteorder("<")
            buf = arr.astype(dt, copy=False).tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "dtype": dt.str,
                            "offset": offset, "nbytes": len(buf)})
            fh.write(buf)
            offset += len(buf)
    manifest = {"data_file": stem.with_suffix(".bin").name, "tensors": entries, "meta": meta or {}}
    manifest_path = stem.with_suffix(".json")
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest_path


def load_tensors(path) -> tuple[dict, dict]:
    stem = _stem(path)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    raw = (stem.parent / manifest["data_file"]).read_bytes()
    out = {}
    for e in manifest["tensors"]:
        chunk = raw[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        out[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return out, manifest["meta"]
