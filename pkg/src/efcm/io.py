"""Portable array container and the feature store built on it.

A container at ``base`` is two files: ``base.json`` (manifest) and
``base.bin`` (little-endian raw bytes, arrays back to back). The manifest
lists every array as ``{name, shape, dtype, offset, nbytes}`` plus a free
``meta`` mapping.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT = "efcm-arrays"
VERSION = 1


def _base(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".bin") else p


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> Path:
    base = _base(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(base.with_suffix(".bin"), "wb") as fh:
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = le.tobytes()
            fh.write(raw)
            entries.append(
                {"name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset, "nbytes": len(raw)}
            )
            offset += len(raw)
    manifest = {"format": FORMAT, "version": VERSION, "meta": meta or {}, "arrays": entries}
    base.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return base


def read_manifest(path) -> dict:
    manifest = json.loads(_base(path).with_suffix(".json").read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: not an {FORMAT} manifest")
    if manifest.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported container version {manifest.get('version')}")
    return manifest


def load_arrays(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    base = _base(path)
    manifest = read_manifest(base)
    blob = base.with_suffix(".bin").read_bytes()
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for e in manifest["arrays"]:
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ValueError(f"{base}: truncated blob for {e['name']}")
        out[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return out, manifest["meta"]


class FeatureStore:
    """Per-sample arrays plus a manifest mapping sample id to arrays and label.

    Directory layout::

        store.json        {"version", "meta", "entries": {id: {"arrays": {...}, "label", "split"}}}
        arrays.json/.bin  the container holding every array
    """

    MANIFEST = "store.json"

    def __init__(self, root, entries: dict, arrays: dict, meta: dict):
        self.root = Path(root)
        self.entries = entries
        self._arrays = arrays
        self.meta = meta

    @classmethod
    def write(cls, root, samples: Mapping[str, dict], meta: dict | None = None) -> "FeatureStore":
        """``samples[id] = {"arrays": {key: ndarray}, "label": int, "split": str}``."""
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        arrays: OrderedDict[str, np.ndarray] = OrderedDict()
        entries = {}
        for sid, rec in samples.items():
            names = {}
            for key, arr in rec["arrays"].items():
                name = f"{sid}/{key}"
                arrays[name] = arr
                names[key] = name
            entries[sid] = {"arrays": names, "label": rec.get("label"), "split": rec.get("split")}
        save_arrays(root / "arrays", arrays)
        manifest = {"version": VERSION, "meta": meta or {}, "entries": entries}
        (root / cls.MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return cls(root, entries, arrays, meta or {})

    @classmethod
    def open(cls, root) -> "FeatureStore":
        root = Path(root)
        manifest = json.loads((root / cls.MANIFEST).read_text())
        arrays, _ = load_arrays(root / "arrays")
        return cls(root, manifest["entries"], arrays, manifest.get("meta", {}))

    def ids(self, split: str | None = None) -> list[str]:
        return [k for k, v in self.entries.items() if split is None or v.get("split") == split]

    def get(self, sample_id: str, key: str = "features") -> np.ndarray:
        try:
            name = self.entries[sample_id]["arrays"][key]
        except KeyError:
            raise KeyError(f"feature store {self.root} has no entry {sample_id!r}/{key!r}") from None
        return self._arrays[name]

    def label(self, sample_id: str):
        return self.entries[sample_id]["label"]

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)
