"""Parameter trees, initialisation helpers and blob serialisation.

A parameter tree is a nested ``dict`` whose leaves are float32 arrays and
whose inner nodes are dicts or lists. Flattened names use dots, list items
use their index (``backbone.blocks.3.attn.wq``).
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from .tensorkit import DTYPE

MANIFEST_VERSION = 1


def iter_leaves(tree: Any, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
    if isinstance(tree, np.ndarray):
        yield prefix, tree
    elif isinstance(tree, dict):
        for key, sub in tree.items():
            yield from iter_leaves(sub, f"{prefix}.{key}" if prefix else str(key))
    elif isinstance(tree, (list, tuple)):
        for i, sub in enumerate(tree):
            yield from iter_leaves(sub, f"{prefix}.{i}" if prefix else str(i))
    else:
        raise TypeError(f"unexpected leaf {type(tree)!r} at {prefix!r}")


def flatten(tree: Any) -> dict[str, np.ndarray]:
    return dict(iter_leaves(tree))


def num_params(tree: Any) -> int:
    return sum(int(a.size) for _, a in iter_leaves(tree))


def freeze(tree: Any) -> Any:
    """Mark every leaf read-only; returns the same tree."""
    for _, arr in iter_leaves(tree):
        arr.flags.writeable = False
    return tree


class Init:
    """Deterministic initialiser bound to a numpy Generator."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def normal(self, shape, std: float) -> np.ndarray:
        return (self.rng.standard_normal(shape, dtype=np.float32) * std).astype(DTYPE)

    def uniform(self, shape, low: float, high: float) -> np.ndarray:
        return self.rng.uniform(low, high, size=shape).astype(DTYPE)

    @staticmethod
    def zeros(shape) -> np.ndarray:
        return np.zeros(shape, dtype=DTYPE)

    @staticmethod
    def ones(shape) -> np.ndarray:
        return np.ones(shape, dtype=DTYPE)

    def linear(self, d_in: int, d_out: int, bias: bool = True) -> dict:
        bound = 1.0 / np.sqrt(d_in)
        p = {"weight": self.uniform((d_out, d_in), -bound, bound)}
        if bias:
            p["bias"] = self.zeros(d_out)
        return p

    def conv(self, c_in: int, c_out: int, k: int, groups: int = 1, bias: bool = True) -> dict:
        fan_in = (c_in // groups) * k * k
        bound = 1.0 / np.sqrt(fan_in)
        p = {"weight": self.uniform((c_out, c_in // groups, k, k), -bound, bound)}
        if bias:
            p["bias"] = self.zeros(c_out)
        return p

    def conv_norm(self, c_in: int, c_out: int, k: int, groups: int = 1) -> dict:
        p = self.conv(c_in, c_out, k, groups, bias=False)
        p["norm"] = {"weight": self.ones(c_out), "bias": self.zeros(c_out)}
        return p

    def layer_norm(self, d: int) -> dict:
        return {"weight": self.ones(d), "bias": self.zeros(d)}

    def attention(self, d: int) -> dict:
        p = {}
        for name in ("q", "k", "v", "o"):
            lin = self.linear(d, d)
            p[f"w{name}"] = lin["weight"]
            p[f"b{name}"] = lin["bias"]
        return p

    def mlp(self, dims: list[int]) -> list[dict]:
        return [self.linear(a, b) for a, b in zip(dims[:-1], dims[1:])]


def manifest(tree: Any) -> list[dict]:
    entries, offset = [], 0
    for name, arr in iter_leaves(tree):
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": "float32"})
        offset += int(arr.size)
    return entries


def save(tree: Any, path: str | Path, extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``<path>.bin`` (little-endian float32) and ``<path>.json`` manifest."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    man_path = path.with_suffix(".json")
    leaves = [a.astype("<f4").reshape(-1) for _, a in iter_leaves(tree)]
    flat = np.concatenate(leaves) if leaves else np.zeros(0, "<f4")
    blob_path.write_bytes(flat.tobytes())
    doc = {"version": MANIFEST_VERSION, "count": int(flat.size), "tensors": manifest(tree)}
    if extra:
        doc["meta"] = extra
    man_path.write_text(json.dumps(doc, indent=1))
    return blob_path, man_path


def _insert(tree: dict, name: str, value: np.ndarray) -> None:
    keys = name.split(".")
    node = tree
    for key in keys[:-1]:
        node = node.setdefault(key, {})
    node[keys[-1]] = value


def _listify(node: Any) -> Any:
    if isinstance(node, dict):
        node = {k: _listify(v) for k, v in node.items()}
        if node and all(k.isdigit() for k in node):
            return [node[str(i)] for i in range(len(node))]
    return node


def load(path: str | Path) -> Any:
    path = Path(path)
    doc = json.loads(path.with_suffix(".json").read_text())
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f4")
    if flat.size != doc["count"]:
        raise ValueError(f"blob holds {flat.size} values, manifest expects {doc['count']}")
    tree: dict = {}
    for entry in doc["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = flat[entry["offset"] : entry["offset"] + n].astype(DTYPE).reshape(entry["shape"])
        _insert(tree, entry["name"], arr)
    return _listify(tree)
