"""Layer-keyed parameter maps and the on-disk checkpoint container."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

MAGIC = b"HAFCKPT1"

# partition tags are ("stem", m), ("stack", m) or ("decoder", None)
Tag = tuple


@dataclass
class ParamMap:
    """Ordered mapping layer-id -> float64 array, each key tagged with its partition."""

    arrays: dict[str, np.ndarray]
    tags: dict[str, Tag] = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.arrays.items():
            if v.dtype != np.float64:
                self.arrays[k] = np.asarray(v, dtype=np.float64)
            self.tags.setdefault(k, ("decoder", None))

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]

    def __setitem__(self, key: str, value: np.ndarray) -> None:
        self.arrays[key] = value

    def __contains__(self, key: str) -> bool:
        return key in self.arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def keys(self):
        return self.arrays.keys()

    def items(self):
        return self.arrays.items()

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self.arrays.items()}

    def size(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def copy(self) -> "ParamMap":
        return ParamMap({k: v.copy() for k, v in self.arrays.items()}, dict(self.tags))

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamMap":
        return ParamMap({k: fn(v) for k, v in self.arrays.items()}, dict(self.tags))

    def zip_map(self, other: "ParamMap", fn) -> "ParamMap":
        check_compatible(self, other)
        return ParamMap({k: fn(v, other.arrays[k]) for k, v in self.arrays.items()}, dict(self.tags))

    def zeros_like(self) -> "ParamMap":
        return self.map(np.zeros_like)

    def select(self, keys: Iterable[str]) -> "ParamMap":
        keys = list(keys)
        return ParamMap({k: self.arrays[k] for k in keys}, {k: self.tags[k] for k in keys})

    def keys_where(self, kind: str, modality=None) -> list[str]:
        return [k for k, t in self.tags.items()
                if t[0] == kind and (modality is None or t[1] == modality)]

    def flat(self) -> np.ndarray:
        if not self.arrays:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def with_flat(self, vec: np.ndarray) -> "ParamMap":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size():
            raise ValueError(f"flat vector has {vec.size} elements, expected {self.size()}")
        out, i = {}, 0
        for k, v in self.arrays.items():
            out[k] = vec[i:i + v.size].reshape(v.shape).copy()
            i += v.size
        return ParamMap(out, dict(self.tags))

    def __add__(self, other: "ParamMap") -> "ParamMap":
        return self.zip_map(other, np.add)

    def __sub__(self, other: "ParamMap") -> "ParamMap":
        return self.zip_map(other, np.subtract)

    def scale(self, c: float) -> "ParamMap":
        return self.map(lambda v: c * v)

    def max_abs_diff(self, other: "ParamMap") -> float:
        check_compatible(self, other)
        return max((float(np.max(np.abs(v - other.arrays[k]))) if v.size else 0.0)
                   for k, v in self.arrays.items())

    def equals(self, other: "ParamMap") -> bool:
        """Bit-exact equality of keys, shapes, tags and values."""
        if list(self.arrays) != list(other.arrays) or self.tags != other.tags:
            return False
        return all(np.array_equal(v, other.arrays[k]) and v.shape == other.arrays[k].shape
                   for k, v in self.arrays.items())


def check_compatible(a: ParamMap, b: ParamMap) -> None:
    if a.arrays.keys() != b.arrays.keys():
        missing = set(a.arrays) ^ set(b.arrays)
        raise ValueError(f"parameter maps differ in keys: {sorted(missing)[:5]}")
    for k, v in a.arrays.items():
        if v.shape != b.arrays[k].shape:
            raise ValueError(f"shape mismatch at {k}: {v.shape} vs {b.arrays[k].shape}")


def _tag_to_json(tag: Tag) -> list:
    return [tag[0], tag[1]]


def _header(params: ParamMap, arch: dict | None) -> dict:
    layers, offset = [], 0
    for k, v in params.items():
        layers.append({"id": k, "tag": _tag_to_json(params.tags[k]),
                       "shape": list(v.shape), "offset": offset})
        offset += v.size
    return {"format": "hafed-paramap/1", "arch": arch, "layers": layers, "count": offset}


def save_checkpoint(path: str | Path, params: ParamMap, arch: dict | None = None,
                    json_mirror: bool = True) -> Path:
    """Write binary container (header JSON + little-endian float64 payload), atomically."""
    path = Path(path)
    header = json.dumps(_header(params, arch), sort_keys=True).encode()
    payload = params.flat().astype("<f8").tobytes()
    blob = MAGIC + struct.pack("<Q", len(header)) + header + payload
    _atomic_write(path, blob)
    if json_mirror:
        mirror = _header(params, arch)
        mirror["values"] = {k: v.ravel().tolist() for k, v in params.items()}
        _atomic_write(path.with_suffix(path.suffix + ".json"),
                      json.dumps(mirror, sort_keys=True, indent=1).encode())
    return path


def load_checkpoint(path: str | Path) -> tuple[ParamMap, dict | None]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen])
    data = np.frombuffer(blob[16 + hlen:], dtype="<f8")
    if data.size != header["count"]:
        raise ValueError(f"{path}: payload has {data.size} values, header says {header['count']}")
    return _from_header(header, lambda lay, n: data[lay["offset"]:lay["offset"] + n]), header["arch"]


def load_json_mirror(path: str | Path) -> tuple[ParamMap, dict | None]:
    doc = json.loads(Path(path).read_text())
    return _from_header(doc, lambda lay, n: np.array(doc["values"][lay["id"]], dtype=np.float64)), doc["arch"]


def _from_header(header: dict, values) -> ParamMap:
    arrays, tags = {}, {}
    for lay in header["layers"]:
        shape = tuple(lay["shape"])
        n = int(np.prod(shape)) if shape else 1
        arrays[lay["id"]] = np.array(values(lay, n), dtype=np.float64).reshape(shape)
        tags[lay["id"]] = tuple(lay["tag"])
    return ParamMap(arrays, tags)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
