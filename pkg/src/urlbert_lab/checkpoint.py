"""Named parameter collection and its on-disk container.

A checkpoint is a directory holding ``manifest.json`` (name -> shape, dtype,
byte offset, plus format version and free-form metadata) and ``params.bin``,
a single little-endian blob with all arrays concatenated in manifest order.
The same container is reused for extracted feature matrices.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .autodiff import Tensor

FORMAT_VERSION = 1

_DTYPE_CODES = {"float32": "<f4", "float64": "<f8", "int32": "<i4", "int64": "<i8"}


class ParamStore:
    """Ordered map of parameter name -> Tensor, plus the optimizer step count."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.step_count = 0

    def add(self, name: str, data, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(data, requires_grad=requires_grad)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def subset(self, prefixes) -> list[str]:
        """Names matching any prefix (used to scope optimizers to heads)."""
        if isinstance(prefixes, str):
            prefixes = (prefixes,)
        return [n for n in self._params if any(n.startswith(p) for p in prefixes)]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def assert_finite(self) -> None:
        for name, t in self._params.items():
            if not np.isfinite(t.data).all():
                raise FloatingPointError(f"non-finite values in parameter {name}")

    def checksum(self, names=None) -> str:
        """Order-independent sha256 over names, dtypes, shapes and LE bytes.

        ``names`` restricts the digest to a parameter subset (freeze checks).
        """
        h = hashlib.sha256()
        for name in sorted(self._params if names is None else names):
            t = self._params[name]
            h.update(name.encode("utf-8"))
            h.update(str(t.data.dtype).encode())
            h.update(np.asarray(t.data.shape, dtype="<i8").tobytes())
            h.update(np.ascontiguousarray(t.data).astype(t.data.dtype.newbyteorder("<")).tobytes())
        return h.hexdigest()

    def clone(self) -> "ParamStore":
        other = ParamStore()
        for name, t in self._params.items():
            other.add(name, t.data.copy(), requires_grad=t.requires_grad)
        other.step_count = self.step_count
        return other


def save_arrays(arrays: dict[str, np.ndarray], out_dir: str, meta: dict | None = None,
                step_count: int = 0) -> str:
    """Write the manifest + blob container; returns the blob checksum."""
    os.makedirs(out_dir, exist_ok=True)
    entries = {}
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        dtype_name = str(arr.dtype)
        if dtype_name not in _DTYPE_CODES:
            raise ValueError(f"unsupported array dtype {dtype_name} for {name}")
        raw = np.ascontiguousarray(arr).astype(_DTYPE_CODES[dtype_name]).tobytes()
        entries[name] = {
            "shape": list(arr.shape),
            "dtype": dtype_name,
            "offset": offset,
            "nbytes": len(raw),
        }
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "step_count": step_count,
        "checksum": hashlib.sha256(blob).hexdigest(),
        "params": entries,
        "meta": meta or {},
    }
    with open(os.path.join(out_dir, "params.bin"), "wb") as f:
        f.write(blob)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest["checksum"]


def load_arrays(in_dir: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(os.path.join(in_dir, "manifest.json"), encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {manifest.get('format_version')}")
    with open(os.path.join(in_dir, "params.bin"), "rb") as f:
        blob = f.read()
    if hashlib.sha256(blob).hexdigest() != manifest["checksum"]:
        raise ValueError(f"checkpoint blob checksum mismatch in {in_dir}")
    arrays = {}
    for name, ent in manifest["params"].items():
        code = _DTYPE_CODES[ent["dtype"]]
        arr = np.frombuffer(blob, dtype=code, count=ent["nbytes"] // np.dtype(code).itemsize,
                            offset=ent["offset"])
        arrays[name] = arr.reshape(ent["shape"]).astype(ent["dtype"])
    return arrays, manifest


def save_checkpoint(store: ParamStore, out_dir: str, meta: dict | None = None,
                    check_finite: bool = True) -> str:
    """Persist a ParamStore; returns its parameter checksum (order-independent).

    ``check_finite=False`` is for diagnostic dumps of an aborted run.
    """
    if check_finite:
        store.assert_finite()
    save_arrays({n: t.data for n, t in store.items()}, out_dir, meta=meta,
                step_count=store.step_count)
    return store.checksum()


def load_checkpoint(in_dir: str, dtype=None) -> tuple[ParamStore, dict]:
    """Read a checkpoint; ``dtype`` casts parameters (e.g. float64 test mode)."""
    arrays, manifest = load_arrays(in_dir)
    store = ParamStore()
    for name, arr in arrays.items():
        if dtype is not None:
            arr = arr.astype(dtype)
        t = Tensor._wrap(arr)
        t.requires_grad = True
        store._params[name] = t
    store.step_count = manifest.get("step_count", 0)
    return store, manifest
