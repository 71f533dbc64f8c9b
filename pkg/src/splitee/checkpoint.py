"""The SPLITEE1 container: a self-describing binary file of named arrays.

Layout: 8-byte magic ``SPLITEE1``, little-endian uint32 header length, a
UTF-8 JSON header (metadata plus an entry table of path/shape/dtype), then
the raw little-endian array payloads in entry order.  Used for model
checkpoints and for exporting synthetic datasets.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .data import Dataset
from .errors import FormatError
from .model import BaseNetworkSpec
from .optim import ParameterSet
from .tensor import Tensor

MAGIC = b"SPLITEE1"
_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


def save_container(path: str, arrays: list[tuple[str, np.ndarray, bool]], meta: dict) -> None:
    entries = []
    for name, arr, trainable in arrays:
        dt = "<i8" if np.issubdtype(arr.dtype, np.integer) else "<f8"
        entries.append(
            {"path": name, "shape": list(arr.shape), "dtype": dt, "trainable": trainable}
        )
    header = json.dumps({"version": 1, "meta": meta, "entries": entries}).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for (_, arr, _), entry in zip(arrays, entries):
            f.write(np.ascontiguousarray(arr, dtype=_DTYPES[entry["dtype"]]).tobytes())


def load_container(path: str) -> tuple[dict[str, tuple[np.ndarray, bool]], dict]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}, expected {MAGIC!r}")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12 : 12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from exc
    if header.get("version") != 1:
        raise FormatError(f"{path}: unsupported container version {header.get('version')}")
    offset = 12 + hlen
    arrays: dict[str, tuple[np.ndarray, bool]] = {}
    for entry in header["entries"]:
        dt = _DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * dt.itemsize
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: payload truncated at entry {entry['path']!r}")
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(entry["shape"])
        arrays[entry["path"]] = (arr.copy(), bool(entry["trainable"]))
        offset += nbytes
    return arrays, header["meta"]


def save_model(path: str, params: ParameterSet, spec: BaseNetworkSpec, seed: int,
               meta: dict | None = None) -> None:
    m = {"kind": "model", "spec": spec.to_dict(), "seed": seed}
    m.update(meta or {})
    save_container(path, [(p, t.values, t.requires_grad) for p, t in params.items()], m)


def load_model(path: str) -> tuple[ParameterSet, BaseNetworkSpec, dict]:
    arrays, meta = load_container(path)
    if meta.get("kind") != "model":
        raise FormatError(f"{path}: container holds {meta.get('kind')!r}, not a model")
    ps = ParameterSet()
    for name, (arr, trainable) in arrays.items():
        ps[name] = Tensor(arr, requires_grad=trainable)
    return ps, BaseNetworkSpec.from_dict(meta["spec"]), meta


def save_dataset(path: str, ds: Dataset) -> None:
    meta = {"kind": "dataset", "name": ds.name, "num_classes": ds.num_classes}
    save_container(
        path,
        [
            ("images", ds.images, False),
            ("labels", ds.labels, False),
            ("mean", ds.mean, False),
            ("std", ds.std, False),
        ],
        meta,
    )


def load_dataset(path: str) -> Dataset:
    arrays, meta = load_container(path)
    if meta.get("kind") != "dataset":
        raise FormatError(f"{path}: container holds {meta.get('kind')!r}, not a dataset")
    return Dataset(
        name=meta["name"],
        images=arrays["images"][0],
        labels=arrays["labels"][0],
        num_classes=int(meta["num_classes"]),
        mean=arrays["mean"][0],
        std=arrays["std"][0],
    )
