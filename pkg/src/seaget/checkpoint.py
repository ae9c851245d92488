"""Checkpoint container.

Layout::

    b"SEAGETCK"                  8-byte magic
    uint64 little-endian         length H of the header
    H bytes                      UTF-8 JSON header
    payload                      row-major little-endian float64 arrays

The header holds ``config``, ``meta`` (free-form run metadata such as alpha
and beta), ``rng`` states and ``tensors``: a list of ``{name, shape, dtype,
offset, nbytes}`` records whose offsets are relative to the payload start.
Graph inputs are stored as tensors named ``graph.features`` and
``graph.edges`` (E x 3 rows of src, dst, weight); the Laplacian is rebuilt
from the edges on load.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .flowgraph import normalized_laplacian
from .model import ModelConfig, Seaget

MAGIC = b"SEAGETCK"
FORMAT_VERSION = 1


def write_container(path, tensors: dict[str, np.ndarray], header: dict) -> None:
    records = []
    offset = 0
    arrays = []
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        records.append({"name": name, "shape": list(arr.shape), "dtype": "<f8",
                        "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
        arrays.append(arr)
    header = dict(header, version=FORMAT_VERSION, tensors=records)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<Q", len(blob)) + blob)
        for arr in arrays:
            fh.write(arr.tobytes())
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        (size,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(size).decode("utf-8"))
        payload = fh.read()
    tensors = {}
    for rec in header["tensors"]:
        chunk = payload[rec["offset"]:rec["offset"] + rec["nbytes"]]
        tensors[rec["name"]] = np.frombuffer(chunk, dtype=rec["dtype"]).reshape(rec["shape"]).copy()
    return header, tensors


def save_model(path, model: Seaget, edges: np.ndarray, meta: dict | None = None,
               rng_state: dict | None = None) -> None:
    tensors = {"graph.features": model.features, "graph.edges": np.asarray(edges, dtype=np.float64).reshape(-1, 3)}
    tensors.update({name: p.data for name, p in model.named_parameters().items()})
    header = {"config": model.config_dict(), "meta": dict(model.meta, **(meta or {})), "rng": rng_state or {}}
    write_container(path, tensors, header)


def laplacian_from_edges(edges: np.ndarray, n: int) -> np.ndarray:
    a = np.zeros((n, n))
    for src, dst, w in np.asarray(edges).reshape(-1, 3):
        a[int(src), int(dst)] = w
    return normalized_laplacian(a)


def load_model(path) -> tuple[Seaget, np.ndarray, dict]:
    header, tensors = read_container(path)
    config = ModelConfig(**header["config"])
    edges = tensors.pop("graph.edges")
    features = tensors.pop("graph.features")
    model = Seaget.init(config, features, laplacian_from_edges(edges, config.num_pois), seed=0)
    params = model.named_parameters()
    missing = set(params) - set(tensors)
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {sorted(missing)}")
    for name, p in params.items():
        if tensors[name].shape != p.data.shape:
            raise ValueError(f"shape mismatch for {name}: {tensors[name].shape} vs {p.data.shape}")
        p.data[...] = tensors[name]
    model.meta = header.get("meta", {})
    return model, edges, header


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def parameter_digest(model: Seaget) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters().items()):
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()
