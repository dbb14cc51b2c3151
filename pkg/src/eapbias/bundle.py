"""Weight bundle files (``.eapw``).

Layout::

    b"EAPW" | version: u32 LE | header_len: u32 LE | header (UTF-8 JSON) | payload

The header maps each tensor name to ``{"dtype": "f64", "shape": [...],
"byte_offset": n}`` (offset relative to the payload start) and carries the
model config under ``"config"``. A word vocabulary may ride along under
``"vocabulary"``. Payloads are little-endian, row-major float64.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .config import ModelConfig
from .model import Weights, param_shapes

MAGIC = b"EAPW"
VERSION = 1
_RESERVED = ("config", "vocabulary")


class BundleFormatError(ValueError):
    pass


def save_weights(weights: Weights, path: str | os.PathLike, vocabulary: list[str] | None = None) -> None:
    header: dict = {"config": weights.config.to_dict()}
    if vocabulary is not None:
        header["vocabulary"] = list(vocabulary)
    offset = 0
    chunks = []
    for name in sorted(weights.params):
        arr = np.ascontiguousarray(weights.params[name], dtype="<f8")
        header[name] = {"dtype": "f64", "shape": list(arr.shape), "byte_offset": offset}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)


def load_bundle(path: str | os.PathLike) -> tuple[Weights, list[str] | None]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise BundleFormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 12:
        raise BundleFormatError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise BundleFormatError(f"{path}: unsupported bundle version {version}")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleFormatError(f"{path}: unreadable header ({exc})") from exc
    if "config" not in header:
        raise BundleFormatError(f"{path}: header has no config")
    config = ModelConfig.from_dict(header["config"])
    payload = memoryview(data)[12 + hlen:]
    expected = param_shapes(config)
    names = {k for k in header if k not in _RESERVED}
    if names != set(expected):
        raise BundleFormatError(
            f"{path}: tensors {sorted(names ^ set(expected))} missing or unexpected for this config"
        )
    params = {}
    for name, shape in expected.items():
        meta = header[name]
        if meta.get("dtype") != "f64":
            raise BundleFormatError(f"{path}: {name} has dtype {meta.get('dtype')!r}, expected f64")
        if tuple(meta["shape"]) != shape:
            raise BundleFormatError(f"{path}: {name} has shape {meta['shape']}, config needs {list(shape)}")
        start = meta["byte_offset"]
        nbytes = 8 * int(np.prod(shape))
        if start < 0 or start + nbytes > len(payload):
            raise BundleFormatError(f"{path}: {name} runs past the end of the payload")
        params[name] = np.frombuffer(payload[start:start + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
    return Weights(config, params), header.get("vocabulary")


def load_weights(path: str | os.PathLike) -> Weights:
    return load_bundle(path)[0]
