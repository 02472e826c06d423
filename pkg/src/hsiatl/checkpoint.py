"""Binary model checkpoints.

Byte layout, little-endian throughout:

- 4 bytes magic ``SSTC``
- uint32 header length in bytes
- UTF-8 JSON header: ``{"version": 1, "config": {...}, "freeze": {...},
  "dtype": "<f8", "params": [{"name": ..., "shape": [...]}, ...]}``
- raw parameter payload: each tensor as little-endian float64 in C order,
  concatenated in header order.

Save then load then save reproduces the file byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from hsiatl.autodiff import Tensor
from hsiatl.data import BadMagicError, FormatError, TruncatedPayloadError
from hsiatl.model import EncoderLayerParams, SstConfig, SstModel, positional_encoding

CHECKPOINT_MAGIC = b"SSTC"
VERSION = 1


def save_model(model: SstModel, path: str | Path) -> None:
    params = model.parameters()
    header = {
        "version": VERSION,
        "config": dataclasses.asdict(model.config),
        "freeze": model.freeze,
        "dtype": "<f8",
        "params": [
            {"name": name, "shape": list(t.data.shape)} for name, t in params.items()
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in params.values()
    )
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_model(path: str | Path) -> SstModel:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedPayloadError(f"{path}: file shorter than magic")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise TruncatedPayloadError(f"{path}: header length missing")
    header_len = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    if len(raw) < 8 + header_len:
        raise TruncatedPayloadError(f"{path}: header incomplete")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from exc
    if header.get("version") != VERSION or header.get("dtype") != "<f8":
        raise FormatError(f"{path}: unsupported checkpoint version/dtype")
    config = SstConfig(**header["config"])
    offset = 8 + header_len
    values: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 8 if shape else 8
        if offset + nbytes > len(raw):
            raise TruncatedPayloadError(f"{path}: payload ends inside {entry['name']}")
        arr = np.frombuffer(raw[offset : offset + nbytes], dtype="<f8").reshape(shape)
        values[entry["name"]] = arr.astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")

    def take(name: str) -> Tensor:
        try:
            return Tensor(values[name], requires_grad=True)
        except KeyError as exc:
            raise FormatError(f"{path}: checkpoint missing parameter {name}") from exc

    layers = []
    for i in range(config.n_layers):
        kwargs = {
            fld.name: take(f"enc{i}.{fld.name}")
            for fld in dataclasses.fields(EncoderLayerParams)
        }
        layers.append(EncoderLayerParams(**kwargs))
    model = SstModel(
        config=config,
        embed_weight=take("embed.weight"),
        positional=positional_encoding(config.n_tokens, config.d_model),
        layers=layers,
        class_query=take("pool.class_query"),
        pool_k=take("pool.k"),
        pool_v=take("pool.v"),
        head_w1=take("head.w1"),
        head_b1=take("head.b1"),
        head_w2=take("head.w2"),
        head_b2=take("head.b2"),
        freeze={k: bool(v) for k, v in header["freeze"].items()},
    )
    model.apply_freeze()
    return model
