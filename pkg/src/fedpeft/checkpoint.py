"""Versioned, byte-deterministic checkpoint files.

Layout::

    FEDPEFT-CKPT 1\\n
    <header length in bytes>\\n
    <JSON header: model structure, PEFT metadata, tensor table>
    <tensor payload: little-endian float64 / uint8, row-major, concatenated>
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import DenseLayer, ModelParams
from .peft import AdapterBlock, LoRABlock, SparseMask

MAGIC = b"FEDPEFT-CKPT 1\n"


@dataclass
class Checkpoint:
    model: ModelParams
    lora: dict[int, LoRABlock] = field(default_factory=dict)
    adapters: dict[int, AdapterBlock] = field(default_factory=dict)
    mask: SparseMask | None = None


def _tensors(ck: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = list(ck.model.tensors().items())
    for i, b in sorted(ck.lora.items()):
        out += [(f"lora.{i}.A", b.A), (f"lora.{i}.B", b.B)]
    for i, a in sorted(ck.adapters.items()):
        out += [(f"adapter.{i}.{n}", getattr(a, n)) for n in ("down", "down_bias", "up", "up_bias")]
    if ck.mask is not None:
        out += [(f"mask.{k}", m) for k, m in ck.mask.masks.items()]
    return out


def dumps(ck: Checkpoint) -> bytes:
    table, chunks, offset = [], [], 0
    for name, arr in _tensors(ck):
        if arr.dtype == bool:
            raw = np.ascontiguousarray(arr, dtype=np.uint8).tobytes()
            dtype = "u1"
        else:
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            dtype = "<f8"
        table.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "input_dim": ck.model.input_dim,
        "num_classes": ck.model.num_classes,
        "layers": [{"role": l.role, "activation": l.activation} for l in ck.model.layers],
        "lora": {str(i): {"r": b.r, "beta": b.beta} for i, b in sorted(ck.lora.items())},
        "adapters": {str(i): {"placement": a.placement} for i, a in sorted(ck.adapters.items())},
        "mask": None if ck.mask is None else {"density": ck.mask.density, "seed": ck.mask.seed},
        "tensors": table,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    return MAGIC + str(len(hb)).encode() + b"\n" + hb + b"".join(chunks)


def loads(blob: bytes) -> Checkpoint:
    if not blob.startswith(MAGIC):
        raise ConfigError("not a fedpeft checkpoint (bad magic or version)")
    rest = blob[len(MAGIC) :]
    nl = rest.index(b"\n")
    hlen = int(rest[:nl])
    header = json.loads(rest[nl + 1 : nl + 1 + hlen])
    payload = rest[nl + 1 + hlen :]
    arrays = {}
    for t in header["tensors"]:
        raw = payload[t["offset"] : t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype=t["dtype"]).reshape(t["shape"])
        arrays[t["name"]] = arr.astype(bool) if t["dtype"] == "u1" else arr.astype(np.float64)
    layers = tuple(
        DenseLayer(arrays[f"layers.{i}.weight"], arrays[f"layers.{i}.bias"], spec["role"], spec["activation"])
        for i, spec in enumerate(header["layers"])
    )
    model = ModelParams(layers, header["input_dim"], header["num_classes"])
    lora = {
        int(i): LoRABlock(arrays[f"lora.{i}.A"], arrays[f"lora.{i}.B"], m["r"], m["beta"], int(i))
        for i, m in header["lora"].items()
    }
    adapters = {
        int(i): AdapterBlock(
            **{n: arrays[f"adapter.{i}.{n}"] for n in ("down", "down_bias", "up", "up_bias")},
            placement=m["placement"],
            site=int(i),
        )
        for i, m in header["adapters"].items()
    }
    mask = None
    if header["mask"] is not None:
        masks = {k[len("mask.") :]: v for k, v in arrays.items() if k.startswith("mask.")}
        mask = SparseMask(masks, header["mask"]["density"], header["mask"]["seed"])
    return Checkpoint(model, lora, adapters, mask)


def save(path: str | Path, ck: Checkpoint) -> None:
    Path(path).write_bytes(dumps(ck))


def load(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_bytes())
