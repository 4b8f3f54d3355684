"""Binary tensor snapshots.

Layout (all integers little-endian u32):
magic "MSUN", version, scale count, the scale table, tensor count, then per
tensor {name length, UTF-8 name, rank, dims, raw little-endian f32 payload}.

A model checkpoint is self-describing: alongside the parameter and batch-norm
buffer tensors it stores small ``meta.*`` tensors holding the architecture
numbers, so a model can be rebuilt from the file alone.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .model import BackboneSpec, MsunModel, ScaleSet
from .rng import Rng

MAGIC = b"MSUN"
VERSION = 1

_KINDS = ("plain", "residual")


class SnapshotError(ValueError):
    """Malformed snapshot file."""


def save_snapshot(path: str, tensors: "OrderedDict[str, np.ndarray]",
                  scales: Sequence[int]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(scales)))
        for s in scales:
            fh.write(struct.pack("<I", int(s)))
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            arr = np.asarray(arr, dtype=np.float32)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype("<f4").tobytes())


def load_snapshot(path: str) -> Tuple["OrderedDict[str, np.ndarray]", List[int]]:
    with open(path, "rb") as fh:
        buf = fh.read()

    def take(n: int, offset: int) -> Tuple[bytes, int]:
        if offset + n > len(buf):
            raise SnapshotError(f"{path}: truncated at byte {offset}")
        return buf[offset:offset + n], offset + n

    chunk, off = take(4, 0)
    if chunk != MAGIC:
        raise SnapshotError(f"{path}: bad magic {chunk!r}")
    chunk, off = take(4, off)
    version = struct.unpack("<I", chunk)[0]
    if version != VERSION:
        raise SnapshotError(f"{path}: unsupported version {version}")
    chunk, off = take(4, off)
    n_scales = struct.unpack("<I", chunk)[0]
    scales = []
    for _ in range(n_scales):
        chunk, off = take(4, off)
        scales.append(struct.unpack("<I", chunk)[0])
    chunk, off = take(4, off)
    n_tensors = struct.unpack("<I", chunk)[0]
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(n_tensors):
        chunk, off = take(4, off)
        name_len = struct.unpack("<I", chunk)[0]
        chunk, off = take(name_len, off)
        name = chunk.decode("utf-8")
        chunk, off = take(4, off)
        rank = struct.unpack("<I", chunk)[0]
        dims = []
        for _ in range(rank):
            chunk, off = take(4, off)
            dims.append(struct.unpack("<I", chunk)[0])
        count = int(np.prod(dims)) if dims else 1
        chunk, off = take(4 * count, off)
        tensors[name] = np.frombuffer(chunk, dtype="<f4").reshape(dims).copy()
    if off != len(buf):
        raise SnapshotError(f"{path}: {len(buf) - off} trailing bytes")
    return tensors, scales


def model_state(model: MsunModel) -> "OrderedDict[str, np.ndarray]":
    state: "OrderedDict[str, np.ndarray]" = OrderedDict()
    spec = model.spec
    state["meta.stage_widths"] = np.asarray(spec.stage_widths, dtype=np.float32)
    state["meta.stage_blocks"] = np.asarray(spec.stage_blocks, dtype=np.float32)
    state["meta.block_kind"] = np.asarray([_KINDS.index(spec.block_kind)], dtype=np.float32)
    state["meta.num_classes"] = np.asarray([spec.num_classes], dtype=np.float32)
    state["meta.canonical_size"] = np.asarray([spec.canonical_size], dtype=np.float32)
    state["meta.subnet_blocks"] = np.asarray([model.subnet_blocks], dtype=np.float32)
    for name, p in model.named_params():
        state[name] = p.data
    for name, b in model.named_buffers():
        state[name] = b
    return state


def save_model(path: str, model: MsunModel) -> None:
    save_snapshot(path, model_state(model), list(model.scales))


def load_model(path: str) -> MsunModel:
    tensors, scales = load_snapshot(path)
    try:
        spec = BackboneSpec(
            stage_widths=tuple(int(v) for v in tensors.pop("meta.stage_widths")),
            stage_blocks=tuple(int(v) for v in tensors.pop("meta.stage_blocks")),
            block_kind=_KINDS[int(tensors.pop("meta.block_kind")[0])],
            num_classes=int(tensors.pop("meta.num_classes")[0]),
            canonical_size=int(tensors.pop("meta.canonical_size")[0]),
        )
        subnet_blocks = int(tensors.pop("meta.subnet_blocks")[0])
    except KeyError as exc:
        raise SnapshotError(f"{path}: missing architecture tensor {exc}") from exc
    model = MsunModel(spec, ScaleSet(scales), subnet_blocks, Rng(0))

    expected = dict(model.named_params())
    buffers = dict(model.named_buffers())
    names = set(expected) | set(buffers)
    if names != set(tensors):
        missing = sorted(names - set(tensors))
        extra = sorted(set(tensors) - names)
        raise SnapshotError(f"{path}: tensor names do not match the architecture "
                            f"(missing {missing}, unexpected {extra})")
    for name, arr in tensors.items():
        if name in expected:
            if expected[name].data.shape != arr.shape:
                raise SnapshotError(f"{path}: {name} has shape {arr.shape}, "
                                    f"expected {expected[name].data.shape}")
            expected[name].data[...] = arr
        else:
            buffers[name][...] = arr
    return model.eval()
