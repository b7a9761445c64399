"""Versioned binary checkpoints of named float64 tensors.

Byte layout (all integers little-endian):

    offset 0   magic       4 bytes  b"TFCK"
    offset 4   version     u32      currently 1
    offset 8   header_len  u32      byte length of the JSON header
    offset 12  header      UTF-8 JSON (see below)
    ...        n_records   u32
    ...        records     repeated:
                   name_len  u16
                   name      UTF-8 bytes
                   ndim      u8
                   dims      ndim x u32
                   data      prod(dims) x f8, C order, little-endian

The JSON header carries {"format_version", "d", "L", "h", "V", "p", "C",
"height", "width", "special_token_ids", "meta"}. Model parameters are stored
under their canonical names; optimizer first and second moments, when
present, are stored as "optim.m.<name>" / "optim.v.<name>" records and the
step counter rides in meta["optim_step"]. Any independent reader needs only
this comment and the struct module.
"""

import json
import os
import struct
from typing import Optional

import numpy as np

from triflow.errors import CheckpointError
from triflow.model import ModelConfig, MTXpertStack, parameter_shapes
from triflow.tensor import Tensor
from triflow.vocab import Vocabulary

MAGIC = b"TFCK"
FORMAT_VERSION = 1


def _header_from(config: ModelConfig, meta: dict) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "d": config.d_model, "L": config.n_layers, "h": config.n_heads,
        "V": config.vocab_size, "p": config.patch, "C": config.channels,
        "height": config.height, "width": config.width,
        "special_token_ids": Vocabulary.default().special_ids,
        "meta": meta,
    }


def _config_from(header: dict) -> ModelConfig:
    return ModelConfig(d_model=header["d"], n_layers=header["L"],
                       n_heads=header["h"], vocab_size=header["V"],
                       patch=header["p"], channels=header["C"],
                       height=header["height"], width=header["width"])


def _write_record(fh, name: str, array: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", array.ndim))
    for dim in array.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def save_checkpoint(path, stack: MTXpertStack, opt_state: Optional[dict] = None,
                    meta: Optional[dict] = None) -> None:
    """Write stack weights (and optimizer moments) atomically to path."""
    meta = dict(meta or {})
    records = [(name, stack.params[name].data)
               for name in parameter_shapes(stack.config)]
    if opt_state is not None:
        meta["optim_step"] = int(opt_state["step"])
        for name in parameter_shapes(stack.config):
            records.append((f"optim.m.{name}", opt_state["m"][name]))
            records.append((f"optim.v.{name}", opt_state["v"][name]))
    header = json.dumps(_header_from(stack.config, meta),
                        sort_keys=True).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(records)))
        for name, array in records:
            _write_record(fh, name, array)
    os.replace(tmp, path)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def _scan(path, with_data: bool):
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        version, = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        header_len, = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        header = json.loads(_read_exact(fh, header_len, "header"))
        n_records, = struct.unpack("<I", _read_exact(fh, 4, "record count"))
        records = []
        for _ in range(n_records):
            name_len, = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "record name").decode("utf-8")
            ndim, = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4, "dim"))[0]
                          for _ in range(ndim))
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            if with_data:
                raw = _read_exact(fh, count * 8, f"data of {name}")
                array = np.frombuffer(raw, dtype="<f8").astype(np.float64)
                records.append((name, array.reshape(shape)))
            else:
                fh.seek(count * 8, os.SEEK_CUR)
                records.append((name, shape))
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last record")
    return header, records


def load_checkpoint(path):
    """Read a checkpoint: returns (stack, opt_state or None, meta dict)."""
    header, records = _scan(path, with_data=True)
    config = _config_from(header)
    arrays = dict(records)
    if len(arrays) != len(records):
        raise CheckpointError(f"{path}: duplicate record names")
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if arrays[name].shape != shape:
            raise CheckpointError(
                f"{path}: {name} has shape {arrays[name].shape}, expected {shape}")
        params[name] = Tensor(arrays[name], requires_grad=True, name=name)
    stack = MTXpertStack(config, params)
    meta = dict(header.get("meta", {}))
    opt_state = None
    if "optim_step" in meta:
        opt_state = {"step": int(meta["optim_step"]),
                     "m": {n: arrays[f"optim.m.{n}"] for n in params},
                     "v": {n: arrays[f"optim.v.{n}"] for n in params}}
    return stack, opt_state, meta


def inspect_checkpoint(path) -> dict:
    """Header plus (name, shape, bytes) for every record; data not loaded."""
    header, records = _scan(path, with_data=False)
    return {
        "header": header,
        "records": [{"name": name, "shape": list(shape),
                     "bytes": int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8}
                    for name, shape in records],
        "total_parameters": int(sum(np.prod(s, dtype=np.int64)
                                    for n, s in records
                                    if not n.startswith("optim."))),
    }
