"""Binary checkpoint format.

Layout, all little-endian:

    magic b"RTRX" | u32 version | u32 length + UTF-8 metadata text |
    repeated tensor records: u16 name length + name bytes,
                             rank byte, u64 extents, payload

The metadata text is JSON carrying the resolved flat config, epoch
counter, identity count and the training RNG state.  Payload element
width follows the config's precision (32-bit floats by default).
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .config import TrainConfig, config_from_text, config_to_text
from .errors import DataError
from .tensor import DTYPES, tensor_from_bytes, tensor_to_bytes

MAGIC = b"RTRX"
VERSION = 1


def save_checkpoint(path, cfg: TrainConfig, num_ids: int, epoch: int,
                    rng_state, tensors: dict):
    """tensors maps name -> numpy array; saved in sorted name order."""
    meta = json.dumps({
        "config": config_to_text(cfg),
        "num_ids": num_ids,
        "epoch": epoch,
        "rng_state": rng_state,
    }).encode("utf-8")
    dtype = DTYPES[cfg.precision]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        for name in sorted(tensors):
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(tensor_to_bytes(tensors[name], dtype=dtype))


def load_checkpoint(path):
    """Returns (cfg, num_ids, epoch, rng_state, {name: array})."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if buf[:4] != MAGIC:
        raise DataError(f"{path}: bad checkpoint magic {buf[:4]!r}")
    version, = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    mlen, = struct.unpack_from("<I", buf, 8)
    meta = json.loads(buf[12:12 + mlen].decode("utf-8"))
    cfg = config_from_text(meta["config"])
    dtype = DTYPES[cfg.precision]
    tensors = {}
    pos = 12 + mlen
    while pos < len(buf):
        nlen, = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        arr, pos = tensor_from_bytes(buf, pos, dtype=dtype)
        tensors[name] = arr
    return cfg, meta["num_ids"], meta["epoch"], meta["rng_state"], tensors


def model_tensors(model, momentum: dict | None = None) -> dict:
    """Collect parameter, BN-state and optimizer tensors for saving."""
    out = {name: t.data for name, t in model.params.items()}
    for k, st in model.bn_state.items():
        out[f"state.head{k}.bn.mean"] = st["mean"]
        out[f"state.head{k}.bn.var"] = st["var"]
    if momentum:
        for name, v in momentum.items():
            out[f"opt.{name}"] = v
    return out


def restore_model(model, tensors: dict, strict_inference: bool = True):
    """Load stored tensors into a freshly built model.

    Missing rotated-branch or extra-head tensors are tolerated (they do
    not participate in inference); a missing inference-path tensor is an
    error when strict_inference is set.
    """
    def optional(name):
        return name.startswith(("rot", "opt.")) or (
            name.startswith(("head", "state.head"))
            and not name.startswith(("head0.", "state.head0.")))

    for name, t in model.params.items():
        if name in tensors:
            if tensors[name].shape != t.data.shape:
                raise DataError(
                    f"checkpoint tensor {name} has shape "
                    f"{tensors[name].shape}, model expects {t.data.shape}")
            t.data = tensors[name].astype(model.dtype)
        elif strict_inference and not optional(name):
            raise DataError(f"checkpoint is missing tensor {name}")
    for k, st in model.bn_state.items():
        for stat in ("mean", "var"):
            name = f"state.head{k}.bn.{stat}"
            if name in tensors:
                st[stat] = tensors[name].astype(model.dtype)
            elif strict_inference and not optional(name):
                raise DataError(f"checkpoint is missing tensor {name}")


def load_model(path):
    """Rebuild a model (inference-ready) from a checkpoint file."""
    from .model import RotReidModel

    cfg, num_ids, epoch, rng_state, tensors = load_checkpoint(path)
    model = RotReidModel(cfg, num_ids, np.random.default_rng(0))
    restore_model(model, tensors)
    return model, epoch, rng_state
