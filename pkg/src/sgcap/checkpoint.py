"""Binary checkpoint files.

Layout (little-endian):
  magic "TFSG", u32 format version, u32 blob length, UTF-8 JSON blob
  (model/config snapshot, vocabularies, epoch counter, optimizer step,
  RNG state), then repeated array records: u32 name length, name bytes,
  u32 rank, u32 dims, raw float32 data.  Optimizer moments are stored as
  records under the "opt.m/" and "opt.v/" prefixes.

Reloading restores parameter values bit for bit, so forward passes
reproduce exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TFSG"
VERSION = 1

_OPT_M = "opt.m/"
_OPT_V = "opt.v/"


class CheckpointError(ValueError):
    pass


def rng_state_to_json(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": str(state["state"]["state"]),
        "inc": str(state["state"]["inc"]),
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }


def rng_from_json(blob: dict) -> np.random.Generator:
    if blob["bit_generator"] != "PCG64":
        raise CheckpointError(f"unsupported bit generator {blob['bit_generator']!r}")
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(blob["state"]), "inc": int(blob["inc"])},
        "has_uint32": blob["has_uint32"],
        "uinteger": blob["uinteger"],
    }
    return rng


def save_checkpoint(
    path: str | Path,
    config: dict,
    arrays: dict[str, np.ndarray],
    epoch: int,
    node_tokens: list[str],
    caption_tokens: list[str],
    optimizer_moments: tuple[dict, dict] | None = None,
    optimizer_step: int = 0,
    rng: np.random.Generator | None = None,
):
    blob = {
        "config": config,
        "epoch": epoch,
        "node_tokens": node_tokens,
        "caption_tokens": caption_tokens,
        "optimizer_step": optimizer_step,
        "rng": rng_state_to_json(rng) if rng is not None else None,
    }
    blob_bytes = json.dumps(blob, sort_keys=True).encode("utf-8")
    records = dict(arrays)
    if optimizer_moments is not None:
        m, v = optimizer_moments
        records.update({_OPT_M + k: arr for k, arr in m.items()})
        records.update({_OPT_V + k: arr for k, arr in v.items()})
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob_bytes)))
        fh.write(blob_bytes)
        for name, arr in records.items():
            name_bytes = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


class Checkpoint:
    """Loaded checkpoint contents."""

    def __init__(self, config, epoch, node_tokens, caption_tokens, arrays,
                 optimizer_moments, optimizer_step, rng):
        self.config = config
        self.epoch = epoch
        self.node_tokens = node_tokens
        self.caption_tokens = caption_tokens
        self.arrays = arrays
        self.optimizer_moments = optimizer_moments
        self.optimizer_step = optimizer_step
        self.rng = rng


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    blob_len = struct.unpack_from("<I", raw, 8)[0]
    offset = 12
    blob = json.loads(raw[offset:offset + blob_len].decode("utf-8"))
    offset += blob_len

    arrays: dict[str, np.ndarray] = {}
    moments_m: dict[str, np.ndarray] = {}
    moments_v: dict[str, np.ndarray] = {}
    while offset < len(raw):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", raw, offset)
        offset += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(dims).copy()
        offset += 4 * count
        if name.startswith(_OPT_M):
            moments_m[name[len(_OPT_M):]] = arr
        elif name.startswith(_OPT_V):
            moments_v[name[len(_OPT_V):]] = arr
        else:
            arrays[name] = arr

    moments = (moments_m, moments_v) if moments_m or moments_v else None
    rng = rng_from_json(blob["rng"]) if blob.get("rng") else None
    return Checkpoint(
        config=blob["config"],
        epoch=blob["epoch"],
        node_tokens=blob["node_tokens"],
        caption_tokens=blob["caption_tokens"],
        arrays=arrays,
        optimizer_moments=moments,
        optimizer_step=blob.get("optimizer_step", 0),
        rng=rng,
    )
