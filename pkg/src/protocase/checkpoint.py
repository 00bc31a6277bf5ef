"""Binary checkpoint format.

Layout (little-endian)::

    b"IABL"  u32 version  u32 n_records
    n_records x { u32 name_len, name utf-8, u32 ndim, ndim x u64 dims, f64 data }   # "opt:*" = optimizer state
    u32 json_len, json utf-8       # scalars: configs, prototype metadata, schedule position, rng, history

Identical bytes imply an identical model; JSON is written with sorted keys.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .network import ModelConfig, ModelState

MAGIC = b"IABL"
VERSION = 1
OPT_PREFIX = "opt:"


@dataclass
class Checkpoint:
    state: ModelState
    progress: dict = field(default_factory=dict)
    rng_state: dict | None = None
    history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    opt_state: dict = field(default_factory=dict)    # optimizer moments, stored as "opt:" records


def to_bytes(ckpt: Checkpoint) -> bytes:
    state = ckpt.state
    records = dict(state.params)
    records.update({OPT_PREFIX + k: v for k, v in ckpt.opt_state.items()})
    out = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name in sorted(records):
        arr = np.ascontiguousarray(records[name], dtype="<f8")
        raw = name.encode()
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    meta = {
        "model_config": state.config.to_dict(),
        "proto_types": [int(t) for t in state.proto_types],
        "proto_active": [bool(a) for a in state.proto_active],
        "proto_sources": [list(s) if s is not None else None for s in state.proto_sources],
        "stage_b_done": state.stage_b_done,
        "progress": ckpt.progress,
        "rng_state": ckpt.rng_state,
        "history": ckpt.history,
        "extra": ckpt.extra,
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    out.append(struct.pack("<I", len(blob)) + blob)
    return b"".join(out)


def from_bytes(buf: bytes, origin: str = "<bytes>") -> Checkpoint:
    try:
        if buf[:4] != MAGIC:
            raise CheckpointError(f"{origin}: not a checkpoint (bad magic bytes)")
        version, n = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"{origin}: unsupported checkpoint version {version}")
        pos = 12
        params = {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + ln].decode()
            pos += ln
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            count = int(np.prod(shape)) if ndim else 1
            if pos + 8 * count > len(buf):
                raise CheckpointError(f"{origin}: truncated tensor record {name!r}")
            params[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
        (jl,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + jl != len(buf):
            raise CheckpointError(f"{origin}: trailing or missing bytes after manifest")
        meta = json.loads(buf[pos:pos + jl].decode())
        opt = {k[len(OPT_PREFIX):]: params.pop(k) for k in [k for k in params if k.startswith(OPT_PREFIX)]}
        state = ModelState(
            config=ModelConfig.from_dict(meta["model_config"]),
            params=params,
            proto_types=np.array(meta["proto_types"], dtype=np.int64),
            proto_active=np.array(meta["proto_active"], dtype=bool),
            proto_sources=[tuple(s) if s is not None else None for s in meta["proto_sources"]],
            stage_b_done=meta["stage_b_done"],
        )
    except CheckpointError:
        raise
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"{origin}: malformed checkpoint ({exc})") from exc
    return Checkpoint(state, meta["progress"], meta["rng_state"], meta["history"], meta.get("extra", {}), opt)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes(), str(path))
