"""Versioned binary checkpoint container.

Layout: magic, version, length-prefixed JSON header (kind, encoder config,
metadata, tensor manifest), concatenated little-endian float32 tensor
payloads in manifest order, and a trailing SHA-256 over everything before
it. Round-trips are bit-exact.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import Tensor

from .encoder import CrossRanker, DualRetriever, EncoderConfig
from .errors import CheckpointError

MAGIC = b"DLCK"
VERSION = 1
_DIGEST_SIZE = 32


@dataclass
class Checkpoint:
    kind: str
    config: EncoderConfig
    state_dict: dict[str, Tensor]
    metadata: dict
    checksum: str


def save_checkpoint(
    path: str | Path,
    kind: str,
    config: EncoderConfig,
    state_dict: Mapping[str, Tensor],
    metadata: Mapping | None = None,
) -> str:
    """Write the container and return the hex checksum."""
    manifest = [{"name": name, "shape": list(t.shape)} for name, t in state_dict.items()]
    header = {
        "kind": kind,
        "config": dataclasses.asdict(config),
        "metadata": dict(metadata or {}),
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(header_bytes)), header_bytes]
    for tensor in state_dict.values():
        parts.append(tensor.detach().cpu().numpy().astype("<f4").tobytes())
    content = b"".join(parts)
    digest = hashlib.sha256(content).digest()
    Path(path).write_bytes(content + digest)
    return digest.hex()


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 6 + _DIGEST_SIZE:
        raise CheckpointError(f"{path}: truncated checkpoint")
    content, stored = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    digest = hashlib.sha256(content).digest()
    if digest != stored:
        raise CheckpointError(f"{path}: checksum mismatch")
    if content[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (version,) = struct.unpack_from("<H", content, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack_from("<I", content, 6)
    header_start = 10
    header = json.loads(content[header_start : header_start + header_len])
    offset = header_start + header_len
    state_dict: dict[str, Tensor] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(content):
            raise CheckpointError(f"{path}: payload shorter than the manifest")
        arr = np.frombuffer(content, dtype="<f4", count=count, offset=offset).copy()
        state_dict[entry["name"]] = torch.from_numpy(arr).reshape(shape)
        offset += nbytes
    if offset != len(content):
        raise CheckpointError(f"{path}: {len(content) - offset} unexpected trailing bytes")
    config = EncoderConfig(**header["config"])
    return Checkpoint(
        kind=header["kind"],
        config=config,
        state_dict=state_dict,
        metadata=header["metadata"],
        checksum=digest.hex(),
    )


def save_retriever(path: str | Path, retriever: DualRetriever, metadata: Mapping | None = None) -> str:
    return save_checkpoint(path, "retriever", retriever.config, retriever.state_dict(), metadata)


def save_ranker(path: str | Path, ranker: CrossRanker, metadata: Mapping | None = None) -> str:
    return save_checkpoint(path, "ranker", ranker.config, ranker.state_dict(), metadata)


def load_retriever(path: str | Path) -> tuple[DualRetriever, dict, str]:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "retriever":
        raise CheckpointError(f"{path}: expected a retriever checkpoint, found {ckpt.kind!r}")
    model = DualRetriever(ckpt.config)
    model.load_state_dict(ckpt.state_dict)
    model.eval()
    return model, ckpt.metadata, ckpt.checksum


def load_ranker(path: str | Path) -> tuple[CrossRanker, dict, str]:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "ranker":
        raise CheckpointError(f"{path}: expected a ranker checkpoint, found {ckpt.kind!r}")
    model = CrossRanker(ckpt.config)
    model.load_state_dict(ckpt.state_dict)
    model.eval()
    return model, ckpt.metadata, ckpt.checksum
