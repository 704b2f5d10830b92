"""Checkpoint format: length-prefixed JSON header + raw float32 tensors.

Header fields: format version, model config, vocabulary hash, run config
echo, and a named tensor manifest with shapes. Tensor bytes follow in
manifest order, little-endian float321.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelState

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class VocabMismatchError(CheckpointError):
    pass


def save_checkpoint(path: str | Path, state: ModelState, vocab_sha: str, run_config: dict | None = None) -> None:
    manifest = [[name, list(arr.shape)] for name, arr in state.params.items()]
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": state.cfg.to_dict(),
        "vocab_sha256": vocab_sha,
        "tensors": manifest,
        "run_config": run_config or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as f:
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, arr in state.params.items():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_header(path: str | Path) -> dict:
    with Path(path).open("rb") as f:
        raw = f.read(4)
        if len(raw) != 4:
            raise CheckpointError(f"{path}: truncated header length")
        (hlen,) = struct.unpack("<I", raw)
        blob = f.read(hlen)
    if len(blob) != hlen:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(blob.decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    return header


def load_checkpoint(path: str | Path, expect_vocab_sha: str | None = None) -> tuple[ModelState, dict]:
    header = read_header(path)
    if expect_vocab_sha is not None and header["vocab_sha256"] != expect_vocab_sha:
        raise VocabMismatchError(
            f"{path}: checkpoint was trained with a different vocabulary "
            f"({header['vocab_sha256'][:12]}... vs {expect_vocab_sha[:12]}...)"
        )
    cfg = ModelConfig.from_dict(header["model_config"])
    params: dict[str, np.ndarray] = {}
    offset = 4 + len(json.dumps(header, sort_keys=True).encode("utf-8"))
    with Path(path).open("rb") as f:
        f.seek(offset)
        for name, shape in header["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            params[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return ModelState(cfg, params), header
