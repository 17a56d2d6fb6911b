"""Checkpoints, PPM images, and metrics logs.

Checkpoint file layout (all integers little-endian):

    bytes 0-3   magic b"PAEL"
    bytes 4-7   format version, u32 (currently 1)
    bytes 8-15  header length N, u64
    N bytes     JSON header (UTF-8)
    rest        tensor blobs, raw float32 little-endian, concatenated in
                header index order

The header carries the model config, the vocabulary token list, an
activation tag, creation metadata, the parent checkpoint's hash, a
sha256 of the body, and an index of (name, shape, offset, size) per
tensor. Checkpoints are therefore self-contained: loading needs no
external tokenizer or config. Writes go to a temp file in the target
directory followed by an atomic rename, so a crash mid-write can never
leave a loadable file at the destination path.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
import time
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointError,
    ContractError,
    HashMismatchError,
    MagicError,
    MissingTensorError,
    VersionError,
)
from .model import GROUP_NAMES, ModelConfig, ModelParams
from .tensor import Tensor

_MAGIC = b"PAEL"
_VERSION = 1


def checkpoint_header(params: ModelParams, vocab_tokens: list[str], parent_hash: str | None):
    cfg = params.config
    return {
        "config": {
            "vocab_size": cfg.vocab_size,
            "image_size": cfg.image_size,
            "patch_size": cfg.patch_size,
            "enc_dim": cfg.enc_dim,
            "enc_layers": cfg.enc_layers,
            "enc_heads": cfg.enc_heads,
            "lm_dim": cfg.lm_dim,
            "lm_layers": cfg.lm_layers,
            "lm_heads": cfg.lm_heads,
            "context_len": cfg.context_len,
            "lora_rank": cfg.lora_rank,
        },
        "vocabulary": list(vocab_tokens),
        "activation": "gelu-tanh",
        "created": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        "parent": parent_hash,
    }


def save_checkpoint(
    params: ModelParams,
    path,
    vocab_tokens: list[str],
    parent_hash: str | None = None,
) -> str:
    """Write params to `path` atomically; returns the checkpoint's body hash."""
    path = Path(path)
    named = params.named_tensors()
    index = []
    blobs = []
    offset = 0
    for name, t in named.items():
        blob = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        index.append(
            {"name": name, "shape": list(t.data.shape), "offset": offset, "size": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    body = b"".join(blobs)
    header = checkpoint_header(params, vocab_tokens, parent_hash)
    header["body_sha256"] = hashlib.sha256(body).hexdigest()
    header["tensors"] = index
    header_bytes = json.dumps(header, sort_keys=True).encode()

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(_MAGIC)
            f.write(np.uint32(_VERSION).tobytes())
            f.write(np.uint64(len(header_bytes)).tobytes())
            f.write(header_bytes)
            f.write(body)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return header["body_sha256"]


def read_checkpoint_header(path) -> dict:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise MagicError(f"{path}: not a checkpoint (magic {blob[:4]!r})")
    version = int(np.frombuffer(blob, "<u4", count=1, offset=4)[0])
    if version != _VERSION:
        raise VersionError(f"{path}: unsupported format version {version}")
    hlen = int(np.frombuffer(blob, "<u8", count=1, offset=8)[0])
    try:
        header = json.loads(blob[16 : 16 + hlen])
    except ValueError as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from e
    return header


def load_checkpoint(path) -> tuple[ModelParams, list[str], dict]:
    """Returns (params, vocabulary tokens, header)."""
    path = Path(path)
    blob = path.read_bytes()
    header = read_checkpoint_header(path)
    hlen = int(np.frombuffer(blob, "<u8", count=1, offset=8)[0])
    body = blob[16 + hlen :]
    digest = hashlib.sha256(body).hexdigest()
    if digest != header["body_sha256"]:
        raise HashMismatchError(f"{path}: body hash mismatch (truncated or corrupt)")

    cfg = ModelConfig(**header["config"])
    groups: dict[str, dict[str, Tensor]] = {g: {} for g in GROUP_NAMES}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        group, key = name.split("/", 1)
        if group not in groups:
            raise CheckpointError(f"{path}: unknown parameter group {group!r}")
        data = np.frombuffer(
            body, "<f4", count=int(np.prod(shape, dtype=np.int64)), offset=entry["offset"]
        ).reshape(shape)
        groups[group][key] = Tensor(data.copy(), requires_grad=True)

    params = ModelParams(config=cfg, groups=groups)
    expected = _expected_tensor_names(cfg)
    have = set(params.named_tensors())
    missing = expected - have
    if missing:
        raise MissingTensorError(f"{path}: missing tensors {sorted(missing)[:4]}")
    return params, list(header["vocabulary"]), header


def _expected_tensor_names(cfg: ModelConfig) -> set[str]:
    from .model import init_params

    return set(init_params(cfg, seed=0).named_tensors())


def checkpoint_hash(path) -> str:
    return read_checkpoint_header(path)["body_sha256"]


# ---------------------------------------------------------------------------
# PPM image io
# ---------------------------------------------------------------------------

def write_image(image: np.ndarray, path):
    """Binary PPM (P6): header `P6\\n{W} {H}\\n255\\n` + raw RGB bytes."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ContractError(f"image must be uint8 [H,W,3], got {image.dtype} {image.shape}")
    h, w = image.shape[:2]
    header = f"P6\n{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + image.tobytes())


def read_image(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    m = re.match(rb"^P6\n(\d+) (\d+)\n255\n", blob)
    if m is None:
        raise ContractError(f"{path}: not a P6 PPM file")
    w, h = int(m.group(1)), int(m.group(2))
    pixels = blob[m.end() :]
    if len(pixels) != w * h * 3:
        raise ContractError(f"{path}: pixel payload length {len(pixels)} != {w * h * 3}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# metrics log
# ---------------------------------------------------------------------------

class MetricsLog:
    """Append-only `key=value` line records; readable after any truncation."""

    FIELDS = ("step", "stage", "task", "loss", "lr", "wall")

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, step: int, stage: str, task: str, loss: float, lr: float):
        line = (
            f"step={step} stage={stage} task={task} "
            f"loss={loss:.6f} lr={lr:.8f} wall={time.time():.3f}\n"
        )
        with open(self.path, "a") as f:
            f.write(line)

    @staticmethod
    def parse_line(line: str) -> dict:
        out = {}
        for part in line.strip().split():
            key, _, value = part.partition("=")
            out[key] = value
        return out

    def read(self) -> list[dict]:
        if not self.path.exists():
            return []
        records = []
        for line in self.path.read_text().splitlines():
            if line.strip():
                records.append(self.parse_line(line))
        return records


def strip_wall(records: list[dict]) -> list[dict]:
    """Drop volatile wall-time fields for reproducibility comparisons."""
    return [{k: v for k, v in r.items() if k != "wall"} for r in records]
