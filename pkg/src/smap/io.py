"""Binary PGM/PPM images and the checkpoint container.

Checkpoint layout (all integers little-endian)::

    b"SMAPCKPT"  u32 format version  u64 manifest length
    manifest     canonical JSON (sorted keys, no whitespace), UTF-8
    blob         tensors back to back, little-endian IEEE-754

The manifest records each tensor's name, shape, dtype, byte offset into the
blob and scalar count, plus the blob length, its SHA-256, the model kind and
the run configuration that produced it.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SMAPCKPT"
FORMAT_VERSION = 1
_DTYPES = {"<f4": np.float32, "<f8": np.float64, "<i8": np.int64}


class FormatError(ValueError):
    pass


# --------------------------------------------------------------------------- images


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def encode_image(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise FormatError(f"expected (H, W), (H, W, 1) or (H, W, 3), got {img.shape}")
    h, w, ch = img.shape
    magic = b"P5" if ch == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + quantize(img).tobytes()


def decode_image(data: bytes) -> np.ndarray:
    """Parse a binary PGM/PPM (maxval <= 255) into floats ``(H, W, ch)`` in [0, 1]."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"not a binary PGM/PPM (magic {magic!r})")
    ch = 1 if magic == b"P5" else 3
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated header")
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if not 0 < maxval <= 255:
        raise FormatError(f"unsupported maxval {maxval}")
    raw = data[pos:]
    if len(raw) != w * h * ch:
        raise FormatError(f"expected {w * h * ch} pixel bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, ch).astype(np.float64) / maxval


def write_image(img: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_image(img))


def read_image(path) -> np.ndarray:
    return decode_image(Path(path).read_bytes())


# --------------------------------------------------------------------------- checkpoints


@dataclass
class ModelBundle:
    kind: str
    config: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_module(cls, kind: str, module: torch.nn.Module, config: dict) -> "ModelBundle":
        tensors = {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}
        return cls(kind, config, tensors)

    def load_into(self, module: torch.nn.Module) -> torch.nn.Module:
        state = module.state_dict()
        if set(state) != set(self.tensors):
            missing = sorted(set(state) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(state))
            raise FormatError(f"parameter names differ; missing {missing}, unexpected {extra}")
        module.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in self.tensors.items()})
        return module


def _dtype_code(a: np.ndarray) -> str:
    code = a.dtype.newbyteorder("<").str
    if code not in _DTYPES:
        raise FormatError(f"unsupported tensor dtype {a.dtype}")
    return code


def encode_checkpoint(bundle: ModelBundle) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in bundle.tensors.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        raw = np.ascontiguousarray(arr, dtype=np.dtype(code)).tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset, "count": int(arr.size)}
        )
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": bundle.kind,
        "config": bundle.config,
        "tensors": entries,
        "blob_bytes": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(text)) + text + blob


def decode_checkpoint(data: bytes) -> ModelBundle:
    head = len(MAGIC) + 12
    if len(data) < head or data[: len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, mlen = struct.unpack("<IQ", data[len(MAGIC) : head])
    if version != FORMAT_VERSION:
        raise FormatError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    if len(data) < head + mlen:
        raise FormatError("truncated manifest")
    manifest = json.loads(data[head : head + mlen].decode("utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError("manifest version disagrees with header")
    blob = data[head + mlen :]
    if len(blob) != manifest["blob_bytes"]:
        raise FormatError(f"blob has {len(blob)} bytes, manifest says {manifest['blob_bytes']}")
    expected = 0
    for e in manifest["tensors"]:
        width = np.dtype(e["dtype"]).itemsize
        if e["offset"] != expected or int(np.prod(e["shape"], dtype=np.int64)) != e["count"]:
            raise FormatError(f"manifest entry {e['name']!r} is inconsistent")
        expected += e["count"] * width
    if expected != len(blob):
        raise FormatError(f"manifest covers {expected} bytes but blob has {len(blob)}")
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise FormatError("blob checksum mismatch")
    tensors = {}
    for e in manifest["tensors"]:
        dt = np.dtype(e["dtype"])
        arr = np.frombuffer(blob, dtype=dt, count=e["count"], offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="))
    return ModelBundle(manifest["kind"], manifest["config"], tensors)


def save_checkpoint(bundle: ModelBundle, path) -> None:
    Path(path).write_bytes(encode_checkpoint(bundle))


def load_checkpoint(path) -> ModelBundle:
    return decode_checkpoint(Path(path).read_bytes())
