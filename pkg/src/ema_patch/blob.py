"""Binary container: magic, JSON header, raw payload.

Layout::

    magic (4 bytes) | header length (uint32 LE) | header JSON (utf-8) | payload

The header always carries ``payload_sha256`` so truncation or bit rot is
reported instead of silently loading garbage.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np
import torch


class BlobFormatError(ValueError):
    pass


def write_blob(path: str | Path, magic: bytes, header: dict, payload: bytes) -> Path:
    assert len(magic) == 4
    header = dict(header, payload_sha256=hashlib.sha256(payload).hexdigest())
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    return path


def read_blob(path: str | Path, magic: bytes) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != magic:
        raise BlobFormatError(f"{path}: not a {magic!r} file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if 8 + hlen > len(raw):
        raise BlobFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BlobFormatError(f"{path}: unreadable header ({exc})") from None
    payload = raw[8 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise BlobFormatError(f"{path}: payload checksum mismatch (corrupt or truncated)")
    return header, payload


WEIGHTS_MAGIC = b"EMAW"
WEIGHTS_VERSION = 1


def save_weights(path: str | Path, tensors: dict[str, torch.Tensor], kind: str, **extra) -> Path:
    """Flat float64 little-endian dump of named tensors, in insertion order."""
    shapes = {name: list(t.shape) for name, t in tensors.items()}
    buf = io.BytesIO()
    for t in tensors.values():
        buf.write(t.detach().cpu().to(torch.float64).contiguous().numpy().astype("<f8").tobytes())
    header = {"version": WEIGHTS_VERSION, "dtype": "float64", "shape": shapes, "order": list(shapes),
              "kind": kind, **extra}
    return write_blob(path, WEIGHTS_MAGIC, header, buf.getvalue())


def load_weights(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    header, payload = read_blob(path, WEIGHTS_MAGIC)
    if header.get("version") != WEIGHTS_VERSION:
        raise BlobFormatError(f"{path}: weights version {header.get('version')} unsupported")
    flat = np.frombuffer(payload, dtype="<f8")
    out: dict[str, torch.Tensor] = {}
    pos = 0
    for name in header.get("order", list(header["shape"])):
        shape = header["shape"][name]
        n = int(np.prod(shape)) if shape else 1
        if pos + n > flat.size:
            raise BlobFormatError(f"{path}: payload too short for tensor {name!r}")
        out[name] = torch.from_numpy(flat[pos : pos + n].copy()).reshape(shape)
        pos += n
    if pos != flat.size:
        raise BlobFormatError(f"{path}: {flat.size - pos} trailing values in payload")
    return header, out
