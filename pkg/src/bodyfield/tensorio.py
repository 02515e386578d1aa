"""Binary named-tensor container and lossless image I/O.

The tensor container backs checkpoints: a magic line, an 8-byte little-endian
header length, a JSON header (sorted keys, so bytes are reproducible), then
raw C-order array data in header order. Re-saving a loaded file reproduces
it byte for byte.

Images: 8-bit channel PNG for dataset frames and previews, float32 .npy for
exact-valued renders. Both round-trip losslessly at their own precision.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

MAGIC = b"BFTENSORS1\n"
FORMAT_VERSION = 1


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray],
                 meta: dict | None = None) -> None:
    """Write named arrays plus a JSON-serializable metadata dict."""
    names = sorted(tensors)
    entries = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(tensors[name])
        blob = arr.tobytes()
        entries.append({"name": name, "dtype": str(arr.dtype),
                        "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {"format_version": FORMAT_VERSION, "meta": meta or {},
              "tensors": entries}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for blob in blobs:
            f.write(blob)


def load_tensors(path: str | Path):
    """Returns (tensors dict, meta dict). Raises ValueError on a bad file."""
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a tensor container")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(
                f"{path}: unsupported container version "
                f"{header.get('format_version')!r} (expected {FORMAT_VERSION})")
        data = f.read()
    tensors = {}
    for ent in header["tensors"]:
        raw = data[ent["offset"]:ent["offset"] + ent["nbytes"]]
        if len(raw) != ent["nbytes"]:
            raise ValueError(f"{path}: truncated tensor {ent['name']!r}")
        arr = np.frombuffer(raw, dtype=np.dtype(ent["dtype"]))
        tensors[ent["name"]] = arr.reshape(ent["shape"]).copy()
    return tensors, header["meta"]


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


def to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_image_u8(path: str | Path, img: np.ndarray) -> None:
    """Float [0,1] image (H, W, 3) to 8-bit PNG (lossless at 8-bit precision)."""
    Image.fromarray(to_u8(img), mode="RGB").save(path, format="PNG")


def load_image_u8(path: str | Path) -> np.ndarray:
    """PNG to float64 (H, W, 3) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image_f32(path: str | Path, img: np.ndarray) -> None:
    """Exact float32 image variant (.npy)."""
    np.save(path, np.asarray(img, dtype=np.float32))


def load_image_f32(path: str | Path) -> np.ndarray:
    return np.load(path)
