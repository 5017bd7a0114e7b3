"""Image and label-map file IO.

Images travel as (H, W, 3) float arrays in [0, 1]; label maps as (H, W)
non-negative int arrays. The interchange formats are binary PPM (P6,
maxval 255) for images and 16-bit binary PGM (P5, maxval 65535,
big-endian samples) for label maps. PNG is available behind the same
calls when Pillow is installed.
"""

from __future__ import annotations

import csv
import os

import numpy as np

__all__ = [
    "load_image",
    "save_image",
    "load_labels",
    "save_labels",
    "read_manifest",
    "write_manifest",
    "ImageFormatError",
]


class ImageFormatError(ValueError):
    """Malformed or truncated image file."""


def _read_pnm_header(buf: bytes, magic: bytes):
    if not buf.startswith(magic):
        raise ImageFormatError(f"expected {magic.decode()} header, got {buf[:2]!r}")
    # header fields separated by whitespace, '#' comments allowed
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        fields.append(buf[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as e:
        raise ImageFormatError(f"bad header field: {e}") from None
    if w < 1 or h < 1:
        raise ImageFormatError(f"bad dimensions {w}x{h}")
    return w, h, maxval, pos


def load_image(path: str) -> np.ndarray:
    """Read a P6 PPM (or PNG, if Pillow is available) into float32 [0,1]."""
    if str(path).lower().endswith(".png"):
        return _load_png(path)
    with open(path, "rb") as fh:
        buf = fh.read()
    w, h, maxval, pos = _read_pnm_header(buf, b"P6")
    if maxval != 255:
        raise ImageFormatError(f"unsupported PPM maxval {maxval}")
    need = w * h * 3
    payload = buf[pos : pos + need]
    if len(payload) < need:
        raise ImageFormatError(f"truncated payload: need {need} bytes, have {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float32) / 255.0


def save_image(path: str, pixels: np.ndarray) -> None:
    """Write float [0,1] pixels as P6 PPM (or PNG by extension)."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) pixels, got {pixels.shape}")
    q = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    if str(path).lower().endswith(".png"):
        _save_png(path, q)
        return
    h, w = q.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(q.tobytes())


def _load_png(path: str) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as e:
        raise ImageFormatError("PNG support requires Pillow (pip install cdspix[png])") from e
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def _save_png(path: str, q: np.ndarray) -> None:
    try:
        from PIL import Image
    except ImportError as e:
        raise ImageFormatError("PNG support requires Pillow (pip install cdspix[png])") from e
    Image.fromarray(q, mode="RGB").save(path)


def load_labels(path: str) -> np.ndarray:
    """Read a 16-bit P5 PGM label map into an int32 array."""
    with open(path, "rb") as fh:
        buf = fh.read()
    w, h, maxval, pos = _read_pnm_header(buf, b"P5")
    if maxval != 65535:
        raise ImageFormatError(f"expected 16-bit PGM (maxval 65535), got {maxval}")
    need = w * h * 2
    payload = buf[pos : pos + need]
    if len(payload) < need:
        raise ImageFormatError(f"truncated payload: need {need} bytes, have {len(payload)}")
    return np.frombuffer(payload, dtype=">u2").reshape(h, w).astype(np.int32)


def save_labels(path: str, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"expected (H, W) labels, got {labels.shape}")
    if labels.min() < 0 or labels.max() > 65535:
        raise ValueError("label ids must fit in uint16")
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(labels.astype(">u2").tobytes())


def read_manifest(path: str) -> list[tuple[str, str]]:
    """Read a dataset manifest: CSV with header ``image,label``.

    Relative entries resolve against the manifest's directory.
    """
    base = os.path.dirname(os.path.abspath(path))
    rows: list[tuple[str, str]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames[:2]] != ["image", "label"]:
            raise ImageFormatError(f"manifest must start with header 'image,label', got {reader.fieldnames}")
        for rec in reader:
            img, lab = rec["image"].strip(), rec["label"].strip()
            if not os.path.isabs(img):
                img = os.path.join(base, img)
            if not os.path.isabs(lab):
                lab = os.path.join(base, lab)
            rows.append((img, lab))
    return rows


def write_manifest(path: str, pairs: list[tuple[str, str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image", "label"])
        writer.writerows(pairs)
