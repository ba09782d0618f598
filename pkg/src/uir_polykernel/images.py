"""Image files in and out of float arrays.

Images travel through the package as float32 (3, H, W) arrays in [0, 1],
mapped from 8-bit channels by /255. Binary PPM (P6) is read and written
directly; PNG goes through Pillow. Saving an array loaded from a file
reproduces the file's pixel values byte for byte.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

IMAGE_EXTENSIONS = (".png", ".ppm")


class ImageError(ValueError):
    """Unreadable or unsupported image file."""


def _tokenize_ppm_header(data: bytes) -> tuple[list[bytes], int]:
    """First four header tokens of a PPM, skipping whitespace and # comments.

    Returns the tokens and the offset of the first raster byte (one
    whitespace character past the maxval token).
    """
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < 4:
        if i >= len(data):
            raise ImageError("truncated header")
        c = data[i : i + 1]
        if c in b" \t\r\n":
            i += 1
        elif c == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        else:
            start = i
            while i < len(data) and data[i : i + 1] not in b" \t\r\n#":
                i += 1
            tokens.append(data[start:i])
    if i >= len(data):
        raise ImageError("no raster data after header")
    return tokens, i + 1


def _load_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, offset = _tokenize_ppm_header(data)
    if tokens[0] != b"P6":
        raise ImageError(f"{path}: not a binary PPM (got magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageError(f"{path}: non-numeric PPM header") from None
    if width < 1 or height < 1:
        raise ImageError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise ImageError(f"{path}: only maxval 255 is supported, got {maxval}")
    need = width * height * 3
    raster = data[offset : offset + need]
    if len(raster) != need:
        raise ImageError(f"{path}: raster has {len(raster)} bytes, expected {need}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)


def _save_ppm(path: str, pixels: np.ndarray) -> None:
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels).tobytes())


def load_image(path: str) -> np.ndarray:
    """File -> float32 (3, H, W) in [0, 1]."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".ppm":
        pixels = _load_ppm(path)
    elif ext == ".png":
        try:
            with Image.open(path) as im:
                pixels = np.asarray(im.convert("RGB"))
        except OSError as exc:
            raise ImageError(f"{path}: {exc}") from None
    else:
        raise ImageError(f"{path}: unsupported extension {ext!r}")
    return (pixels.astype(np.float32) / 255.0).transpose(2, 0, 1)


def save_image(path: str, arr: np.ndarray) -> None:
    """Float (3, H, W) -> file; values are clipped then rounded to 8 bits."""
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ImageError(f"expected (3, H, W), got {arr.shape}")
    pixels = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".ppm":
        _save_ppm(path, pixels)
    elif ext == ".png":
        Image.fromarray(pixels, mode="RGB").save(path)
    else:
        raise ImageError(f"{path}: unsupported extension {ext!r}")


def pad_to_multiple(arr: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Pad (3, H, W) on the bottom/right so H and W divide ``multiple``.

    Returns the padded array and the original (H, W) for ``crop_to``.
    Padding reflects the image content (falling back to edge replication
    when the image is thinner than the pad).
    """
    _, h, w = arr.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return arr, (h, w)
    mode = "reflect" if ph < h and pw < w else "edge"
    return np.pad(arr, ((0, 0), (0, ph), (0, pw)), mode=mode), (h, w)


def crop_to(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    return arr[:, :h, :w]


def list_images(directory: str) -> list[str]:
    """Sorted image filenames (not paths) directly inside ``directory``."""
    if not os.path.isdir(directory):
        raise ImageError(f"not a directory: {directory}")
    names = [
        name
        for name in sorted(os.listdir(directory))
        if os.path.splitext(name)[1].lower() in IMAGE_EXTENSIONS
    ]
    return names


def load_pairs(input_dir: str, target_dir: str) -> list[tuple[np.ndarray, np.ndarray, str]]:
    """Match files by name across two directories and load both sides."""
    in_names = list_images(input_dir)
    tgt_names = set(list_images(target_dir))
    if not in_names:
        raise ImageError(f"no images in {input_dir}")
    missing = [n for n in in_names if n not in tgt_names]
    if missing:
        raise ImageError(f"no target for {missing[0]} in {target_dir}")
    pairs = []
    for name in in_names:
        a = load_image(os.path.join(input_dir, name))
        b = load_image(os.path.join(target_dir, name))
        if a.shape != b.shape:
            raise ImageError(f"{name}: input {a.shape} does not match target {b.shape}")
        pairs.append((a, b, name))
    return pairs
