"""Disk formats: PFM float maps, 16-bit disparity PNGs, PPM/PNG images.

PFM stores rows bottom-up with an endianness marker in the sign of the
scale line. Disparity PNGs follow the stored-value = round(d * 256)
convention with 0 marking invalid pixels.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .autodiff import Tensor

__all__ = [
    "read_pfm",
    "write_pfm",
    "read_disp_png16",
    "write_disp_png16",
    "read_ppm",
    "write_ppm",
    "read_png8",
    "write_png8",
    "read_image",
    "write_image",
    "image_to_tensor",
    "tensor_to_image",
    "disparity_to_tensor",
    "tensor_to_disparity",
]


# ---------------------------------------------------------------------------
# PFM


def _read_header_token(fh) -> bytes:
    """Next whitespace-delimited token, skipping # comments."""
    tok = b""
    while True:
        ch = fh.read(1)
        if ch == b"":
            if tok:
                return tok
            raise ValueError("truncated PFM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_pfm(path) -> np.ndarray:
    """Read a grayscale PFM into a top-down (h, w) float32 array."""
    with open(path, "rb") as fh:
        magic = _read_header_token(fh)
        if magic == b"PF":
            raise ValueError("color PFM (header 'PF') is not supported, expected 'Pf'")
        if magic != b"Pf":
            raise ValueError(f"not a PFM file (header {magic!r})")
        try:
            w = int(_read_header_token(fh))
            h = int(_read_header_token(fh))
            scale = float(_read_header_token(fh))
        except ValueError as exc:
            raise ValueError(f"malformed PFM header: {exc}") from exc
        if w <= 0 or h <= 0:
            raise ValueError(f"bad PFM dimensions {w}x{h}")
        if scale == 0.0:
            raise ValueError("PFM scale must be nonzero")
        dtype = "<f4" if scale < 0 else ">f4"
        payload = fh.read(4 * w * h)
        if len(payload) != 4 * w * h:
            raise ValueError(
                f"truncated PFM payload: expected {4 * w * h} bytes, got {len(payload)}"
            )
        data = np.frombuffer(payload, dtype=dtype).reshape(h, w)
    # file rows run bottom-up
    return np.ascontiguousarray(data[::-1]).astype(np.float32)


def write_pfm(path, disp: np.ndarray) -> None:
    """Write a (h, w) float map as little-endian grayscale PFM."""
    arr = np.asarray(disp, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"expected a rank-2 map, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(arr[::-1].astype("<f4").tobytes())


# ---------------------------------------------------------------------------
# 16-bit disparity PNG


def write_disp_png16(path, disp: np.ndarray, valid: np.ndarray | None = None) -> None:
    """Store round(d * 256) as 16-bit grayscale; invalid pixels become 0."""
    arr = np.asarray(disp, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a rank-2 map, got shape {arr.shape}")
    stored = np.clip(np.rint(arr * 256.0), 0, 65535).astype(np.uint16)
    if valid is not None:
        stored = np.where(np.asarray(valid) > 0.5, stored, 0).astype(np.uint16)
    Image.fromarray(stored).save(path)


def read_disp_png16(path) -> tuple[np.ndarray, np.ndarray]:
    """Return (disparity float64, validity mask); stored 0 means invalid."""
    img = Image.open(path)
    if img.mode not in ("I;16", "I;16B", "I;16L"):
        raise ValueError(f"expected a 16-bit grayscale PNG, got mode {img.mode!r}")
    stored = np.asarray(img, dtype=np.uint16).astype(np.float64)
    valid = (stored > 0).astype(np.float64)
    return stored / 256.0, valid


# ---------------------------------------------------------------------------
# RGB images


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = _read_header_token(fh)
        if magic != b"P6":
            raise ValueError(f"not a binary PPM (header {magic!r})")
        w = int(_read_header_token(fh))
        h = int(_read_header_token(fh))
        maxval = int(_read_header_token(fh))
        if maxval != 255:
            raise ValueError(f"only maxval 255 PPM supported, got {maxval}")
        payload = fh.read(3 * w * h)
        if len(payload) != 3 * w * h:
            raise ValueError("truncated PPM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, image: np.ndarray) -> None:
    arr = _as_rgb8(image)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_png8(path) -> np.ndarray:
    img = Image.open(path)
    return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


def write_png8(path, image: np.ndarray) -> None:
    Image.fromarray(_as_rgb8(image), mode="RGB").save(path)


def _as_rgb8(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (h, w, 3) RGB, got shape {arr.shape}")
    return arr.astype(np.uint8)


def read_image(path) -> np.ndarray:
    suffix = str(path).rsplit(".", 1)[-1].lower()
    if suffix == "ppm":
        return read_ppm(path)
    if suffix == "png":
        return read_png8(path)
    raise ValueError(f"unsupported image extension .{suffix}")


def write_image(path, image: np.ndarray) -> None:
    suffix = str(path).rsplit(".", 1)[-1].lower()
    if suffix == "ppm":
        write_ppm(path, image)
    elif suffix == "png":
        write_png8(path, image)
    else:
        raise ValueError(f"unsupported image extension .{suffix}")


# ---------------------------------------------------------------------------
# array <-> tensor bridges


def image_to_tensor(image: np.ndarray) -> Tensor:
    """(h, w, 3) uint8 -> (1, 3, h, w) float64 in [0, 1]."""
    arr = _as_rgb8(image).astype(np.float64) / 255.0
    return Tensor(arr.transpose(2, 0, 1)[None])


def tensor_to_image(t: Tensor) -> np.ndarray:
    """(1, 3, h, w) in [0, 1] -> (h, w, 3) uint8 with rounding."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if data.ndim != 4 or data.shape[0] != 1 or data.shape[1] != 3:
        raise ValueError(f"expected shape (1, 3, h, w), got {data.shape}")
    arr = np.clip(np.rint(data[0] * 255.0), 0, 255).astype(np.uint8)
    return arr.transpose(1, 2, 0)


def disparity_to_tensor(disp: np.ndarray) -> Tensor:
    """(h, w) float map -> (1, 1, h, w) tensor."""
    arr = np.asarray(disp, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a rank-2 map, got shape {arr.shape}")
    return Tensor(arr[None, None])


def tensor_to_disparity(t: Tensor) -> np.ndarray:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if data.ndim != 4 or data.shape[0] != 1 or data.shape[1] != 1:
        raise ValueError(f"expected shape (1, 1, h, w), got {data.shape}")
    return data[0, 0].copy()
