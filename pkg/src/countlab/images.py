"""Binary PGM (P5) and PPM (P6) readers/writers, 8-bit."""

import numpy as np

from .errors import FormatError


def _read_header_tokens(f, count):
    tokens = []
    while len(tokens) < count:
        line = f.readline()
        if not line:
            raise FormatError("truncated netpbm header")
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
    return tokens


def read_pgm(path) -> np.ndarray:
    """8-bit binary PGM -> float32 (h,w) in [0,1]."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic != b"P5":
            raise FormatError(f"{path}: not a binary PGM (magic {magic!r})")
        w, h, maxval = (int(t) for t in _read_header_tokens(f, 3))
        if maxval != 255:
            raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
        data = f.read(w * h)
    if len(data) != w * h:
        raise FormatError(f"{path}: truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).astype(np.float32) / 255.0


def write_pgm(img: np.ndarray, path):
    """(h,w) array -> binary PGM; floats in [0,1] are scaled, uint8 passed through."""
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def write_ppm(rgb: np.ndarray, path):
    """(h,w,3) uint8 -> binary PPM."""
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise FormatError("write_ppm expects (h,w,3) uint8")
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    """Binary PPM -> (h,w,3) uint8."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic != b"P6":
            raise FormatError(f"{path}: not a binary PPM (magic {magic!r})")
        w, h, maxval = (int(t) for t in _read_header_tokens(f, 3))
        if maxval != 255:
            raise FormatError(f"{path}: only maxval 255 supported")
        data = f.read(w * h * 3)
    if len(data) != w * h * 3:
        raise FormatError(f"{path}: truncated PPM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()
