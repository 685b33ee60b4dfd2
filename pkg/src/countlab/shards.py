"""CNTS shard container for generated datasets.

Layout (little-endian):
  magic "CNTS", u16 version=1, u32 sample count, u16 h, u16 w, u8 channels,
  then per sample: u8 label, u8 placement count,
  placements as (u8 digit, u16 y, u16 x), then h*w*channels pixel bytes.

Pixels are stored as bytes; images therefore live on the 1/255 grid and
round-trip bit-exactly. Pedestrian scenes store placements with the digit
field set to the 255 sentinel.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

MAGIC = b"CNTS"
VERSION = 1
PED_SENTINEL = 255


@dataclass
class ShardData:
    """In-memory dataset: uint8 pixels plus labels and placements."""
    images: np.ndarray       # (n, channels, h, w) uint8
    labels: np.ndarray       # (n,) uint8
    placements: list         # per sample: list of (digit, y, x)

    def __len__(self):
        return len(self.labels)

    def images_f32(self, idx=None) -> np.ndarray:
        sel = self.images if idx is None else self.images[idx]
        return sel.astype(np.float32) / 255.0


def quantize_image(img: np.ndarray) -> np.ndarray:
    """[0,1] float image -> uint8 bytes (round-trip exact after /255)."""
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def write_shard(data: ShardData, path):
    n, c, h, w = data.images.shape
    if len(data.labels) != n or len(data.placements) != n:
        raise FormatError("inconsistent sample counts in shard data")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HIHHB", VERSION, n, h, w, c))
        for i in range(n):
            pls = data.placements[i]
            f.write(struct.pack("<BB", int(data.labels[i]), len(pls)))
            for digit, y, x in pls:
                f.write(struct.pack("<BHH", int(digit), int(y), int(x)))
            f.write(data.images[i].tobytes())


def read_shard(path) -> ShardData:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise FormatError(f"bad shard magic in {path}")
    if len(raw) < 15:
        raise FormatError(f"truncated shard header in {path}")
    version, n, h, w, c = struct.unpack_from("<HIHHB", raw, 4)
    if version != VERSION:
        raise FormatError(f"unsupported shard version {version}")
    images = np.empty((n, c, h, w), dtype=np.uint8)
    labels = np.empty(n, dtype=np.uint8)
    placements = []
    off = 15
    pix = h * w * c
    try:
        for i in range(n):
            labels[i], npl = struct.unpack_from("<BB", raw, off)
            off += 2
            pls = []
            for _ in range(npl):
                pls.append(struct.unpack_from("<BHH", raw, off))
                off += 5
            placements.append(pls)
            if len(raw) - off < pix:
                raise struct.error("short pixel payload")
            img = np.frombuffer(raw, dtype=np.uint8, count=pix, offset=off)
            images[i] = img.reshape(c, h, w)
            off += pix
    except struct.error as exc:
        raise FormatError(f"truncated shard {path}: {exc}") from None
    if off != len(raw):
        raise FormatError(f"trailing bytes in shard {path}")
    return ShardData(images, labels, placements)
