"""MNIST-format ingestion and the digit collage generator.

Collages are 100x100 canvases holding up to five 28x28 digit stamps whose
centers are pairwise more than 28 px apart; the training label is the number
of even digits (0 counts as even). A single-digit variant feeds the
representation probes. When no real MNIST dump is available,
`make_digit_idx` writes an IDX pair built from the scikit-learn handwritten
digits upsampled to 28x28 with seeded jitter, so the rest of the pipeline is
exercised unchanged.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import seeds
from .errors import FormatError, GenerationError
from .shards import ShardData, quantize_image
from .tensor import Tensor

DIGIT_SIZE = 28
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class MnistSet:
    images: Tensor            # (n, 28, 28) float32 in [0,1]
    labels: np.ndarray        # (n,) uint8 digits 0-9

    def __len__(self):
        return len(self.labels)


def _uniform_counts(max_count):
    return np.full(max_count + 1, 1.0 / (max_count + 1))


@dataclass
class CollageConfig:
    canvas_h: int = 100
    canvas_w: int = 100
    max_digits: int = 5
    min_center_dist: float = 28.0
    count_distribution: np.ndarray | None = None
    max_attempts: int = 1000
    max_layout_retries: int = 10

    def counts(self):
        if self.count_distribution is None:
            return _uniform_counts(self.max_digits)
        p = np.asarray(self.count_distribution, dtype=np.float64)
        return p / p.sum()


@dataclass
class CollageSample:
    image: Tensor             # (1, h, w) float32 in [0,1]
    label: int                # number of even digits present
    placements: list = field(default_factory=list)  # (digit, center_y, center_x)


# ---------------------------------------------------------------------------
# IDX container


def load_idx(path):
    """Parse a big-endian IDX file: images -> float32 [0,1], labels -> uint8."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header")
    magic = struct.unpack_from(">I", raw, 0)[0]
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX dimension list")
    dims = struct.unpack_from(">" + "I" * ndim, raw, 4)
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise OSError(f"{path}: truncated IDX payload "
                      f"({len(raw) - header} of {count} bytes)")
    payload = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header)
    if magic == IDX_LABELS_MAGIC:
        return payload.copy()
    return payload.reshape(dims).astype(np.float32) / 255.0


def write_idx(arr, path):
    """Write uint8 images (n,h,w) or labels (n,) in IDX format."""
    arr = np.asarray(arr, dtype=np.uint8)
    magic = IDX_IMAGES_MAGIC if arr.ndim == 3 else IDX_LABELS_MAGIC
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(">" + "I" * arr.ndim, *arr.shape))
        f.write(arr.tobytes())


def load_mnist(images_path, labels_path) -> MnistSet:
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 3 or len(images) != len(labels):
        raise FormatError("IDX image/label pair is inconsistent")
    return MnistSet(images, labels)


def make_digit_idx(out_dir, seed=0, variants=8):
    """Write an MNIST-format IDX pair built from scikit-learn's 8x8 digits.

    Each source digit is upsampled to 28x28 and replicated `variants` times
    under seeded rotation/translation jitter. Returns the two paths.
    """
    from pathlib import Path

    from scipy import ndimage as ndi
    from sklearn.datasets import load_digits

    src = load_digits()
    base = src.images / 16.0
    rng = seeds.substream(seed, "digit-bank")
    images = []
    labels = []
    for img, lab in zip(base, src.target):
        big = ndi.zoom(img, DIGIT_SIZE / 8.0, order=1, mode="nearest")
        big = ndi.gaussian_filter(big, 0.8)
        for _ in range(variants):
            angle = rng.uniform(-10.0, 10.0)
            shift = rng.uniform(-1.5, 1.5, size=2)
            var = ndi.rotate(big, angle, reshape=False, order=1, mode="constant")
            var = ndi.shift(var, shift, order=1, mode="constant")
            peak = var.max()
            if peak > 0:
                var = var / peak
            images.append(np.clip(np.rint(var * 255), 0, 255).astype(np.uint8))
            labels.append(lab)
    order = rng.permutation(len(images))
    images = np.stack(images)[order]
    labels = np.asarray(labels, dtype=np.uint8)[order]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    img_path = out / "train-images-idx3-ubyte"
    lab_path = out / "train-labels-idx1-ubyte"
    write_idx(images, img_path)
    write_idx(labels, lab_path)
    return img_path, lab_path


# ---------------------------------------------------------------------------
# collage generation


def _center_bounds(cfg):
    lo = DIGIT_SIZE // 2
    hi_y = cfg.canvas_h - DIGIT_SIZE // 2
    hi_x = cfg.canvas_w - DIGIT_SIZE // 2
    if hi_y < lo or hi_x < lo:
        raise GenerationError("canvas too small for a digit stamp")
    return lo, hi_y, hi_x


def _sample_centers(rng, cfg, k):
    lo, hi_y, hi_x = _center_bounds(cfg)
    for _ in range(cfg.max_layout_retries):
        centers = []
        rejections = 0
        while len(centers) < k:
            cy = int(rng.integers(lo, hi_y + 1))
            cx = int(rng.integers(lo, hi_x + 1))
            if all((cy - y) ** 2 + (cx - x) ** 2 > cfg.min_center_dist ** 2
                   for y, x in centers):
                centers.append((cy, cx))
            else:
                rejections += 1
                if rejections >= cfg.max_attempts:
                    break
        if len(centers) == k:
            return centers
    raise GenerationError(
        f"could not place {k} digits after {cfg.max_layout_retries} layout retries")


def _stamp(canvas, patch, cy, cx):
    half = DIGIT_SIZE // 2
    region = canvas[cy - half:cy - half + DIGIT_SIZE, cx - half:cx - half + DIGIT_SIZE]
    np.maximum(region, patch, out=region)


def generate_collage(seed, cfg: CollageConfig, mnist: MnistSet, index=0) -> CollageSample:
    """One collage, bit-identical for a fixed (seed, index, config)."""
    if len(mnist) == 0:
        raise GenerationError("empty MNIST set")
    rng = seeds.substream(seed, seeds.DATA, index)
    k = int(rng.choice(len(cfg.counts()), p=cfg.counts()))
    digit_idx = rng.integers(0, len(mnist), size=k)
    centers = _sample_centers(rng, cfg, k)
    canvas = np.zeros((cfg.canvas_h, cfg.canvas_w), dtype=np.float32)
    placements = []
    for di, (cy, cx) in zip(digit_idx, centers):
        _stamp(canvas, mnist.images[di], cy, cx)
        placements.append((int(mnist.labels[di]), cy, cx))
    label = sum(1 for d, _, _ in placements if d % 2 == 0)
    return CollageSample(canvas[None], label, placements)


def generate_collage_set(seed, cfg: CollageConfig, mnist: MnistSet, n) -> ShardData:
    """n collages as a packed shard; per-sample seeded (parallel-safe contract)."""
    images = np.zeros((n, 1, cfg.canvas_h, cfg.canvas_w), dtype=np.uint8)
    labels = np.zeros(n, dtype=np.uint8)
    placements = []
    for i in range(n):
        s = generate_collage(seed, cfg, mnist, index=i)
        images[i, 0] = quantize_image(s.image[0])
        labels[i] = s.label
        placements.append(s.placements)
    return ShardData(images, labels, placements)


def generate_single_digit_set(seed, mnist: MnistSet, n,
                              canvas_h=100, canvas_w=100) -> ShardData:
    """Single-digit probe inputs: one digit centered on an empty canvas.

    The shard label is the digit value (0-9); parity is derived from it.
    Centering removes stamp position as a nuisance variable, so probe
    accuracy measures what the representation encodes about digit shape
    rather than how well a small-sample SVM can marginalize position.
    """
    if n < 1:
        raise GenerationError("need n >= 1")
    if canvas_h < DIGIT_SIZE or canvas_w < DIGIT_SIZE:
        raise GenerationError("canvas too small for a digit stamp")
    images = np.zeros((n, 1, canvas_h, canvas_w), dtype=np.uint8)
    labels = np.zeros(n, dtype=np.uint8)
    placements = []
    for i in range(n):
        rng = seeds.substream(seed, "singles", i)
        di = int(rng.integers(0, len(mnist)))
        cy = canvas_h // 2
        cx = canvas_w // 2
        canvas = np.zeros((canvas_h, canvas_w), dtype=np.float32)
        _stamp(canvas, mnist.images[di], cy, cx)
        images[i, 0] = quantize_image(canvas)
        labels[i] = mnist.labels[di]
        placements.append([(int(mnist.labels[di]), cy, cx)])
    return ShardData(images, labels, placements)


def parity_labels(digits) -> np.ndarray:
    """Digit values -> +1 (even) / -1 (odd)."""
    digits = np.asarray(digits)
    return np.where(digits % 2 == 0, 1, -1).astype(np.int64)
