"""Hypercolumn localization: codebooks, word histograms and L1 selection.

Per-pixel hypercolumns (taps upsampled to input resolution with
receptive-field-center alignment) are quantized against an online k-means
codebook; images become L1-normalized word histograms over positive/negative
bags; an L1-regularized squared-hinge linear SVM picks discriminative words,
whose pixel support localizes the concept. Refinement repeats the pipeline
at a shallower tap conditioned on the previous positive area.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import nn, seeds
from .errors import DegenerateDataError, RefinementError, ShapeError, TapError
from .images import write_pgm, write_ppm
from .tensor import Tensor


# ---------------------------------------------------------------------------
# hypercolumn fields


def tap_geometry(net: nn.NetworkParams, tap_index):
    """(stride, offset) of the tap grid: feature cell i sits over input
    pixel offset + stride*i (its receptive-field center)."""
    stride, offset = 1.0, 0.0
    for layer in net.layers[:tap_index + 1]:
        if isinstance(layer, nn.Conv):
            k, s = layer.weights.shape[2], layer.stride
        elif isinstance(layer, nn.MaxPool):
            k, s = layer.window, layer.stride
        else:
            continue
        offset += (k - 1) / 2.0 * stride
        stride *= s
    return stride, offset


def _bilinear_to_input(fmap, stride, offset, h, w):
    """Upsample (c, fh, fw) to (c, h, w), sampling at receptive-field centers."""
    c, fh, fw = fmap.shape

    def axis_coords(n, fn):
        f = (np.arange(n) - offset) / stride
        f = np.clip(f, 0.0, fn - 1.0)
        lo = np.floor(f).astype(np.int64)
        lo = np.minimum(lo, fn - 1)
        hi = np.minimum(lo + 1, fn - 1)
        return lo, hi, (f - lo).astype(np.float32)

    y0, y1, wy = axis_coords(h, fh)
    x0, x1, wx = axis_coords(w, fw)
    rows = fmap[:, y0, :] * (1 - wy)[None, :, None] + fmap[:, y1, :] * wy[None, :, None]
    out = rows[:, :, x0] * (1 - wx)[None, None, :] + rows[:, :, x1] * wx[None, None, :]
    return out.astype(np.float32)


def hypercolumns(net: nn.NetworkParams, image: Tensor, taps) -> Tensor:
    """Per-pixel concatenated tap activations, (h, w, d)."""
    from .model import tap_indices
    if image.ndim == 2:
        image = image[None]
    _, h, w = image.shape
    tap_map = tap_indices(net)
    cache = nn.forward(net, image[None])
    planes = []
    for tap in taps:
        if tap not in tap_map:
            raise TapError(f"unknown tap {tap!r}")
        idx = tap_map[tap]
        act = cache.layers[idx].outputs
        if act.ndim != 4:
            raise TapError(f"tap {tap!r} is not spatial")
        stride, offset = tap_geometry(net, idx)
        planes.append(_bilinear_to_input(act[0], stride, offset, h, w))
    return np.concatenate(planes, axis=0).transpose(1, 2, 0).copy()


# ---------------------------------------------------------------------------
# online k-means codebook


@dataclass
class Prototypes:
    centroids: np.ndarray            # (K, d)
    counts: np.ndarray               # assignment counts per centroid


def online_kmeans(stream, k, seed=0, lloyd_passes=1) -> Prototypes:
    """Sequential k-means over an ordered vector stream.

    Centroids start from the first k distinct vectors; each later vector
    moves its nearest centroid by 1/count. An optional full-batch Lloyd
    refinement pass (default 1) tightens the codebook.
    """
    stream = np.asarray(stream, dtype=np.float64)
    if stream.ndim != 2 or len(stream) < k:
        raise DegenerateDataError(f"stream of {len(stream)} vectors cannot seed k={k}")
    seen = {}
    init_idx = []
    for i, row in enumerate(stream):
        key = row.tobytes()
        if key not in seen:
            seen[key] = True
            init_idx.append(i)
            if len(init_idx) == k:
                break
    if len(init_idx) < k:
        raise DegenerateDataError(
            f"only {len(init_idx)} distinct vectors for k={k}")
    centroids = stream[init_idx].copy()
    counts = np.ones(k, dtype=np.int64)
    start = init_idx[-1] + 1
    csq = (centroids * centroids).sum(1)
    for i in range(start, len(stream)):
        x = stream[i]
        d = csq - 2.0 * (centroids @ x)
        c = int(np.argmin(d))
        counts[c] += 1
        centroids[c] += (x - centroids[c]) / counts[c]
        csq[c] = centroids[c] @ centroids[c]
    for _ in range(lloyd_passes):
        assign = nearest_centroid(stream, centroids)
        for c in range(k):
            members = stream[assign == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
                counts[c] = len(members)
    return Prototypes(centroids, counts)


def nearest_centroid(vectors, centroids):
    """Index of the L2-nearest centroid per row; ties go to the lowest id."""
    v = np.asarray(vectors, dtype=np.float64)
    d = ((v * v).sum(1)[:, None] - 2.0 * v @ centroids.T
         + (centroids * centroids).sum(1)[None, :])
    return np.argmin(d, axis=1)


def quantization_error(vectors, centroids):
    v = np.asarray(vectors, dtype=np.float64)
    assign = nearest_centroid(v, centroids)
    diff = v - centroids[assign]
    return float((diff * diff).sum())


def assign_words(field: Tensor, prototypes: Prototypes) -> np.ndarray:
    """(h, w) grid of nearest-word ids for a hypercolumn field."""
    h, w, d = field.shape
    if d != prototypes.centroids.shape[1]:
        raise ShapeError("field dimension does not match the codebook")
    return nearest_centroid(field.reshape(-1, d), prototypes.centroids).reshape(h, w)


def word_histogram(word_map, k, mask=None):
    """L1-normalized word counts over unmasked pixels; zero vector if empty."""
    ids = np.asarray(word_map)
    if mask is not None:
        if mask.shape != ids.shape:
            raise ShapeError("mask shape does not match the word map")
        ids = ids[np.asarray(mask, dtype=bool)]
    counts = np.bincount(ids.ravel(), minlength=k).astype(np.float64)
    total = counts.sum()
    if total == 0:
        return counts
    return counts / total


# ---------------------------------------------------------------------------
# L1-regularized squared-hinge linear SVM


@dataclass
class L1Model:
    weights: np.ndarray
    bias: float
    lam: float


def _objective(z, y, w, lam):
    r = np.maximum(0.0, 1.0 - y * z)
    return float((r * r).mean() + lam * np.abs(w).sum())


def l1_svm_train(H, y, lam, seed=0, tol=1e-6, max_sweeps=10000) -> L1Model:
    """Cyclic coordinate descent on mean squared hinge + lam*||w||_1.

    Each coordinate takes a prox-Newton (soft-thresholded) step with
    backtracking, so the objective never increases and coordinates hit
    exact zeros.
    """
    H = np.asarray(H, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise DegenerateDataError("both bag labels must be present")
    n, k = H.shape
    w = np.zeros(k)
    b = 0.0
    z = np.zeros(n)                   # cached scores H @ w + b
    obj = _objective(z, y, w, lam)

    def try_step(j, col, target):
        nonlocal obj
        delta = target - (w[j] if j >= 0 else b)
        if delta == 0.0:
            return False
        z_new = z + delta * col
        if j >= 0:
            w_old = w[j]
            w[j] = target
            new_obj = _objective(z_new, y, w, lam)
            if new_obj <= obj + 1e-15:
                z[:] = z_new
                obj = new_obj
                return True
            w[j] = w_old
            return False
        new_obj = _objective(z_new, y, w, lam)
        if new_obj <= obj + 1e-15:
            z[:] = z_new
            obj = new_obj
            return True
        return False

    ones = np.ones(n)
    for _ in range(max_sweeps):
        sweep_start = obj
        for j in range(k):
            col = H[:, j] * 1.0
            a = y * col
            r = 1.0 - y * z
            active = r > 0
            g = -(2.0 / n) * (a[active] * r[active]).sum()
            hess = max((2.0 / n) * (a[active] * a[active]).sum(), 1e-12)
            target = _soft(w[j] - g / hess, lam / hess)
            # full prox step, else snap to zero, else halved steps
            if try_step(j, col, target):
                continue
            if w[j] != 0.0 and try_step(j, col, 0.0):
                continue
            step = (target - w[j]) / 2.0
            for _ in range(20):
                if try_step(j, col, w[j] + step):
                    break
                step /= 2.0
        # unpenalized bias coordinate
        r = 1.0 - y * z
        active = r > 0
        g = -(2.0 / n) * (y[active] * r[active]).sum()
        hess = max((2.0 / n) * active.sum(), 1e-12)
        target = b - g / hess
        if try_step(-1, ones, target):
            b = target
        else:
            step = (target - b) / 2.0
            for _ in range(20):
                if try_step(-1, ones, b + step):
                    b = b + step
                    break
                step /= 2.0
        if sweep_start - obj < tol:
            break
    return L1Model(w, float(b), lam)


def _soft(x, thresh):
    if x > thresh:
        return x - thresh
    if x < -thresh:
        return x + thresh
    return 0.0


def l1_objective(model: L1Model, H, y):
    z = np.asarray(H, dtype=np.float64) @ model.weights + model.bias
    return _objective(z, np.asarray(y, dtype=np.float64), model.weights, model.lam)


def select_positive_words(model: L1Model):
    """Word ids whose weights favor the positive bag."""
    return set(int(i) for i in np.flatnonzero(model.weights > 0))


def localize(word_map, selected) -> np.ndarray:
    """Binary mask: pixel on iff its word is a selected word."""
    ids = np.asarray(word_map)
    if not selected:
        return np.zeros(ids.shape, dtype=bool)
    sel = np.zeros(int(ids.max()) + 1, dtype=bool)
    sel[list(selected)] = True
    return sel[ids]


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class PipelineStage:
    tap: str
    prototypes: Prototypes
    model: L1Model
    selected: set
    word_maps_pos: list
    masks: list                       # per positive image, bool (h,w)

    def positive_pixel_fraction(self):
        if not self.masks:
            return 0.0
        return float(np.mean([m.mean() for m in self.masks]))


def _sample_pixels(field, mask, per_image, rng):
    h, w, d = field.shape
    flat = field.reshape(-1, d)
    if mask is not None:
        idx = np.flatnonzero(np.asarray(mask, dtype=bool).reshape(-1))
    else:
        idx = np.arange(h * w)
    if len(idx) > per_image:
        idx = np.sort(rng.choice(idx, size=per_image, replace=False))
    return flat[idx]


def run_stage(tap, pos_fields, neg_fields, k, lam, seed,
              prev_masks=None, pixels_per_image=300) -> PipelineStage:
    """One codebook/selection/localization pass at a tap.

    With `prev_masks`, the codebook stream draws only previously-positive
    pixels from the positive bag; result masks are intersected with the
    previous masks (refinement contract).
    """
    rng = seeds.substream(seed, seeds.KMEANS)
    stream = []
    if prev_masks is not None:
        if not any(np.asarray(m).any() for m in prev_masks):
            raise RefinementError("previous stage left no positive area")
    for i, f in enumerate(pos_fields):
        m = None if prev_masks is None else prev_masks[i]
        if m is not None and not np.asarray(m).any():
            continue
        stream.append(_sample_pixels(f, m, pixels_per_image, rng))
    for f in neg_fields:
        stream.append(_sample_pixels(f, None, pixels_per_image, rng))
    prototypes = online_kmeans(np.concatenate(stream), k, seed)
    word_maps_pos = [assign_words(f, prototypes) for f in pos_fields]
    word_maps_neg = [assign_words(f, prototypes) for f in neg_fields]
    hists = []
    labels = []
    for i, wm in enumerate(word_maps_pos):
        m = None if prev_masks is None else prev_masks[i]
        hists.append(word_histogram(wm, k, m))
        labels.append(1.0)
    for wm in word_maps_neg:
        hists.append(word_histogram(wm, k))
        labels.append(-1.0)
    model = l1_svm_train(np.stack(hists), np.asarray(labels), lam, seed)
    selected = select_positive_words(model)
    masks = []
    for i, wm in enumerate(word_maps_pos):
        m = localize(wm, selected)
        if prev_masks is not None:
            m = m & np.asarray(prev_masks[i], dtype=bool)
        masks.append(m)
    return PipelineStage(tap, prototypes, model, selected, word_maps_pos, masks)


def refine_layer(prev: PipelineStage, tap, pos_fields, neg_fields, k, lam,
                 seed, pixels_per_image=300) -> PipelineStage:
    """Re-run the pipeline at a shallower tap conditioned on prev.masks."""
    return run_stage(tap, pos_fields, neg_fields, k, lam, seed,
                     prev_masks=prev.masks, pixels_per_image=pixels_per_image)


def write_stage_report(stages, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["layer", "K", "lambda", "selected_words",
                         "positive_pixel_fraction"])
        for s in stages:
            writer.writerow([s.tap, len(s.prototypes.centroids),
                             f"{s.model.lam:g}", len(s.selected),
                             f"{s.positive_pixel_fraction():.6f}"])


# ---------------------------------------------------------------------------
# rendering


def render_overlay(image, score, path):
    """Green overlay PPM: G' = min(255, G + round(score*255)) per pixel."""
    img = np.asarray(image)
    score = np.asarray(score, dtype=np.float64)
    if img.shape != score.shape:
        raise ShapeError("image and score shapes differ")
    gray = np.clip(np.rint(img * 255.0), 0, 255).astype(np.int64)
    green = np.minimum(255, gray + np.rint(score * 255.0).astype(np.int64))
    rgb = np.stack([gray, green, gray], axis=-1).astype(np.uint8)
    write_ppm(rgb, path)
    return rgb


def write_mask(mask, path):
    """Binary mask -> 0/255 PGM."""
    write_pgm(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8), path)
