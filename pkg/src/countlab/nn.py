"""Layers, loss, backprop, SGD and a finite-difference gradient checker.

Every layer has a batched forward over (n, c, h, w) inputs plus the batched
backward used by `backprop`. Convolutions are valid (no padding); pooling is
max pooling with recorded argmax indices; normalization is across-channel
LRN. All arithmetic is float32.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

from . import seeds
from .errors import DataError, ShapeError
from .tensor import Tensor


# ---------------------------------------------------------------------------
# layer descriptors


@dataclass
class Conv:
    weights: Tensor  # (out_c, in_c, kh, kw)
    bias: Tensor     # (out_c,)
    stride: int = 1


@dataclass
class Relu:
    pass


@dataclass
class MaxPool:
    window: int
    stride: int


@dataclass
class Lrn:
    # Conventional defaults; disabled entirely when alpha == 0 and k == 1.
    local_size: int = 5
    alpha: float = 1e-4
    beta: float = 0.75
    k: float = 1.0

    def __post_init__(self):
        if self.local_size < 1 or self.local_size % 2 == 0:
            raise ShapeError(f"lrn local_size must be odd and positive, got {self.local_size}")


@dataclass
class Fc:
    weights: Tensor  # (out_units, in_units)
    bias: Tensor     # (out_units,)


@dataclass
class NetworkParams:
    layers: list
    class_count: int


@dataclass
class LayerCache:
    """Input/output activations of one layer, plus pooling argmax indices."""
    inputs: Tensor
    outputs: Tensor
    pool_index: Tensor | None = None  # (n,c,oh,ow) flat index into the window
    aux: object = None                # forward intermediates reused by backward


@dataclass
class ForwardCache:
    layers: list = field(default_factory=list)

    @property
    def logits(self):
        return self.layers[-1].outputs


def param_tensors(net: NetworkParams):
    """Parameter arrays in declaration order: (weights, bias) per conv/fc layer."""
    out = []
    for layer in net.layers:
        if isinstance(layer, (Conv, Fc)):
            out.append(layer.weights)
            out.append(layer.bias)
    return out


# ---------------------------------------------------------------------------
# im2col helpers


def _im2col(x, kh, kw, stride):
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (n, oh, ow, c, kh, kw), (sn, sh * stride, sw * stride, sc, sh, sw))
    return np.ascontiguousarray(view).reshape(n * oh * ow, c * kh * kw), oh, ow


def _col2im(dcol, x_shape, kh, kw, stride, oh, ow):
    n, c, h, w = x_shape
    dx = np.zeros(x_shape, dtype=dcol.dtype)
    dcol = dcol.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcol[:, :, i, j]
    return dx


# ---------------------------------------------------------------------------
# layer forwards (public single-sample entry points wrap the batched ones)


def conv2d(x: Tensor, layer: Conv) -> Tensor:
    """Valid cross-correlation of a single (c,h,w) input."""
    return conv2d_batch(x[None], layer)[0]


# kernel area at which the FFT route beats im2col (memory blowup = c*kh*kw)
_FFT_KERNEL_AREA = 25


def _use_fft(layer):
    kh, kw = layer.weights.shape[2:]
    return layer.stride == 1 and kh * kw >= _FFT_KERNEL_AREA


def _fft_lens(h, w):
    return sfft.next_fast_len(h), sfft.next_fast_len(w)


def conv2d_batch(x: Tensor, layer: Conv, return_aux=False):
    """Valid cross-correlation of an (n,c,h,w) batch.

    Small kernels go through an im2col GEMM; large ones through FFT (the
    im2col patch matrix grows with kernel area, the spectral product does
    not). With `return_aux` the reusable forward intermediate (patch matrix
    or input spectrum) is returned for the backward pass.
    """
    n, c, h, w = x.shape
    oc, ic, kh, kw = layer.weights.shape
    if c != ic:
        raise ShapeError(f"conv expects {ic} input channels, got {c}")
    if kh > h or kw > w:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    if layer.stride < 1:
        raise ShapeError("stride must be >= 1")
    if _use_fft(layer):
        fh, fw = _fft_lens(h, w)
        xf = sfft.rfft2(x, s=(fh, fw))
        kf = sfft.rfft2(layer.weights, s=(fh, fw))
        of = np.einsum("ncuv,ocuv->nouv", xf, kf.conj(), optimize=True)
        out = sfft.irfft2(of, s=(fh, fw))[:, :, :h - kh + 1, :w - kw + 1]
        out = np.ascontiguousarray(out, dtype=x.dtype)
        out += layer.bias[:, None, None]
        return (out, xf) if return_aux else out
    col, oh, ow = _im2col(x, kh, kw, layer.stride)
    wmat = layer.weights.reshape(oc, -1)
    out = col @ wmat.T
    out += layer.bias
    out = out.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2).copy()
    return (out, col) if return_aux else out


def _conv2d_backward(dy, x, layer: Conv, aux=None, need_dx=True):
    n, c, h, w = x.shape
    oc, ic, kh, kw = layer.weights.shape
    if _use_fft(layer):
        fh, fw = _fft_lens(h, w)
        xf = aux if aux is not None else sfft.rfft2(x, s=(fh, fw))
        dyf = sfft.rfft2(dy, s=(fh, fw))
        dwf = np.einsum("ncuv,nouv->ocuv", xf, dyf.conj(), optimize=True)
        dw = sfft.irfft2(dwf, s=(fh, fw))[:, :, :kh, :kw]
        dw = np.ascontiguousarray(dw, dtype=dy.dtype)
        db = dy.sum(axis=(0, 2, 3))
        if not need_dx:
            return None, dw, db
        kf = sfft.rfft2(layer.weights, s=(fh, fw))
        dxf = np.einsum("nouv,ocuv->ncuv", dyf, kf, optimize=True)
        dx = sfft.irfft2(dxf, s=(fh, fw))[:, :, :h, :w]
        return np.ascontiguousarray(dx, dtype=dy.dtype), dw, db
    oh, ow = dy.shape[2], dy.shape[3]
    col = aux
    if col is None:
        col, oh, ow = _im2col(x, kh, kw, layer.stride)
    dyr = dy.transpose(0, 2, 3, 1).reshape(-1, oc)
    dw = (dyr.T @ col).reshape(layer.weights.shape)
    db = dyr.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcol = dyr @ layer.weights.reshape(oc, -1)
    dx = _col2im(dcol, x.shape, kh, kw, layer.stride, oh, ow)
    return dx, dw, db


def maxpool(x: Tensor, window: int, stride: int):
    """Single (c,h,w) max pool; returns (pooled, argmax index grid)."""
    out, idx = maxpool_batch(x[None], window, stride)
    return out[0], idx[0]


def maxpool_batch(x: Tensor, window: int, stride: int):
    n, c, h, w = x.shape
    if window < 1 or stride < 1:
        raise ShapeError("pool window and stride must be >= 1")
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than input {h}x{w}")
    if window == 1 and stride == 1:
        # pass-through pool; index is trivially 0 everywhere
        return x.copy(), np.zeros(x.shape, dtype=np.int64)
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    sn, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (n, c, oh, ow, window, window), (sn, sc, sh * stride, sw * stride, sh, sw))
    flat = view.reshape(n, c, oh, ow, window * window)
    idx = flat.argmax(axis=-1)  # first max wins on ties (scan order)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def _maxpool_backward(dy, x, idx, window, stride):
    if window == 1 and stride == 1:
        return dy.copy()
    n, c, oh, ow = dy.shape
    h, w = x.shape[2], x.shape[3]
    dx = np.zeros(x.shape, dtype=dy.dtype)
    wy, wx = np.divmod(idx, window)
    oy = np.arange(oh)[None, None, :, None] * stride
    ox = np.arange(ow)[None, None, None, :] * stride
    iy = oy + wy
    ix = ox + wx
    plane = np.arange(n * c).reshape(n, c)[:, :, None, None]
    flat = ((plane * h + iy) * w + ix).ravel()
    if stride >= window:
        # non-overlapping windows: each input cell gets at most one gradient
        dx.ravel()[flat] = dy.ravel()
    else:
        np.add.at(dx.ravel(), flat, dy.ravel())
    return dx


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def lrn(x: Tensor, cfg: Lrn) -> Tensor:
    """Across-channel response normalization of a single (c,h,w) input."""
    return lrn_batch(x[None], cfg)[0]


def _channel_window_sum(t, local_size):
    # sliding sum over the (small) channel axis, zero beyond the edges
    half = local_size // 2
    c = t.shape[1]
    out = np.zeros_like(t)
    for off in range(-half, half + 1):
        lo, hi = max(0, -off), min(c, c - off)
        out[:, lo:hi] += t[:, lo + off:hi + off]
    return out


def _lrn_scale(x, cfg):
    ssum = _channel_window_sum(x * x, cfg.local_size)
    return cfg.k + (cfg.alpha / cfg.local_size) * ssum


def lrn_batch(x: Tensor, cfg: Lrn, return_aux=False):
    s = _lrn_scale(x, cfg)
    out = x * np.power(s, -cfg.beta)
    return (out, s) if return_aux else out


def _lrn_backward(dy, x, cfg: Lrn, s=None):
    if s is None:
        s = _lrn_scale(x, cfg)
    s_mb = np.power(s, -cfg.beta)
    t = dy * x * s_mb / s  # dy_i * x_i * s_i^(-beta-1)
    tsum = _channel_window_sum(t, cfg.local_size)
    return dy * s_mb - (2.0 * cfg.alpha * cfg.beta / cfg.local_size) * x * tsum


def fully_connected(x: Tensor, layer: Fc) -> Tensor:
    """W x + b for a single flat input vector."""
    if x.ndim != 1 or x.shape[0] != layer.weights.shape[1]:
        raise ShapeError(f"fc expects input length {layer.weights.shape[1]}, got {x.shape}")
    return fully_connected_batch(x[None], layer)[0]


def fully_connected_batch(x2: Tensor, layer: Fc) -> Tensor:
    if x2.shape[1] != layer.weights.shape[1]:
        raise ShapeError(f"fc expects input length {layer.weights.shape[1]}, got {x2.shape[1]}")
    return x2 @ layer.weights.T + layer.bias


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: Tensor, label: int):
    """Loss and logit gradient for one sample; max-subtraction stabilized."""
    k = logits.shape[0]
    if not 0 <= label < k:
        raise DataError(f"label {label} out of range for {k} classes")
    loss, grad = softmax_cross_entropy_batch(logits[None], np.array([label]))
    return float(loss), grad[0]


def softmax_cross_entropy_batch(logits: Tensor, labels):
    """Mean loss over the batch and the gradient of that mean w.r.t. logits."""
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= k:
        raise DataError(f"label out of range for {k} classes")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    logp = z - np.log(e.sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(n), labels].mean())
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad


# ---------------------------------------------------------------------------
# forward / backward through a whole network


def forward(net: NetworkParams, x: Tensor) -> ForwardCache:
    """Batched forward pass; x is (n,c,h,w). Cache keeps every activation."""
    cache = ForwardCache()
    params = param_tensors(net)
    dtype = params[0].dtype if params else np.float32
    cur = np.ascontiguousarray(x, dtype=dtype)
    for layer in net.layers:
        inp = cur
        pool_index = None
        aux = None
        if isinstance(layer, Conv):
            cur, aux = conv2d_batch(cur, layer, return_aux=True)
        elif isinstance(layer, Relu):
            cur = relu(cur)
        elif isinstance(layer, MaxPool):
            cur, pool_index = maxpool_batch(cur, layer.window, layer.stride)
        elif isinstance(layer, Lrn):
            cur, aux = lrn_batch(cur, layer, return_aux=True)
        elif isinstance(layer, Fc):
            if cur.ndim != 2:
                cur = cur.reshape(cur.shape[0], -1)
            cur = fully_connected_batch(cur, layer)
        else:
            raise ShapeError(f"unknown layer type {type(layer).__name__}")
        cache.layers.append(LayerCache(inp, cur, pool_index, aux))
    if cache.logits.shape[1] != net.class_count:
        raise ShapeError("final layer width does not match class_count")
    return cache


def backprop(net: NetworkParams, cache: ForwardCache, labels, need_input_grad=False):
    """Gradients of the mean cross-entropy loss.

    Returns (loss, grads, dinputs): `grads` is aligned with net.layers and
    holds (dW, db) for conv/fc layers, None otherwise; `dinputs[i]` is the
    loss gradient at layer i's input. The gradient at the first layer's
    input is only computed when `need_input_grad` is set; parameter updates
    never use it and for a wide first conv it is the single most expensive
    tensor of the whole pass.
    """
    if len(cache.layers) != len(net.layers):
        raise ShapeError("forward cache does not match network layer count")
    labels = np.atleast_1d(np.asarray(labels))
    loss, dy = softmax_cross_entropy_batch(cache.logits, labels)
    grads = [None] * len(net.layers)
    dinputs = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        lc = cache.layers[i]
        if isinstance(layer, Conv):
            dy, dw, db = _conv2d_backward(dy, lc.inputs, layer, aux=lc.aux,
                                          need_dx=(i > 0 or need_input_grad))
            grads[i] = (dw, db)
        elif isinstance(layer, Relu):
            dy = dy * (lc.inputs > 0)
        elif isinstance(layer, MaxPool):
            dy = _maxpool_backward(dy, lc.inputs, lc.pool_index, layer.window, layer.stride)
        elif isinstance(layer, Lrn):
            dy = _lrn_backward(dy, lc.inputs, layer, s=lc.aux)
        elif isinstance(layer, Fc):
            x2 = lc.inputs.reshape(lc.inputs.shape[0], -1)
            dw = dy.T @ x2
            db = dy.sum(axis=0)
            dy = (dy @ layer.weights).reshape(lc.inputs.shape)
            grads[i] = (dw, db)
        dinputs[i] = dy
    return loss, grads, dinputs


def flat_grads(net: NetworkParams, grads):
    """Gradient arrays in the same order as param_tensors(net)."""
    out = []
    for layer, g in zip(net.layers, grads):
        if isinstance(layer, (Conv, Fc)):
            out.append(g[0])
            out.append(g[1])
    return out


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(params, grads, velocity, lr, momentum=0.0, weight_decay=0.0):
    """Momentum SGD update, in place on `params`.

    v <- momentum*v - lr*(g + weight_decay*w);  w <- w + v
    `velocity` may be None on the first call; the (possibly new) velocity
    list is returned.
    """
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if len(params) != len(grads):
        raise ShapeError("params/grads length mismatch")
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    for w, g, v in zip(params, grads, velocity):
        if w.shape != g.shape or w.shape != v.shape:
            raise ShapeError(f"shape mismatch in sgd_step: {w.shape} vs {g.shape}")
        v *= momentum
        v -= lr * (g + weight_decay * w)
        w += v
    return velocity


# ---------------------------------------------------------------------------
# gradient checking


def clone_net(net: NetworkParams, dtype) -> NetworkParams:
    """Structural copy with parameter tensors cast to `dtype`."""
    layers = []
    for layer in net.layers:
        if isinstance(layer, Conv):
            layers.append(Conv(layer.weights.astype(dtype), layer.bias.astype(dtype),
                               layer.stride))
        elif isinstance(layer, Fc):
            layers.append(Fc(layer.weights.astype(dtype), layer.bias.astype(dtype)))
        else:
            layers.append(layer)
    return NetworkParams(layers, net.class_count)


def gradient_check(net: NetworkParams, x: Tensor, label, eps=1e-2,
                   max_coords_per_tensor=None, seed=0):
    """Max relative error between backprop and central finite differences.

    The float32 analytic gradients are compared against finite differences
    of a float64 clone (same function, rounding-free quotients); the two
    central quotients at eps and eps/2 are Richardson-combined to suppress
    curvature truncation. Coordinates whose perturbation interval crosses a
    ReLU kink or flips a pooling argmax are skipped: the difference quotient
    is not a gradient estimate there. Kinks are detected by comparing the
    activation pattern (ReLU signs, pool argmax indices) at the unperturbed
    point and at +-eps, +-eps/2 and +-eps/4; the extra eps/4 samples catch
    kinks that sit between the quotient's own evaluation points. The
    relative-error denominator is floored at 1e-3 of the largest gradient
    component: below that scale the float32 analytic value is dominated by
    accumulation rounding, so a purely relative comparison would measure
    rounding noise rather than gradient correctness. With
    `max_coords_per_tensor`, a seeded
    random subset of coordinates is checked per parameter tensor (keeps
    full-size networks fast).
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if x.ndim == 3:
        x = x[None]
    labels = np.atleast_1d(np.asarray(label))
    _, grads, _ = backprop(net, forward(net, x), labels)
    analytic = flat_grads(net, grads)
    net64 = clone_net(net, np.float64)
    x64 = x.astype(np.float64)
    params64 = param_tensors(net64)
    rng = seeds.substream(seed, "gradcheck")

    def evaluate():
        cache = forward(net64, x64)
        loss, _ = softmax_cross_entropy_batch(cache.logits, labels)
        pattern = []
        for layer, lc in zip(net64.layers, cache.layers):
            if isinstance(layer, Relu):
                pattern.append(lc.inputs > 0)
            elif isinstance(layer, MaxPool):
                pattern.append(lc.pool_index)
        return loss, pattern

    def same_pattern(a, b):
        return all(np.array_equal(u, v) for u, v in zip(a, b))

    _, base_pattern = evaluate()
    grad_scale = max((float(np.abs(g).max()) for g in analytic if g.size),
                     default=0.0)
    floor = max(1e-3 * grad_scale, 1e-8)
    worst = 0.0
    for p, g in zip(params64, analytic):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        coords = np.arange(flat_p.size)
        if max_coords_per_tensor is not None and flat_p.size > max_coords_per_tensor:
            coords = rng.choice(flat_p.size, size=max_coords_per_tensor, replace=False)
        for j in coords:
            orig = flat_p[j]
            losses = {}
            patterns = []
            for h in (eps, eps / 2, eps / 4, -eps / 4, -eps / 2, -eps):
                flat_p[j] = orig + h
                losses[h], pat = evaluate()
                patterns.append(pat)
            flat_p[j] = orig
            if not all(same_pattern(base_pattern, pat) for pat in patterns):
                continue
            d1 = (losses[eps] - losses[-eps]) / (2 * eps)
            d2 = (losses[eps / 2] - losses[-eps / 2]) / eps
            numeric = (4 * d2 - d1) / 3
            rel = abs(flat_g[j] - numeric) / max(abs(flat_g[j]), abs(numeric),
                                                 floor)
            worst = max(worst, rel)
    return worst
