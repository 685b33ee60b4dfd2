"""Architecture presets, the training loop, and counting metrics.

Both preset networks follow the conv -> relu -> pool -> lrn block order.
The counting head is multi-class over {0..max_count}: 6 classes for digits
and 26 for pedestrians (25 alone cannot represent both a zero and a
25-pedestrian scene). MAE/MSE treat the argmax class as an integer count.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import nn, seeds
from .errors import DataError, DivergenceError, ShapeError
from .shards import ShardData


@dataclass
class ArchSpec:
    preset: str | None = None        # "digits" | "pedestrians"
    layers: list | None = None       # explicit layer list overrides preset
    input_shape: tuple = (1, 100, 100)
    class_count: int = 6


def digits_arch() -> ArchSpec:
    return ArchSpec(preset="digits", input_shape=(1, 100, 100), class_count=6)


def pedestrians_arch(scene_h=158, scene_w=238) -> ArchSpec:
    return ArchSpec(preset="pedestrians", input_shape=(1, scene_h, scene_w),
                    class_count=26)


def _conv(rng, out_c, in_c, k):
    std = np.sqrt(2.0 / (in_c * k * k))
    w = rng.normal(0.0, std, size=(out_c, in_c, k, k)).astype(np.float32)
    return nn.Conv(w, np.zeros(out_c, dtype=np.float32))


def _fc(rng, out_u, in_u):
    std = np.sqrt(2.0 / in_u)
    w = rng.normal(0.0, std, size=(out_u, in_u)).astype(np.float32)
    return nn.Fc(w, np.zeros(out_u, dtype=np.float32))


def _conv_block(rng, out_c, in_c, k, pool_window, pool_stride, lrn_cfg):
    layers = [_conv(rng, out_c, in_c, k), nn.Relu(),
              nn.MaxPool(pool_window, pool_stride)]
    if lrn_cfg is not None:
        layers.append(nn.Lrn(**lrn_cfg))
    return layers


def spatial_size(size, layers):
    """Spatial output side length after a prefix of layers (square input)."""
    for layer in layers:
        if isinstance(layer, nn.Conv):
            size = size - layer.weights.shape[2] + 1
        elif isinstance(layer, nn.MaxPool):
            size = (size - layer.window) // layer.stride + 1
    return size


def build_net(spec: ArchSpec, seed=0, use_lrn=True) -> nn.NetworkParams:
    """Instantiate a preset (or explicit) architecture with seeded He init."""
    rng = seeds.substream(seed, seeds.INIT)
    lrn_cfg = {} if use_lrn else None
    if spec.layers is not None:
        return nn.NetworkParams(spec.layers, spec.class_count)
    c, h, w = spec.input_shape
    if spec.preset == "digits":
        layers = _conv_block(rng, 10, c, 15, 2, 2, lrn_cfg)
        layers += _conv_block(rng, 10, 10, 3, 2, 2, lrn_cfg)
        oh = spatial_size(h, layers)
        ow = spatial_size(w, layers)
        layers += [_fc(rng, 32, 10 * oh * ow), nn.Relu(), _fc(rng, spec.class_count, 32)]
    elif spec.preset == "pedestrians":
        layers = _conv_block(rng, 8, c, 9, 2, 2, lrn_cfg)
        layers += _conv_block(rng, 8, 8, 5, 1, 1, lrn_cfg)  # "x1 pool" pass-through
        oh = spatial_size(h, layers)
        ow = spatial_size(w, layers)
        layers += [_fc(rng, 128, 8 * oh * ow), nn.Relu(),
                   _fc(rng, 128, 128), nn.Relu(), _fc(rng, spec.class_count, 128)]
    else:
        raise ShapeError(f"unknown preset {spec.preset!r}")
    net = nn.NetworkParams(layers, spec.class_count)
    # fail fast if the shape chain is broken
    probe = np.zeros((1, *spec.input_shape), dtype=np.float32)
    nn.forward(net, probe)
    return net


def tap_indices(net: nn.NetworkParams) -> dict:
    """Named activation taps: poolN at each pooling layer, fcN after the
    ReLU following each non-final fully connected layer."""
    taps = {}
    n_pool = n_fc = 0
    for i, layer in enumerate(net.layers):
        if isinstance(layer, nn.MaxPool):
            n_pool += 1
            taps[f"pool{n_pool}"] = i
        elif isinstance(layer, nn.Fc) and i + 1 < len(net.layers):
            n_fc += 1
            idx = i + 1 if isinstance(net.layers[i + 1], nn.Relu) else i
            taps[f"fc{n_fc}"] = idx
    return taps


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    iterations: int = 20000
    batch_size: int = 32
    lr: float = 1e-2
    lr_halving_steps: int = 3        # halve the lr this many times, evenly spaced
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    eval_interval: int = 500
    eval_subset: int = 1000          # held-out samples scored at each eval point

    def lr_at(self, iteration):
        span = max(1, self.iterations // (self.lr_halving_steps or 1))
        if self.lr_halving_steps == 0:
            return self.lr
        return self.lr * (0.5 ** min(self.lr_halving_steps, iteration // span))


@dataclass
class TrainState:
    velocity: list | None = None
    iteration: int = 0
    history: list = field(default_factory=list)  # (iteration, loss, eval_accuracy)


def _batch_indices(seed, iteration, n, batch_size):
    # counter-based draw: resuming at iteration i needs no carried rng state
    rng = seeds.substream(seed, seeds.SHUFFLE, iteration)
    return rng.choice(n, size=min(batch_size, n), replace=False)


def train(net: nn.NetworkParams, train_set: ShardData, cfg: TrainConfig,
          eval_set: ShardData | None = None, state: TrainState | None = None,
          log=None, stop_iteration=None):
    """Run minibatch SGD; returns the TrainState with history appended.

    Deterministic for a fixed (net init, dataset, config): batch selection is
    a pure function of (seed, iteration), so checkpoint resume reproduces an
    uninterrupted run exactly. `stop_iteration` pauses early without touching
    the schedule, which stays anchored to cfg.iterations.
    """
    if train_set.labels.max() >= net.class_count:
        raise DataError("training label out of range for the network head")
    state = state or TrainState()
    n = len(train_set)
    eval_idx = None
    if eval_set is not None:
        m = min(cfg.eval_subset, len(eval_set))
        eval_idx = np.arange(m)
    stop = cfg.iterations if stop_iteration is None else min(stop_iteration,
                                                             cfg.iterations)
    while state.iteration < stop:
        it = state.iteration
        idx = _batch_indices(cfg.seed, it, n, cfg.batch_size)
        x = train_set.images_f32(idx)
        y = train_set.labels[idx].astype(np.int64)
        cache = nn.forward(net, x)
        loss, grads, _ = nn.backprop(net, cache, y)
        if not np.isfinite(loss):
            raise DivergenceError(it)
        state.velocity = nn.sgd_step(
            nn.param_tensors(net), nn.flat_grads(net, grads), state.velocity,
            cfg.lr_at(it), cfg.momentum, cfg.weight_decay)
        state.iteration = it + 1
        if it % cfg.eval_interval == 0 or state.iteration == cfg.iterations:
            acc = float("nan")
            if eval_set is not None:
                m = evaluate(net, eval_set, indices=eval_idx, spread=False)
                acc = m.accuracy
            state.history.append((it, loss, acc))
            if log:
                log(f"iter {it:>6d}  loss {loss:.4f}  eval_acc {acc:.4f}")
    return state


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Metrics:
    accuracy: float
    mae: float
    mse: float
    confusion: np.ndarray            # (class_count, class_count), rows = truth
    spread: list = field(default_factory=list)  # (true, predicted) per sample


def predict_counts(net, images_f32, batch_size=64):
    preds = []
    for start in range(0, len(images_f32), batch_size):
        cache = nn.forward(net, images_f32[start:start + batch_size])
        preds.append(cache.logits.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(net: nn.NetworkParams, dataset: ShardData, indices=None,
             batch_size=64, spread=True) -> Metrics:
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    if indices is None:
        indices = np.arange(len(dataset))
    truth = dataset.labels[indices].astype(np.int64)
    preds = predict_counts(net, dataset.images_f32(indices), batch_size)
    return metrics_from_predictions(truth, preds, net.class_count, spread)


def metrics_from_predictions(truth, preds, class_count, spread=True) -> Metrics:
    truth = np.asarray(truth, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    err = preds - truth
    confusion = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(confusion, (truth, preds), 1)
    return Metrics(
        accuracy=float((err == 0).mean()),
        mae=float(np.abs(err).mean()),
        mse=float((err.astype(np.float64) ** 2).mean()),
        confusion=confusion,
        spread=list(zip(truth.tolist(), preds.tolist())) if spread else [],
    )


def export_spread(metrics: Metrics, path):
    """Two-column (true, predicted) CSV with header, one row per sample."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["true", "predicted"])
        writer.writerows(metrics.spread)


def export_history(state: TrainState, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "loss", "eval_accuracy"])
        for it, loss, acc in state.history:
            writer.writerow([it, f"{loss:.6f}", f"{acc:.6f}"])


def spread_error_stddevs(spread_rows):
    """Per-true-count standard deviation of (pred - true), count-sorted."""
    by_count = {}
    for t, p in spread_rows:
        by_count.setdefault(int(t), []).append(int(p) - int(t))
    return [(c, float(np.std(v))) for c, v in sorted(by_count.items())]
