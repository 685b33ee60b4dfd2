"""CNTC checkpoint container.

Layout: magic "CNTC", u16 version=1, u32 header length, UTF-8 JSON header
(architecture descriptor, iteration counter, rng state, tensor manifest),
then raw little-endian float32 blobs: parameters in declaration order,
followed by optimizer velocity blobs when present. Round trips are
bit-exact, so resumed training reproduces an uninterrupted run.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import FormatError

MAGIC = b"CNTC"
VERSION = 1


@dataclass
class Checkpoint:
    net: nn.NetworkParams
    velocity: list | None
    iteration: int
    rng_state: dict


def _layer_desc(layer):
    if isinstance(layer, nn.Conv):
        oc, ic, kh, kw = layer.weights.shape
        return {"type": "conv", "out_c": oc, "in_c": ic, "kh": kh, "kw": kw,
                "stride": layer.stride}
    if isinstance(layer, nn.Relu):
        return {"type": "relu"}
    if isinstance(layer, nn.MaxPool):
        return {"type": "maxpool", "window": layer.window, "stride": layer.stride}
    if isinstance(layer, nn.Lrn):
        return {"type": "lrn", "local_size": layer.local_size, "alpha": layer.alpha,
                "beta": layer.beta, "k": layer.k}
    if isinstance(layer, nn.Fc):
        ou, iu = layer.weights.shape
        return {"type": "fc", "out_units": ou, "in_units": iu}
    raise FormatError(f"cannot serialize layer {type(layer).__name__}")


def _layer_from_desc(d):
    t = d["type"]
    if t == "conv":
        w = np.zeros((d["out_c"], d["in_c"], d["kh"], d["kw"]), dtype=np.float32)
        return nn.Conv(w, np.zeros(d["out_c"], dtype=np.float32), d["stride"])
    if t == "relu":
        return nn.Relu()
    if t == "maxpool":
        return nn.MaxPool(d["window"], d["stride"])
    if t == "lrn":
        return nn.Lrn(d["local_size"], d["alpha"], d["beta"], d["k"])
    if t == "fc":
        w = np.zeros((d["out_units"], d["in_units"]), dtype=np.float32)
        return nn.Fc(w, np.zeros(d["out_units"], dtype=np.float32))
    raise FormatError(f"unknown layer type {t!r} in checkpoint")


def save_checkpoint(ckpt: Checkpoint, path):
    params = nn.param_tensors(ckpt.net)
    header = {
        "layers": [_layer_desc(layer) for layer in ckpt.net.layers],
        "class_count": ckpt.net.class_count,
        "iteration": ckpt.iteration,
        "rng_state": ckpt.rng_state,
        "tensor_shapes": [list(p.shape) for p in params],
        "has_velocity": ckpt.velocity is not None,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(blob)))
        f.write(blob)
        for p in params:
            f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
        if ckpt.velocity is not None:
            for v in ckpt.velocity:
                f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic in {path}")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != VERSION:
        raise FormatError(
            f"checkpoint version {version} needs migration (supported: {VERSION})")
    try:
        header = json.loads(raw[10:10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header in {path}: {exc}") from None
    layers = [_layer_from_desc(d) for d in header["layers"]]
    net = nn.NetworkParams(layers, header["class_count"])
    params = nn.param_tensors(net)
    off = 10 + hlen
    for p, shape in zip(params, header["tensor_shapes"]):
        if list(p.shape) != shape:
            raise FormatError("tensor manifest does not match architecture")
        n = int(np.prod(shape))
        if len(raw) - off < 4 * n:
            raise FormatError(f"truncated checkpoint payload in {path}")
        chunk = np.frombuffer(raw, dtype="<f4", count=n, offset=off)
        p[...] = chunk.reshape(shape)
        off += 4 * n
    velocity = None
    if header["has_velocity"]:
        velocity = []
        for p in params:
            n = p.size
            if len(raw) - off < 4 * n:
                raise FormatError(f"truncated velocity payload in {path}")
            chunk = np.frombuffer(raw, dtype="<f4", count=n, offset=off)
            velocity.append(chunk.reshape(p.shape).copy())
            off += 4 * n
    if off != len(raw):
        raise FormatError(f"trailing bytes in checkpoint {path}")
    return Checkpoint(net, velocity, header["iteration"], header["rng_state"])
