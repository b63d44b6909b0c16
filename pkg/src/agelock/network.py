"""Fully-connected networks with per-bit-plane shadow weights.

Scaling conventions
-------------------
The chip works in ADC codes. For a layer with fan-in ``p`` the digital
periphery relates codes to "real" pre-activations through a fixed gain::

    gain = (2**q - 1) * (2**n - 1) * sqrt(p)
    z    = (adc_codes + gain * bias) / gain

so ``bias`` and ``act_scale`` are stored in real units and gradients stay
well-conditioned for every bit width. Hidden activations are re-quantized to
``n`` bits as ``round(clip(relu(z) / act_scale, 0, 1) * (2**n - 1))``; the
output layer's logits are ``logit_scale * z``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .errors import CorruptFileError, DimensionError
from .quantize import BitPlanes, max_code, round_half_up

CKPT_MAGIC = b"AGELOCK-CKPT"
CKPT_VERSION = 1


def binarize(w_fp) -> np.ndarray:
    """+1 where the shadow weight is >= 0, else -1."""
    return np.where(np.asarray(w_fp) >= 0, 1, -1).astype(np.int8)


@dataclass
class Layer:
    w_fp: np.ndarray
    bias: np.ndarray
    activation: str = "relu"
    act_scale: float = 1.0
    planes: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.w_fp = np.asarray(self.w_fp)
        if self.w_fp.ndim != 3:
            raise DimensionError(f"shadow weights must be (q, fan_in, fan_out), got {self.w_fp.shape}")
        self.bias = np.asarray(self.bias)
        if self.bias.shape != (self.fan_out,):
            raise DimensionError(f"bias shape {self.bias.shape} does not match fan_out {self.fan_out}")
        if self.planes is None:
            self.planes = binarize(self.w_fp)

    @property
    def fan_in(self) -> int:
        return self.w_fp.shape[1]

    @property
    def fan_out(self) -> int:
        return self.w_fp.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.fan_in, self.fan_out

    def gain(self, q: int, n: int) -> float:
        return max_code(q) * max_code(n) * math.sqrt(self.fan_in)

    def bias_code(self, q: int, n: int) -> np.ndarray:
        return self.gain(q, n) * self.bias.astype(np.float64)

    def requantize(self, post_codes, q: int, n: int) -> np.ndarray:
        """Integer input codes for the next layer from this layer's activations."""
        u = np.asarray(post_codes, dtype=np.float64) / (self.gain(q, n) * self.act_scale)
        return round_half_up(np.clip(u, 0.0, 1.0) * max_code(n))

    def bitplanes(self) -> BitPlanes:
        return BitPlanes(self.planes)


@dataclass
class Network:
    layers: list
    q: int
    n: int
    logit_scale: float = 1.0
    seed: int = 0
    epoch: int = 0

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.fan_out != b.fan_in:
                raise DimensionError(f"layer widths do not chain: {a.shape} -> {b.shape}")
        for layer in self.layers:
            if layer.w_fp.shape[0] != self.q:
                raise DimensionError(f"layer has {layer.w_fp.shape[0]} shadow planes, network q={self.q}")

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [layer.shape for layer in self.layers]

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].fan_in] + [layer.fan_out for layer in self.layers]

    def binarize_step(self) -> "Network":
        for layer in self.layers:
            layer.planes = binarize(layer.w_fp)
        return self

    def copy(self) -> "Network":
        layers = [Layer(l.w_fp.copy(), l.bias.copy(), l.activation, l.act_scale, l.planes.copy())
                  for l in self.layers]
        return Network(layers, self.q, self.n, self.logit_scale, self.seed, self.epoch)


def binarize_step(net: Network) -> Network:
    return net.binarize_step()


def init_network(widths, q: int = 1, n: int = 8, seed: int = 0, dtype=np.float32) -> Network:
    """Random shadow weights in [-1, 1], zero biases, relu hidden layers."""
    rng = np.random.default_rng([int(seed), 0x1417])
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        w = rng.uniform(-1.0, 1.0, size=(q, fan_in, fan_out)).astype(dtype)
        act = "identity" if k == len(widths) - 2 else "relu"
        layers.append(Layer(w, np.zeros(fan_out, dtype=dtype), act))
    return Network(layers, q, n, 1.0, int(seed))


def save_checkpoint(net: Network, path) -> None:
    header = {
        "version": CKPT_VERSION,
        "widths": net.widths,
        "activations": [l.activation for l in net.layers],
        "q": net.q,
        "n": net.n,
        "act_scales": [float(l.act_scale) for l in net.layers],
        "logit_scale": float(net.logit_scale),
        "seed": int(net.seed),
        "epoch": int(net.epoch),
    }
    arrays = []
    for layer in net.layers:
        arrays += [layer.w_fp, layer.bias]
    fileio.write_container(path, CKPT_MAGIC, header, arrays)


def load_checkpoint(path) -> Network:
    header, payload = fileio.read_container(path, CKPT_MAGIC, CKPT_VERSION)
    try:
        widths = [int(w) for w in header["widths"]]
        q, n = int(header["q"]), int(header["n"])
        acts = list(header["activations"])
        scales = [float(s) for s in header["act_scales"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFileError(f"{path}: incomplete checkpoint header ({exc})") from exc
    if len(acts) != len(widths) - 1 or len(scales) != len(widths) - 1:
        raise DimensionError(f"{path}: header lists disagree with {len(widths) - 1} layers")
    shapes = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        shapes += [(q, fan_in, fan_out), (fan_out,)]
    arrays = fileio.split_payload(path, payload, shapes)
    layers = [Layer(arrays[2 * k], arrays[2 * k + 1], acts[k], scales[k]) for k in range(len(acts))]
    return Network(layers, q, n, float(header.get("logit_scale", 1.0)),
                   int(header.get("seed", 0)), int(header.get("epoch", 0)))
