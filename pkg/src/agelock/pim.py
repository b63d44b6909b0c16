"""Behavioral model of an SRAM process-in-memory accelerator.

Two forward models share the same arithmetic:

* **bit-exact** - weights are tiled onto ``array_rows``-row arrays; every
  (input bit, weight bit, tile) column sum is digitized by the ADC on its own,
  with floor and saturation, then shift-added digitally.
* **functional** - the lumped form used for training: the whole degree-scaled
  weight matrix multiplies the multi-bit activations and a single floor is
  applied per output.

With ``v_cell == v_inter`` one unaged +1 cell driven by a 1 bit moves the ADC
by exactly one code, so an unaged chip is an exact integer engine.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .quantize import BitPlanes, InputPlanes, input_planes_from_values, quantize_input_values

# absorbs binary representation error (0.15 / 0.01 == 14.999999999999998)
_SNAP = 1e-9


@dataclass(frozen=True)
class PimConfig:
    array_rows: int = 64
    array_cols: int = 64
    adc_bits: int = 7
    v_inter: float = 0.01
    v_cell: float = 0.01
    adc_min: int = -64
    adc_max: int = 64
    q: int = 1
    n: int = 8

    def __post_init__(self):
        if not self.v_inter > 0 or not self.v_cell > 0:
            raise ValueError("v_inter and v_cell must be positive")
        if self.array_rows < 1 or self.array_cols < 1:
            raise ValueError("array dimensions must be positive")
        if self.adc_min > self.adc_max:
            raise ValueError("adc_min must not exceed adc_max")
        if self.adc_max - self.adc_min + 1 > 2 ** self.adc_bits + 1:
            raise ValueError(
                f"ADC range [{self.adc_min}, {self.adc_max}] needs more than {self.adc_bits} bits")
        if self.q < 1 or self.n < 1:
            raise ValueError("bit widths must be >= 1")

    @property
    def unit_ratio(self) -> float:
        """ADC codes produced per unit cell product."""
        return self.v_cell / self.v_inter

    def tiles(self, rows: int) -> int:
        return -(-rows // self.array_rows)


@dataclass
class LayerOutput:
    pre: np.ndarray
    post: np.ndarray
    saturated: int = 0


def floor_codes(ratio_units):
    x = np.asarray(ratio_units, dtype=np.float64)
    return np.floor(x + _SNAP * np.maximum(1.0, np.abs(x)))


def adc(v, cfg: PimConfig):
    """Digitize a read-voltage difference: ``clamp(floor(v / v_inter))``."""
    codes = np.clip(floor_codes(np.asarray(v, dtype=np.float64) / cfg.v_inter), cfg.adc_min, cfg.adc_max)
    codes = codes.astype(np.int64)
    return int(codes) if codes.ndim == 0 else codes


def column_dot(x, w, d, cfg: PimConfig) -> float:
    """Read-voltage difference of one column: ``sum_p x_p * w_p * d_p * v_cell``."""
    x, w, d = (np.asarray(a, dtype=np.float64).ravel() for a in (x, w, d))
    if not (len(x) == len(w) == len(d)):
        raise DimensionError(f"column length mismatch: {len(x)}, {len(w)}, {len(d)}")
    if len(x) > cfg.array_rows:
        raise DimensionError(f"column of {len(x)} cells exceeds array height {cfg.array_rows}")
    return float(np.sum(x * w * d) * cfg.v_cell)


def _activate(z, activation: str):
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "identity":
        return z
    raise ValueError(f"unknown activation {activation!r}")


def _plane_array(planes) -> np.ndarray:
    arr = planes.planes if isinstance(planes, BitPlanes) else np.asarray(planes)
    if arr.ndim == 2:
        arr = arr[np.newaxis]
    if arr.ndim != 3:
        raise DimensionError(f"weight planes must be (q, rows, cols), got {arr.shape}")
    return arr


def _degree_array(degrees, planes: np.ndarray) -> np.ndarray:
    if degrees is None:
        return np.ones(planes.shape, dtype=np.float32)
    d = np.asarray(degrees)
    if d.ndim == 2:
        d = d[np.newaxis]
    if d.shape != planes.shape:
        raise DimensionError(f"mask shape {d.shape} does not match weight planes {planes.shape}")
    return d


def effective_weights(planes, degrees=None) -> np.ndarray:
    """``sum_i 2**i * D[i] * W[i]``: the degree-scaled multi-bit weight matrix."""
    w = _plane_array(planes)
    d = _degree_array(degrees, w)
    out = np.zeros(w.shape[1:], dtype=np.float64)
    for i in range(w.shape[0]):
        out += float(1 << i) * (d[i].astype(np.float64) * w[i])
    return out


def _check_bias(bias_code, cols: int) -> np.ndarray:
    if bias_code is None:
        return np.zeros(cols)
    b = np.asarray(bias_code, dtype=np.float64)
    if b.shape not in ((cols,), ()):
        raise DimensionError(f"bias shape {b.shape} does not match {cols} outputs")
    return b


def layer_forward_bitexact(inputs, planes, degrees, bias_code, cfg: PimConfig,
                           activation: str = "relu", chunk: int = 128) -> LayerOutput:
    """Tiled, per-bit-plane digitized forward pass of one fully-connected layer.

    ``inputs`` is an :class:`InputPlanes` with planes shaped ``(n, batch, rows)``
    or ``(n, rows)``; integer activation codes are also accepted.
    """
    if not isinstance(inputs, InputPlanes):
        inputs = input_planes_from_values(inputs, cfg.n)
    x = inputs.planes
    single = x.ndim == 2
    if single:
        x = x[:, np.newaxis, :]
    w = _plane_array(planes)
    d = _degree_array(degrees, w)
    q, rows, cols = w.shape
    n, batch, xrows = x.shape
    if xrows != rows:
        raise DimensionError(f"input has {xrows} rows, weights have {rows}")
    bias = _check_bias(bias_code, cols)

    R = cfg.array_rows
    tiles = cfg.tiles(rows)
    pad = tiles * R - rows
    cells = np.zeros((q, tiles * R, cols))
    for i in range(q):
        cells[i, :rows] = d[i].astype(np.float64) * w[i]
    cells = cells.reshape(q, tiles, R, cols)
    in_weights = (1 << np.arange(n, dtype=np.int64)).reshape(n, 1, 1)
    ratio = cfg.unit_ratio

    out = np.zeros((batch, cols), dtype=np.int64)
    saturated = 0
    for start in range(0, batch, chunk):
        xb = x[:, start:start + chunk, :].astype(np.float64)
        b = xb.shape[1]
        if pad:
            xb = np.concatenate([xb, np.zeros((n, b, pad))], axis=2)
        # (tiles, n*b, R): one word-line drive pattern per (input bit, sample)
        xt = xb.reshape(n * b, tiles, R).transpose(1, 0, 2)
        acc = np.zeros((b, cols), dtype=np.int64)
        for i in range(q):
            raw = floor_codes(np.matmul(xt, cells[i]) * ratio)
            saturated += int(np.count_nonzero((raw < cfg.adc_min) | (raw > cfg.adc_max)))
            codes = np.clip(raw, cfg.adc_min, cfg.adc_max).astype(np.int64)
            per_bit = codes.sum(axis=0).reshape(n, b, cols)
            acc += (1 << i) * np.sum(in_weights * per_bit, axis=0)
        out[start:start + b] = acc
    post = _activate(out + bias, activation)
    if single:
        out, post = out[0], post[0]
    return LayerOutput(out, post, saturated)


def layer_forward_functional(x, planes, degrees, bias_code, cfg: PimConfig,
                             activation: str = "relu", floor: bool = True) -> LayerOutput:
    """Lumped forward pass: ``h(floor(W_eff @ x * v_cell / v_inter) + bias)``.

    ``floor=False`` drops the ADC floor (smooth ablation path).
    """
    x = np.asarray(x, dtype=np.float64)
    w_eff = effective_weights(planes, degrees)
    if x.shape[-1] != w_eff.shape[0]:
        raise DimensionError(f"input has {x.shape[-1]} features, weights have {w_eff.shape[0]} rows")
    bias = _check_bias(bias_code, w_eff.shape[1])
    units = (x @ w_eff) * cfg.unit_ratio
    pre = floor_codes(units) if floor else units
    return LayerOutput(pre, _activate(pre + bias, activation))


def network_forward(net, mask=None, cfg: PimConfig | None = None, mode: str = "functional",
                    pixels=None, threads: int = 1, chunk: int = 1000) -> np.ndarray:
    """Class scores of ``net`` on a chip aged by ``mask`` (``None``: unaged chip).

    ``pixels`` are inputs in [0, 1], shape ``(batch, features)``. Scores are the
    raw digital outputs of the last layer (ADC codes plus bias code).
    """
    if cfg is None:
        cfg = PimConfig(q=net.q, n=net.n)
    if cfg.q != net.q or cfg.n != net.n:
        raise DimensionError(f"config bit widths q={cfg.q}, n={cfg.n} do not match network q={net.q}, n={net.n}")
    if mask is not None and mask.shapes != net.shapes:
        raise DimensionError(f"mask layer shapes {mask.shapes} do not match network {net.shapes}")
    if mode not in ("functional", "bitexact"):
        raise ValueError(f"unknown simulator mode {mode!r}")
    pixels = np.asarray(pixels, dtype=np.float64)
    single = pixels.ndim == 1
    if single:
        pixels = pixels[np.newaxis]

    def run(block):
        x, _ = quantize_input_values(block, net.n)
        for li, layer in enumerate(net.layers):
            degrees = None if mask is None else mask.layer(li)
            if mode == "bitexact":
                res = layer_forward_bitexact(x, layer.planes, degrees, layer.bias_code(net.q, net.n), cfg, layer.activation)
            else:
                res = layer_forward_functional(x, layer.planes, degrees, layer.bias_code(net.q, net.n), cfg, layer.activation)
            if li < len(net.layers) - 1:
                x = layer.requantize(res.post, net.q, net.n)
            else:
                return res.post

    blocks = [pixels[s:s + chunk] for s in range(0, len(pixels), chunk)]
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            outs = list(pool.map(run, blocks))
    else:
        outs = [run(b) for b in blocks]
    scores = np.concatenate(outs, axis=0) if outs else np.zeros((0, net.layers[-1].fan_out))
    return scores[0] if single else scores
