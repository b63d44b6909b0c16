"""Differential orientation fine-tuning and the training machinery around it.

Training runs the functional simulator twice per minibatch: once on the
authorized (aged) chip, once on an unaged chip. The loss rewards authorized
accuracy and penalizes unauthorized accuracy::

    loss = CE(authorized) - lam * min(CE(unauthorized), adv_cap)

Gradients are hand-derived. Non-differentiable steps use straight-through
estimators: the ADC floor and the activation rounding pass gradients
unchanged, and ``d o / d w_fp`` is taken as ``d o / d w`` for the sign
binarization of each shadow plane.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .aging import AgingMask
from .data import NUM_CLASSES, Dataset
from .errors import DimensionError, DivergenceError, MissingCacheError
from .network import Layer, Network, init_network
from .pim import PimConfig, effective_weights, floor_codes, network_forward
from .quantize import max_code, quantize_input_values, quantize_weights, round_half_up

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lam: float = 0.05
    eta: float = 0.001
    epochs: int = 20
    batch_size: int = 128
    loss: str = "ce"
    adv_cap_factor: float = 2.0
    adv_cap_mode: str = "sample"
    patience: int = 3
    min_rel_improvement: float = 1e-4
    momentum: float = 0.0
    optimizer: str = "adam"
    shadow_clip: float | None = 1.0
    lr_schedule: str = "constant"
    # None: learned while pretraining, held fixed during DOFT
    learn_logit_scale: bool | None = None
    match_logit_scale: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not self.adv_cap_factor > 0:
            raise ValueError("adversarial cap must be positive")
        if self.adv_cap_mode not in ("sample", "batch"):
            raise ValueError(f"unknown adversarial cap mode {self.adv_cap_mode!r}")
        if self.loss not in ("ce", "mse"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown learning-rate schedule {self.lr_schedule!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size must be >= 1 and epochs >= 0")

    def learns_logit_scale(self, doft: bool) -> bool:
        return (not doft) if self.learn_logit_scale is None else self.learn_logit_scale

    def adv_cap(self, classes: int = NUM_CLASSES) -> float:
        return self.adv_cap_factor * math.log(classes)

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "cosine" and self.epochs > 1:
            return self.eta * 0.5 * (1.0 + math.cos(math.pi * epoch / self.epochs))
        return self.eta


# ----------------------------------------------------------------------------
# losses


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _per_sample_loss(logits, labels, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses and their (unaveraged) logit gradients."""
    logits = np.asarray(logits, dtype=np.float64)
    batch = len(labels)
    if batch == 0:
        raise ValueError("empty batch")
    if logits.shape[0] != batch:
        raise DimensionError(f"{logits.shape[0]} score rows for {batch} labels")
    p = _softmax(logits)
    onehot = np.zeros_like(p)
    onehot[np.arange(batch), labels] = 1.0
    if kind == "ce":
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        return logz - shifted[np.arange(batch), labels], p - onehot
    if kind == "mse":
        diff = p - onehot
        return 0.5 * np.sum(diff ** 2, axis=1), p * (diff - np.sum(diff * p, axis=1, keepdims=True))
    raise ValueError(f"unknown loss {kind!r}")


def task_loss(logits, labels, kind: str = "ce") -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient with respect to the logits."""
    losses, grad = _per_sample_loss(logits, labels, kind)
    return float(np.mean(losses)), grad / len(losses)


def doft_loss(scores_auth, scores_unauth, labels, cfg: TrainConfig):
    """DOFT objective on one batch of logits.

    The unauthorized loss is capped either per sample (``adv_cap_mode="sample"``,
    the mean of ``min(loss_i, cap)``) or on the batch mean (``"batch"``).
    Returns ``(loss, terms)``; ``terms`` holds both branch losses, whether the
    adversarial term hit its cap, and the logit gradients of each branch.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty batch")
    if np.shape(scores_auth) != np.shape(scores_unauth):
        raise DimensionError("authorized and unauthorized scores differ in shape")
    l_auth, g_auth = task_loss(scores_auth, labels, cfg.loss)
    per_u, g_u = _per_sample_loss(scores_unauth, labels, cfg.loss)
    batch = len(labels)
    l_unauth = float(np.mean(per_u))
    cap = cfg.adv_cap(np.shape(scores_auth)[1])
    if cfg.adv_cap_mode == "batch":
        capped = l_unauth >= cap
        adv = cap if capped else l_unauth
        g_unauth = np.zeros_like(g_u) if capped else -cfg.lam * g_u / batch
    else:
        live = per_u < cap
        capped = not live.any()
        adv = float(np.mean(np.minimum(per_u, cap)))
        g_unauth = -cfg.lam * g_u * live[:, None] / batch
    loss = l_auth - cfg.lam * adv
    terms = {"auth": l_auth, "unauth": l_unauth, "adv": adv, "capped": capped,
             "grad_auth": g_auth, "grad_unauth": g_unauth}
    return loss, terms


# ----------------------------------------------------------------------------
# forward / backward on the functional simulator


@dataclass
class ForwardCache:
    layers: list = field(default_factory=list)
    logits: np.ndarray | None = None
    smooth: bool = False


def _weight_planes(layer: Layer, smooth: bool):
    return layer.w_fp.astype(np.float64) if smooth else layer.planes


def forward(net: Network, pixels, mask: AgingMask | None, cfg: PimConfig,
            smooth: bool = False, planes=None) -> ForwardCache:
    """Functional forward pass keeping what :func:`backward` needs.

    ``smooth=True`` is the ablation path: shadow weights used as-is, no ADC
    floor, no input or activation rounding.
    """
    x = np.asarray(pixels, dtype=np.float64)
    if smooth:
        x = np.clip(x, 0.0, 1.0) * max_code(net.n)
    else:
        x = quantize_input_values(x, net.n)[0].astype(np.float64)
    cache = ForwardCache(smooth=smooth)
    ratio = cfg.unit_ratio
    last = len(net.layers) - 1
    for li, layer in enumerate(net.layers):
        degrees = None if mask is None else mask.layer(li)
        w = _weight_planes(layer, smooth) if planes is None else planes[li]
        w_eff = effective_weights(w, degrees)
        units = (x @ w_eff) * ratio
        codes = units if smooth else floor_codes(units)
        gain = layer.gain(net.q, net.n)
        z = codes / gain + layer.bias
        entry = {"x": x, "w_eff": w_eff, "degrees": degrees, "z": z, "gain": gain}
        if li < last:
            a = np.maximum(z, 0.0)
            u = a / layer.act_scale
            xr = np.clip(u, 0.0, 1.0) * max_code(net.n)
            x = xr if smooth else round_half_up(xr)
            entry["u"] = u
        else:
            cache.logits = net.logit_scale * z
        cache.layers.append(entry)
    return cache


def backward(net: Network, cache: ForwardCache, dlogits, cfg: PimConfig) -> dict:
    """Gradients of a scalar loss given ``dloss/dlogits`` for one branch.

    Returns ``{"w_eff": [...], "bias": [...], "logit_scale": float}``; the
    effective-weight gradients expand to per-plane shadow gradients through
    :func:`plane_grads`.
    """
    if cache is None or cache.logits is None or len(cache.layers) != len(net.layers):
        raise MissingCacheError("backward needs the cache of a completed forward pass")
    ratio = cfg.unit_ratio
    dlogits = np.asarray(dlogits, dtype=np.float64)
    top = cache.layers[-1]
    d_scale = float(np.sum(dlogits * top["z"]))
    dz = net.logit_scale * dlogits
    g_w = [None] * len(net.layers)
    g_b = [None] * len(net.layers)
    for li in range(len(net.layers) - 1, -1, -1):
        entry = cache.layers[li]
        if li < len(net.layers) - 1:
            layer = net.layers[li]
            du = dx * max_code(net.n) * (entry["u"] < 1.0)
            dz = (du / layer.act_scale) * (entry["z"] > 0)
        g_b[li] = dz.sum(axis=0)
        d_codes = dz / entry["gain"]
        g_w[li] = ratio * (entry["x"].T @ d_codes)
        if li > 0:
            dx = ratio * (d_codes @ entry["w_eff"].T)
    return {"w_eff": g_w, "bias": g_b, "logit_scale": d_scale}


def plane_grads(g_w_eff, degrees, q: int) -> np.ndarray:
    """Shadow-plane gradients ``2**i * D[i] * dL/dW_eff`` (STE through sign)."""
    g = np.asarray(g_w_eff, dtype=np.float64)
    out = np.empty((q,) + g.shape)
    for i in range(q):
        out[i] = float(1 << i) * (g if degrees is None else degrees[i] * g)
    return out


def doft_gradients(net: Network, pixels, labels, mask: AgingMask | None, cfg: PimConfig,
                   train: TrainConfig, smooth: bool = False):
    """Loss, terms and combined gradients of the DOFT objective on one batch."""
    auth = forward(net, pixels, mask, cfg, smooth)
    unauth = forward(net, pixels, None, cfg, smooth)
    loss, terms = doft_loss(auth.logits, unauth.logits, labels, train)
    ga = backward(net, auth, terms["grad_auth"], cfg)
    gu = backward(net, unauth, terms["grad_unauth"], cfg)
    grads = {"w": [], "bias": [], "logit_scale": ga["logit_scale"] + gu["logit_scale"]}
    for li in range(len(net.layers)):
        degrees = None if mask is None else mask.layer(li)
        grads["w"].append(plane_grads(ga["w_eff"][li], degrees, net.q) + plane_grads(gu["w_eff"][li], None, net.q))
        grads["bias"].append(ga["bias"][li] + gu["bias"][li])
    terms["auth_logits"], terms["unauth_logits"] = auth.logits, unauth.logits
    return loss, terms, grads


# ----------------------------------------------------------------------------
# evaluation


def predict(net: Network, dataset: Dataset, mask: AgingMask | None = None, cfg: PimConfig | None = None,
            mode: str = "functional", threads: int = 1) -> np.ndarray:
    scores = network_forward(net, mask, cfg, mode, dataset.pixels, threads=threads)
    return np.argmax(scores, axis=1)


def evaluate(net: Network, dataset: Dataset, mask: AgingMask | None = None, cfg: PimConfig | None = None,
             mode: str = "functional", threads: int = 1) -> float:
    """Top-1 accuracy on a chip aged by ``mask`` (``None``: unauthorized chip)."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty split")
    return float(np.mean(predict(net, dataset, mask, cfg, mode, threads) == dataset.labels))


# ----------------------------------------------------------------------------
# training loops


class _Sgd:
    """Plain SGD with optional heavy-ball momentum."""

    def __init__(self, momentum: float):
        self.momentum = momentum
        self.state = {}

    def step(self, key, param, grad, lr):
        if self.momentum:
            v = self.state.get(key)
            v = grad if v is None else self.momentum * v + grad
            self.state[key] = v
            grad = v
        param -= (lr * grad).astype(param.dtype)


class _Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = {}

    def step(self, key, param, grad, lr):
        m, v, t = self.state.get(key, (0.0, 0.0, 0))
        t += 1
        m = self.beta1 * m + (1 - self.beta1) * grad
        v = self.beta2 * v + (1 - self.beta2) * grad * grad
        self.state[key] = (m, v, t)
        m_hat = m / (1 - self.beta1 ** t)
        v_hat = v / (1 - self.beta2 ** t)
        param -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(param.dtype)


def _optimizer(cfg: "TrainConfig"):
    return _Adam() if cfg.optimizer == "adam" else _Sgd(cfg.momentum)


def _batches(count: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(count)
    for s in range(0, count, batch_size):
        yield perm[s:s + batch_size]


def _check_finite(loss: float, epoch: int, step: int) -> None:
    if not math.isfinite(loss):
        raise DivergenceError(f"loss became {loss} at epoch {epoch}, step {step}")


def _val_doft_loss(net, val: Dataset, mask, cfg, train: TrainConfig):
    a = forward(net, val.pixels, mask, cfg)
    u = forward(net, val.pixels, None, cfg)
    loss, terms = doft_loss(a.logits, u.logits, val.labels, train)
    acc_a = float(np.mean(np.argmax(a.logits, axis=1) == val.labels))
    acc_u = float(np.mean(np.argmax(u.logits, axis=1) == val.labels))
    return loss, terms, acc_a, acc_u


class _Plateau:
    def __init__(self, patience: int, min_rel: float):
        self.patience, self.min_rel = patience, min_rel
        self.best, self.wait = math.inf, 0

    def update(self, value: float) -> bool:
        """Record ``value``; True when training should stop."""
        if self.best == math.inf or self.best - value > self.min_rel * abs(self.best):
            self.best, self.wait = value, 0
        else:
            self.wait += 1
        return self.patience > 0 and self.wait >= self.patience


def train_doft(net: Network, dataset: Dataset, mask: AgingMask, cfg: TrainConfig,
               pim: PimConfig | None = None, val: Dataset | None = None):
    """Fine-tune ``net`` so it works on the chip aged by ``mask`` and fails elsewhere.

    Shadow planes start at the current +/-1 bits. Returns ``(network, history)``
    where history has one dict per finished epoch.
    """
    if mask.shapes != net.shapes or mask.q != net.q:
        raise DimensionError(f"mask {mask.shapes} (q={mask.q}) does not fit network {net.shapes} (q={net.q})")
    pim = pim or PimConfig(q=net.q, n=net.n)
    net = net.copy()
    for layer in net.layers:
        layer.w_fp = layer.planes.astype(np.float32)
    val = val if val is not None else dataset
    if cfg.match_logit_scale:
        _match_logit_scale(net, dataset.images[:1000] / 255.0, mask, pim)
    rng = np.random.default_rng([int(cfg.seed), 0xD0F7])
    opt = _optimizer(cfg)
    plateau = _Plateau(cfg.patience, cfg.min_rel_improvement)
    history = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        for step, idx in enumerate(_batches(len(dataset), cfg.batch_size, rng)):
            loss, terms, grads = doft_gradients(net, dataset.images[idx] / 255.0, dataset.labels[idx],
                                                mask, pim, cfg)
            _check_finite(loss, epoch, step)
            _apply(net, grads, opt, lr, cfg, cfg.learns_logit_scale(doft=True))
        vloss, vterms, acc_a, acc_u = _val_doft_loss(net, val, mask, pim, cfg)
        _check_finite(vloss, epoch, -1)
        net.epoch += 1
        history.append({"epoch": epoch + 1, "loss": vloss, "ce_auth": vterms["auth"],
                        "ce_unauth": vterms["unauth"], "acc_auth": acc_a, "acc_unauth": acc_u,
                        "seconds": time.perf_counter() - t0})
        log.info("doft epoch %d: loss %.4f auth %.4f unauth %.4f", epoch + 1, vloss, acc_a, acc_u)
        if plateau.update(vloss):
            break
    return net, history


def _apply(net: Network, grads: dict, opt: _Sgd, lr: float, cfg: TrainConfig, learn_scale: bool) -> None:
    for li, layer in enumerate(net.layers):
        opt.step(("w", li), layer.w_fp, grads["w"][li], lr)
        if cfg.shadow_clip is not None:
            np.clip(layer.w_fp, -cfg.shadow_clip, cfg.shadow_clip, out=layer.w_fp)
        opt.step(("b", li), layer.bias, grads["bias"][li], lr)
    if learn_scale:
        _step_logit_scale(net, grads["logit_scale"], opt, lr)
    net.binarize_step()


def _step_logit_scale(net: Network, grad: float, opt, lr: float) -> None:
    # stepped in log space: stays positive and adapts multiplicatively
    log_tau = np.array([math.log(net.logit_scale)])
    opt.step("tau", log_tau, np.array([grad * net.logit_scale]), lr)
    net.logit_scale = float(np.exp(log_tau[0]))


def _match_logit_scale(net: Network, pixels, mask: AgingMask, pim: PimConfig) -> None:
    """Rescale the logits so the authorized chip's spread matches the unaged one.

    Aging shrinks every column sum, so without this the authorized branch
    starts with logits several times flatter than the pretrained model's.
    """
    fresh = np.std(forward(net, pixels, None, pim).logits)
    aged = np.std(forward(net, pixels, mask, pim).logits)
    if aged > 0 and fresh > 0:
        net.logit_scale *= float(fresh / aged)


def _calibrate(net: Network, pixels, pim: PimConfig, logit_std: float = 3.0) -> None:
    """Set activation scales to the observed max and size the logits."""
    for li, layer in enumerate(net.layers[:-1]):
        layer.act_scale = 1.0
        z = forward(net, pixels, None, pim).layers[li]["z"]
        layer.act_scale = max(float(np.max(z)), 1e-6)
    net.logit_scale = 1.0
    z = forward(net, pixels, None, pim).logits
    net.logit_scale = logit_std / max(float(np.std(z)), 1e-6)


def pretrain(widths, dataset: Dataset, cfg: TrainConfig, q: int = 1, n: int = 8,
             val: Dataset | None = None, pim: PimConfig | None = None, act_momentum: float = 0.9):
    """Quantization-aware training of the unprotected baseline.

    One latent real matrix per layer is quantized with :func:`quantize_weights`
    every step and decomposed into +/-1 planes; gradients reach the latent
    weights straight through the quantizer (clipped to [-1, 1]). Hidden
    activation scales track a running max. Returns ``(network, history)``.
    """
    pim = pim or PimConfig(q=q, n=n)
    net = init_network(widths, q, n, cfg.seed)
    rng = np.random.default_rng([int(cfg.seed), 0xBA5E])
    latent = [rng.uniform(-1.0, 1.0, size=l.shape) * math.sqrt(3.0 / l.fan_in) * 4 for l in net.layers]
    latent = [np.clip(w, -1.0, 1.0).astype(np.float32) for w in latent]
    opt = _optimizer(cfg)
    nominal = float(max_code(q))
    val = val if val is not None else dataset
    plateau = _Plateau(cfg.patience, cfg.min_rel_improvement)
    history = []

    def refresh():
        for layer, w in zip(net.layers, latent):
            layer.planes = quantize_weights(w, q).planes

    refresh()
    _calibrate(net, dataset.images[:1000] / 255.0, pim)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        for step, idx in enumerate(_batches(len(dataset), cfg.batch_size, rng)):
            pixels = dataset.images[idx] / 255.0
            cache = forward(net, pixels, None, pim)
            loss, dlogits = task_loss(cache.logits, dataset.labels[idx], cfg.loss)
            _check_finite(loss, epoch, step)
            g = backward(net, cache, dlogits, pim)
            for li, layer in enumerate(net.layers):
                if li < len(net.layers) - 1:
                    peak = max(float(np.max(cache.layers[li]["z"])), 1e-6)
                    layer.act_scale = act_momentum * layer.act_scale + (1 - act_momentum) * peak
                gw = nominal * g["w_eff"][li] * (np.abs(latent[li]) <= 1.0)
                opt.step(("w", li), latent[li], gw, lr)
                np.clip(latent[li], -1.0, 1.0, out=latent[li])
                opt.step(("b", li), layer.bias, g["bias"][li], lr)
            if cfg.learns_logit_scale(doft=False):
                _step_logit_scale(net, g["logit_scale"], opt, lr)
            refresh()
        acc = evaluate(net, val, None, pim)
        history.append({"epoch": epoch + 1, "acc": acc, "seconds": time.perf_counter() - t0})
        log.info("pretrain epoch %d: val acc %.4f", epoch + 1, acc)
        net.epoch += 1
        if plateau.update(1.0 - acc):
            break
    for layer in net.layers:
        layer.w_fp = layer.planes.astype(np.float32)
    return net, history
