"""Deliberate-aging masks (the hardware key) and natural-aging drift.

A mask holds, for every layer and weight bit index, a matrix of *degree*
multipliers. An unaged cell reads its full step (degree 1.0); an aged cell
reads a fraction ``alpha`` of it. Masks are float32 so that what is held in
memory is exactly what a ``.mask`` file stores.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import fileio
from .errors import CorruptFileError, DimensionError
from .quantize import round_half_up

MASK_MAGIC = b"AGELOCK-MASK"
MASK_VERSION = 1
MIN_DEGREE = 1e-6
# largest float32 strictly below 1.0: keeps a varied aged cell distinguishable
# from an unaged one
_BELOW_ONE = float(np.nextafter(np.float32(1.0), np.float32(0.0)))
# stream id of the shared prototype; no real layer index gets this large
_SHARED_STREAM = 0x5AA7ED


@dataclass(frozen=True)
class AgingMask:
    """Per-layer degree stacks, each shaped ``(q, rows, cols)``."""

    degrees: tuple
    q: int
    sigma: float
    alpha: float
    seed: int
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        stacks = tuple(np.asarray(d, dtype=np.float32) for d in self.degrees)
        for i, d in enumerate(stacks):
            if d.ndim != 3 or d.shape[0] != self.q:
                raise DimensionError(f"layer {i}: degree stack shape {d.shape} does not match q={self.q}")
            if not (np.all(d > 0) and np.all(d <= 1)):
                raise ValueError(f"layer {i}: degrees must lie in (0, 1]")
        object.__setattr__(self, "degrees", stacks)

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [(d.shape[1], d.shape[2]) for d in self.degrees]

    @property
    def n_layers(self) -> int:
        return len(self.degrees)

    def layer(self, index: int) -> np.ndarray:
        return self.degrees[index]

    def aged_counts(self) -> np.ndarray:
        """Aged-cell count per ``(layer, bit)``; ragged layers give a list of rows."""
        return np.array([[int(np.count_nonzero(p != 1.0)) for p in d] for d in self.degrees])

    def with_degrees(self, degrees, **meta) -> "AgingMask":
        merged = dict(self.meta)
        merged.update(meta)
        return replace(self, degrees=tuple(degrees), meta=merged)


def aged_count(sigma: float, cells: int) -> int:
    return int(round_half_up(sigma * cells))


def _plane_rng(seed: int, layer: int, bit: int) -> np.random.Generator:
    # one independent stream per (layer, bit) so toggling a layer never moves another
    return np.random.default_rng([int(seed), layer, bit])


def random_plane(rows: int, cols: int, sigma: float, alpha: float, rng: np.random.Generator) -> np.ndarray:
    cells = rows * cols
    plane = np.ones(cells, dtype=np.float32)
    k = aged_count(sigma, cells)
    if k:
        plane[rng.choice(cells, size=k, replace=False)] = np.float32(alpha)
    return plane.reshape(rows, cols)


def _check_sigma_alpha(sigma: float, alpha: float) -> None:
    if not 0.0 <= sigma <= 1.0:
        raise ValueError(f"aging ratio must be in [0, 1], got {sigma}")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"aging degree must be in (0, 1], got {alpha}")


def generate_mask(shapes, q: int, sigma: float, alpha: float, seed: int,
                  aged_layers=None) -> AgingMask:
    """Randomly age ``round(sigma * rows * cols)`` cells in every bit plane.

    ``aged_layers`` restricts aging to the listed layer indices; the other
    layers get all-ones planes. Fully determined by ``seed``.
    """
    _check_sigma_alpha(sigma, alpha)
    aged = set(range(len(shapes))) if aged_layers is None else {int(a) for a in aged_layers}
    stacks = []
    for li, (rows, cols) in enumerate(shapes):
        if li in aged:
            planes = [random_plane(rows, cols, sigma, alpha, _plane_rng(seed, li, bit)) for bit in range(q)]
        else:
            planes = [np.ones((rows, cols), dtype=np.float32)] * q
        stacks.append(np.stack(planes))
    meta = {"aged_layers": sorted(aged)} if aged_layers is not None else {}
    return AgingMask(tuple(stacks), q, float(sigma), float(alpha), int(seed), meta)


def unaged_mask(shapes, q: int) -> AgingMask:
    """All-ones mask: the arithmetic of a chip that was never deliberately aged."""
    return AgingMask(tuple(np.ones((q, r, c), dtype=np.float32) for r, c in shapes), q, 0.0, 1.0, 0)


def subset_mask(prototype, rows: int, cols: int) -> np.ndarray:
    """Top-left ``rows x cols`` slice of a prototype plane (or plane stack)."""
    prototype = np.asarray(prototype)
    prows, pcols = prototype.shape[-2:]
    if rows > prows or cols > pcols:
        raise DimensionError(
            f"target {rows}x{cols} exceeds prototype {prows}x{pcols}; "
            "build the prototype from the largest layer")
    return prototype[..., :rows, :cols].copy()


def shared_mask(shapes, q: int, sigma: float, alpha: float, seed: int) -> AgingMask:
    """Array-reuse mask: one prototype per bit index, every layer takes a subset.

    The prototype has the shape of the layer with the most weights.
    """
    _check_sigma_alpha(sigma, alpha)
    rows, cols = max(shapes, key=lambda s: s[0] * s[1])
    proto = np.stack([random_plane(rows, cols, sigma, alpha, _plane_rng(seed, _SHARED_STREAM, bit)) for bit in range(q)])
    stacks = tuple(subset_mask(proto, r, c) for r, c in shapes)
    return AgingMask(stacks, q, float(sigma), float(alpha), int(seed), {"shared": True})


def apply_process_variation(mask: AgingMask, rel_std: float, seed: int) -> AgingMask:
    """Replace each aged degree ``a`` with a draw from N(a, (rel_std * a)**2).

    Draws are clamped into (0, 1) so the aged/unaged partition survives.
    """
    if rel_std < 0:
        raise ValueError("relative standard deviation must be >= 0")
    if rel_std == 0:
        return mask
    rng = np.random.default_rng([int(seed), 0x5056])
    out = []
    for stack in mask.degrees:
        stack = stack.copy()
        aged = stack != 1.0
        mean = stack[aged].astype(np.float64)
        draw = rng.normal(mean, rel_std * mean)
        stack[aged] = np.clip(draw, MIN_DEGREE, _BELOW_ONE).astype(np.float32)
        out.append(stack)
    return mask.with_degrees(out, pv_rel_std=rel_std, pv_seed=int(seed))


def natural_drift(mask: AgingMask, rel_degree_shrink: float) -> AgingMask:
    """Shrink every degree (aged or not) by the same relative amount."""
    if not 0.0 <= rel_degree_shrink < 1.0:
        raise ValueError("degree shrink must be in [0, 1)")
    if rel_degree_shrink == 0:
        return mask
    factor = 1.0 - rel_degree_shrink
    out = [np.maximum(s.astype(np.float64) * factor, MIN_DEGREE).astype(np.float32) for s in mask.degrees]
    return mask.with_degrees(out, natural_shrink=rel_degree_shrink)


@dataclass(frozen=True)
class NaturalAgingParams:
    """Power-law threshold drift ``dv_th = zeta * years**chi``.

    ``v_ds``, ``temperature_k`` and ``vth0`` describe the stress condition the
    fit came from; only ``vth0`` is used, to express drift relative to the
    fresh threshold.
    """

    zeta: float
    chi: float
    v_ds: float = 1.2
    temperature_k: float = 323.15
    vth0: float = 0.46893

    def __post_init__(self):
        if not self.zeta > 0:
            raise ValueError("zeta must be positive")
        if not 0 < self.chi < 1:
            raise ValueError("chi must be in (0, 1)")


def fit_power_law(t1: float, v1: float, t2: float, v2: float, **context) -> NaturalAgingParams:
    """Solve ``v = zeta * t**chi`` through two (time, drift) points."""
    if t1 <= 0 or t2 <= 0 or t1 == t2 or v1 <= 0 or v2 <= 0:
        raise ValueError("need two distinct positive times and positive drifts")
    chi = math.log(v2 / v1) / math.log(t2 / t1)
    zeta = v1 / t1 ** chi
    return NaturalAgingParams(zeta, chi, **context)


# 45 nm NMOS at V_ds = 1.2 V, 323.15 K: +0.0083 V after 5 years, +0.0114 V after 10
HCI_CALIBRATION = ((5.0, 0.0083), (10.0, 0.0114))
DEFAULT_NATURAL_AGING = fit_power_law(*HCI_CALIBRATION[0], *HCI_CALIBRATION[1])


def vth_drift(params: NaturalAgingParams, years):
    years = np.asarray(years, dtype=np.float64)
    if np.any(years <= 0):
        raise ValueError("stress time must be positive")
    out = params.zeta * years ** params.chi
    return float(out) if out.ndim == 0 else out


def relative_vth_increase(params: NaturalAgingParams, years) -> float:
    """Drift as a fraction of the fresh threshold; used as the degree shrink."""
    return vth_drift(params, years) / params.vth0


def save_mask(mask: AgingMask, path) -> None:
    header = {
        "version": MASK_VERSION,
        "q": mask.q,
        "sigma": mask.sigma,
        "alpha": mask.alpha,
        "seed": mask.seed,
        "layers": mask.n_layers,
        "shapes": [list(s) for s in mask.shapes],
        "planes": mask.n_layers * mask.q,
        "meta": mask.meta,
    }
    fileio.write_container(path, MASK_MAGIC, header, mask.degrees)


def load_mask(path) -> AgingMask:
    header, payload = fileio.read_container(path, MASK_MAGIC, MASK_VERSION)
    try:
        q = int(header["q"])
        shapes = [tuple(int(v) for v in s) for s in header["shapes"]]
        layers = int(header["layers"])
        sigma, alpha, seed = float(header["sigma"]), float(header["alpha"]), int(header["seed"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFileError(f"{path}: incomplete mask header ({exc})") from exc
    if layers != len(shapes) or int(header.get("planes", layers * q)) != layers * q:
        raise DimensionError(f"{path}: header layer/plane counts disagree with shapes")
    stacks = fileio.split_payload(path, payload, [(q, r, c) for r, c in shapes])
    try:
        return AgingMask(tuple(stacks), q, sigma, alpha, seed, dict(header.get("meta") or {}))
    except ValueError as exc:
        raise CorruptFileError(f"{path}: {exc}") from exc
