"""Stochastic spectrogram augmentations producing a query/key pair.

Every transform is split into a parameter draw (``draw_*``) and a pure
``apply_*``; the provenance of an :class:`AugmentedPair` is the list of
draws, so ``replay`` reproduces a pair bit-exactly without an RNG.

Randomness comes from ``numpy.random.Generator`` over PCG64, which yields the
same stream for a given seed on every platform.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .audio import Spectrogram


class AugmentError(ValueError):
    pass


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def spawn(rng_seed, n: int) -> List[np.random.Generator]:
    """Independent per-worker generators split from one root seed."""
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(rng_seed).spawn(n)]


@dataclass(frozen=True)
class AugmentConfig:
    crop_ratio: Tuple[float, float] = (0.1, 0.9)
    freq_mask_n: Tuple[int, int] = (1, 5)
    freq_mask_len: Tuple[int, int] = (5, 30)
    freq_mask_cap_ratio: float = 0.4
    freq_mask_p: float = 0.5
    time_mask_n: Tuple[int, int] = (1, 10)
    time_mask_ratio: Tuple[float, float] = (0.01, 0.2)
    time_mask_cap_ratio: float = 0.4
    time_mask_p: float = 0.5
    warp_w: Tuple[int, int] = (0, 10)
    warp_p: float = 0.4
    shift_step: Tuple[int, int] = (1, 10)
    shift_p: float = 0.4

    def __post_init__(self):
        for name in ("freq_mask_p", "time_mask_p", "warp_p", "shift_p",
                     "freq_mask_cap_ratio", "time_mask_cap_ratio"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise AugmentError(f"{name}={v} outside [0, 1]")
        for name in ("crop_ratio", "freq_mask_n", "freq_mask_len", "time_mask_n",
                     "time_mask_ratio", "warp_w", "shift_step"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise AugmentError(f"{name} range ({lo}, {hi}) is empty")
            object.__setattr__(self, name, (lo, hi))

    def probabilities(self):
        return {"frequency_mask": self.freq_mask_p, "time_mask": self.time_mask_p,
                "time_warp": self.warp_p, "random_shift": self.shift_p}


DEFAULT = AugmentConfig()
TRANSFORM_ORDER = ("frequency_mask", "time_mask", "time_warp", "random_shift")


# -- multi-crop ---------------------------------------------------------------

def draw_crop(T: int, rng: np.random.Generator, ratio=(0.1, 0.9)) -> dict:
    r = float(rng.uniform(ratio[0], ratio[1]))
    length = max(1, math.floor(T * r))
    start = int(rng.integers(0, T - length, endpoint=True))
    return {"ratio": r, "start": start, "length": length}


def apply_crop(spec: Spectrogram, p: dict) -> Spectrogram:
    return spec.replace(spec.values[:, p["start"]:p["start"] + p["length"]].copy())


def random_multi_crop(spec: Spectrogram, rng: np.random.Generator, cfg: AugmentConfig = DEFAULT):
    T = spec.t_frames
    if T < 10:
        raise AugmentError(f"multi-crop needs at least 10 frames, got {T}")
    a = draw_crop(T, rng, cfg.crop_ratio)
    b = draw_crop(T, rng, cfg.crop_ratio)
    return apply_crop(spec, a), apply_crop(spec, b)


# -- masking ------------------------------------------------------------------

def draw_frequency_mask(F: int, rng: np.random.Generator, cfg: AugmentConfig = DEFAULT) -> dict:
    """Segment lengths are drawn from the range truncated to the remaining budget."""
    cap = math.floor(cfg.freq_mask_cap_ratio * F)
    n = int(rng.integers(cfg.freq_mask_n[0], cfg.freq_mask_n[1], endpoint=True))
    lo, hi = cfg.freq_mask_len
    used = 0
    segments = []
    for _ in range(n):
        top = min(hi, cap - used, F)
        if top < lo:
            break
        length = int(rng.integers(lo, top, endpoint=True))
        start = int(rng.integers(0, F - length, endpoint=True))
        segments.append([start, length])
        used += length
    return {"n": n, "cap": cap, "segments": segments}


def apply_frequency_mask(spec: Spectrogram, p: dict) -> Spectrogram:
    v = spec.values.copy()
    for start, length in p["segments"]:
        v[start:start + length, :] = 0
    return spec.replace(v)


def frequency_mask(spec: Spectrogram, rng: np.random.Generator, cfg: AugmentConfig = DEFAULT) -> Spectrogram:
    return apply_frequency_mask(spec, draw_frequency_mask(spec.f_bins, rng, cfg))


def draw_time_mask(T: int, rng: np.random.Generator, cfg: AugmentConfig = DEFAULT) -> dict:
    """Segments are truncated once the ``floor(cap_ratio * T)`` budget is spent."""
    budget = math.floor(cfg.time_mask_cap_ratio * T)
    n = int(rng.integers(cfg.time_mask_n[0], cfg.time_mask_n[1], endpoint=True))
    used = 0
    segments = []
    for _ in range(n):
        r = float(rng.uniform(*cfg.time_mask_ratio))
        length = min(math.floor(T * r), budget - used)
        if length <= 0:
            segments.append([0, 0, r])
            continue
        start = int(rng.integers(0, T - length, endpoint=True))
        segments.append([start, length, r])
        used += length
    return {"n": n, "budget": budget, "segments": segments}


def apply_time_mask(spec: Spectrogram, p: dict) -> Spectrogram:
    v = spec.values.copy()
    for start, length, _ in p["segments"]:
        v[:, start:start + length] = 0
    return spec.replace(v)


def time_mask(spec: Spectrogram, rng: np.random.Generator, cfg: AugmentConfig = DEFAULT) -> Spectrogram:
    return apply_time_mask(spec, draw_time_mask(spec.t_frames, rng, cfg))


# -- time warp ----------------------------------------------------------------

def draw_time_warp(T: int, rng: np.random.Generator, cfg: AugmentConfig = DEFAULT) -> dict:
    w_lo, w_hi = cfg.warp_w
    # the anchor range W+1 .. T-W-1 is empty for T <= 2*W+1
    if T <= 2 * w_hi + 1:
        return {"identity": True}
    w = int(rng.integers(w_lo, w_hi, endpoint=True))
    t0 = int(rng.integers(w + 1, T - w - 1, endpoint=True))
    direction = 1 if rng.random() < 0.5 else -1
    return {"identity": False, "w": w, "anchor": t0, "direction": direction}


def warp_source_positions(T: int, anchor: int, dest: int) -> np.ndarray:
    """Source coordinate read by each output column; ``anchor`` lands on ``dest``."""
    t = np.arange(T, dtype=np.float64)
    src = np.empty(T)
    left = t <= dest
    src[left] = t[left] * anchor / dest
    right = ~left
    if right.any():
        src[right] = anchor + (t[right] - dest) * (T - 1 - anchor) / (T - 1 - dest)
    return src


def apply_time_warp(spec: Spectrogram, p: dict) -> Spectrogram:
    if p["identity"] or p["w"] == 0:
        return spec.replace(spec.values.copy())
    T = spec.t_frames
    src = warp_source_positions(T, p["anchor"], p["anchor"] + p["direction"] * p["w"])
    i0 = np.clip(np.floor(src).astype(int), 0, T - 1)
    i1 = np.minimum(i0 + 1, T - 1)
    frac = src - i0
    x = spec.values.astype(np.float64)
    out = x[:, i0] + frac * (x[:, i1] - x[:, i0])
    return spec.replace(out.astype(spec.values.dtype))


def time_warp(spec: Spectrogram, rng: np.random.Generator, cfg: AugmentConfig = DEFAULT) -> Spectrogram:
    return apply_time_warp(spec, draw_time_warp(spec.t_frames, rng, cfg))


# -- shift --------------------------------------------------------------------

def draw_shift(shape, rng: np.random.Generator, cfg: AugmentConfig = DEFAULT, clamp: bool = False) -> dict:
    """With ``clamp`` the step range is cut to ``axis_len - 1`` instead of rejecting."""
    axis = "frequency" if rng.random() < 0.5 else "time"
    n = shape[0] if axis == "frequency" else shape[1]
    lo, hi = cfg.shift_step
    if clamp:
        hi = min(hi, n - 1)
        if hi < lo:
            return {"identity": True, "axis": axis}
    step = int(rng.integers(lo, hi, endpoint=True))
    direction = 1 if rng.random() < 0.5 else -1
    if step >= n:
        raise AugmentError(f"shift of {step} along {axis} axis of length {n}")
    return {"identity": False, "axis": axis, "step": step, "direction": direction}


def apply_shift(spec: Spectrogram, p: dict) -> Spectrogram:
    v = spec.values
    out = np.zeros_like(v)
    if p.get("identity"):
        return spec.replace(v.copy())
    axis = 0 if p["axis"] == "frequency" else 1
    s = p["step"] * p["direction"]
    n = v.shape[axis]
    if abs(s) >= n:
        raise AugmentError(f"shift of {abs(s)} along axis of length {n}")
    dst = [slice(None), slice(None)]
    src = [slice(None), slice(None)]
    if s > 0:
        dst[axis], src[axis] = slice(s, None), slice(0, n - s)
    else:
        dst[axis], src[axis] = slice(0, n + s), slice(-s, None)
    out[tuple(dst)] = v[tuple(src)]
    return spec.replace(out)


def random_shift(spec: Spectrogram, rng: np.random.Generator, cfg: AugmentConfig = DEFAULT) -> Spectrogram:
    return apply_shift(spec, draw_shift(spec.values.shape, rng, cfg))


# -- pipeline -----------------------------------------------------------------

_DRAW = {
    "frequency_mask": lambda s, rng, cfg: draw_frequency_mask(s.f_bins, rng, cfg),
    "time_mask": lambda s, rng, cfg: draw_time_mask(s.t_frames, rng, cfg),
    "time_warp": lambda s, rng, cfg: draw_time_warp(s.t_frames, rng, cfg),
    "random_shift": lambda s, rng, cfg: draw_shift(s.values.shape, rng, cfg, clamp=True),
}
_APPLY = {
    "frequency_mask": apply_frequency_mask,
    "time_mask": apply_time_mask,
    "time_warp": apply_time_warp,
    "random_shift": apply_shift,
}


@dataclass
class AugmentedPair:
    query: Spectrogram
    key: Spectrogram
    provenance: dict = field(default_factory=dict)

    def provenance_json(self) -> str:
        return json.dumps(self.provenance, indent=1, sort_keys=True)


def _augment_view(spec: Spectrogram, rng, cfg: AugmentConfig):
    record = []
    probs = cfg.probabilities()
    for name in TRANSFORM_ORDER:
        fired = bool(rng.random() < probs[name])
        entry = {"op": name, "fired": fired}
        if fired:
            entry["params"] = _DRAW[name](spec, rng, cfg)
            spec = _APPLY[name](spec, entry["params"])
        record.append(entry)
    return spec, record


def augment_pair(spec: Spectrogram, cfg: AugmentConfig = DEFAULT,
                 rng: Optional[np.random.Generator] = None) -> AugmentedPair:
    if rng is None:
        rng = make_rng(0)
    T = spec.t_frames
    if T < 10:
        raise AugmentError(f"multi-crop needs at least 10 frames, got {T}")
    crops = [draw_crop(T, rng, cfg.crop_ratio), draw_crop(T, rng, cfg.crop_ratio)]
    views, records = [], []
    for c in crops:
        view, rec = _augment_view(apply_crop(spec, c), rng, cfg)
        views.append(view)
        records.append(rec)
    prov = {"crops": crops, "query": records[0], "key": records[1]}
    return AugmentedPair(views[0], views[1], prov)


def replay(spec: Spectrogram, provenance: dict) -> AugmentedPair:
    views = []
    for crop, rec in zip(provenance["crops"], (provenance["query"], provenance["key"])):
        view = apply_crop(spec, crop)
        for entry in rec:
            if entry["fired"]:
                view = _APPLY[entry["op"]](view, entry["params"])
        views.append(view)
    return AugmentedPair(views[0], views[1], provenance)
