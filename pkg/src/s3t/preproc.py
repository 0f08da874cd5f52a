"""Square the variable-length crops for the encoder: Frequency Tiling or Time Folding."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .audio import Spectrogram

PREPROCESSORS = ("folding", "tiling")


@dataclass
class ModelInput:
    values: np.ndarray
    source_shape: Tuple[int, int]
    preprocessor: str

    @property
    def size(self) -> int:
        return self.values.shape[0]


def frequency_tile(spec: Spectrogram) -> Spectrogram:
    """Repeat the rows ``ceil(T/F)`` times and keep the lowest ``T``: a T x T output."""
    F, T = spec.values.shape
    rows = np.arange(T) % F
    return spec.replace(spec.values[rows].copy())


def fold_count(F: int, T: int) -> int:
    return max(1, math.floor(math.sqrt(T / F) + 0.5))


def time_fold(spec: Spectrogram) -> Spectrogram:
    """Cut time into ``n`` equal chunks (zero-padding the tail) and stack them along frequency.

    Chunk ``j`` occupies rows ``[F*j, F*(j+1))``, so later time sits above earlier time.
    """
    F, T = spec.values.shape
    n = fold_count(F, T)
    width = math.ceil(T / n)
    padded = np.zeros((F, n * width), dtype=spec.values.dtype)
    padded[:, :T] = spec.values
    out = padded.reshape(F, n, width).transpose(1, 0, 2).reshape(F * n, width)
    return Spectrogram(out, spec.frame_rate * n)


def bilinear_resize(x: np.ndarray, size: int) -> np.ndarray:
    """Align-corners bilinear resampling of a 2-D array to ``size x size``."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot resize an empty matrix")
    for axis in (0, 1):
        n = x.shape[axis]
        if n == 1:
            x = np.repeat(x, size, axis=axis)
            continue
        pos = np.arange(size) * (n - 1) / (size - 1) if size > 1 else np.zeros(1)
        i0 = np.minimum(np.floor(pos).astype(int), n - 1)
        i1 = np.minimum(i0 + 1, n - 1)
        frac = pos - i0
        a, b = np.take(x, i0, axis=axis), np.take(x, i1, axis=axis)
        frac = frac[:, None] if axis == 0 else frac[None, :]
        x = a + frac * (b - a)
    return x


def resize_to_model(spec: Spectrogram, size: int = 256, preprocessor: str = "folding") -> ModelInput:
    values = bilinear_resize(spec.values, size).astype(np.float32)
    return ModelInput(values, tuple(spec.values.shape), preprocessor)


def preprocess(spec: Spectrogram, preprocessor: str = "folding", size: int = 256) -> ModelInput:
    if preprocessor == "folding":
        squared = time_fold(spec)
    elif preprocessor == "tiling":
        squared = frequency_tile(spec)
    else:
        raise ValueError(f"unknown preprocessor {preprocessor!r}; expected one of {PREPROCESSORS}")
    out = resize_to_model(squared, size, preprocessor)
    out.source_shape = tuple(spec.values.shape)
    return out
