"""Audio ingestion and the compressed log-CQT frontend."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile
from scipy.signal import resample_poly
from scipy.signal.windows import hann

SPEC_MAGIC = b"S3TSPEC1"


class FrontendError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise FrontendError(f"expected mono samples, got shape {self.samples.shape}")
        if self.samples.size == 0:
            raise FrontendError("audio clip is empty")
        if not np.all(np.isfinite(self.samples)):
            raise FrontendError("audio clip contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise FrontendError(f"invalid sample rate {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class CqtConfig:
    bins: int = 84
    bins_per_octave: int = 12
    fmin: float = 32.70
    hop: int = 512
    window: str = "hann"
    sample_rate: int = 22050

    def __post_init__(self):
        if self.bins % self.bins_per_octave:
            raise FrontendError("bins must be a multiple of bins_per_octave")
        if self.fmin * 2 ** (self.bins / self.bins_per_octave) >= self.sample_rate / 2:
            raise FrontendError("top CQT bin reaches Nyquist")
        if self.window != "hann":
            raise FrontendError(f"unsupported window {self.window!r}")
        if self.hop <= 0:
            raise FrontendError("hop must be positive")

    @property
    def q(self) -> float:
        return 1.0 / (2 ** (1.0 / self.bins_per_octave) - 1.0)

    def center_freqs(self) -> np.ndarray:
        return self.fmin * 2.0 ** (np.arange(self.bins) / self.bins_per_octave)

    def filter_lengths(self) -> np.ndarray:
        return np.ceil(self.q * self.sample_rate / self.center_freqs()).astype(int)


@dataclass
class Spectrogram:
    """F x T non-negative matrix. ``frame_rate`` is frames per second."""

    values: np.ndarray
    frame_rate: float

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise FrontendError(f"spectrogram must be 2-D, got {self.values.shape}")

    @property
    def f_bins(self) -> int:
        return self.values.shape[0]

    @property
    def t_frames(self) -> int:
        return self.values.shape[1]

    def replace(self, values: np.ndarray) -> "Spectrogram":
        return Spectrogram(values, self.frame_rate)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Polyphase resampling. Output length is ``ceil(N * target / source)``."""
    if target_rate <= 0:
        raise FrontendError(f"invalid target rate {target_rate}")
    if clip.sample_rate == target_rate:
        return AudioClip(clip.samples.copy(), target_rate)
    ratio = Fraction(target_rate, clip.sample_rate)
    out = resample_poly(clip.samples, ratio.numerator, ratio.denominator)
    return AudioClip(out, target_rate)


def cqt_filters(cfg: CqtConfig):
    """One Hann-windowed complex atom per bin, normalized so a unit cosine gives |X| ~ 0.5."""
    atoms = []
    for f, n in zip(cfg.center_freqs(), cfg.filter_lengths()):
        win = hann(n, sym=False)
        t = (np.arange(n) - n // 2) / cfg.sample_rate
        atoms.append(win * np.exp(2j * np.pi * f * t) / win.sum())
    return atoms


def cqt(clip: AudioClip, cfg: CqtConfig = CqtConfig()) -> Spectrogram:
    """Log-compressed CQT magnitude, ``log(1 + |X|)``, frames centered at ``t * hop``."""
    if clip.sample_rate != cfg.sample_rate:
        raise FrontendError(f"cqt expects {cfg.sample_rate} Hz audio, got {clip.sample_rate} Hz")
    lengths = cfg.filter_lengths()
    longest = int(lengths.max())
    x = clip.samples
    if x.size < longest:
        raise FrontendError(f"clip of {x.size} samples is shorter than the longest CQT filter ({longest})")
    n_frames = x.size // cfg.hop + 1
    pad = longest // 2 + 1
    padded = np.pad(x, (pad, pad + cfg.hop))
    out = np.empty((cfg.bins, n_frames))
    for k, atom in enumerate(cqt_filters(cfg)):
        n = atom.size
        start = pad - n // 2
        frames = sliding_window_view(padded[start:], n)[:: cfg.hop][:n_frames]
        # real signal: correlate with conj(atom) via two real products
        basis = np.stack([atom.real, -atom.imag], axis=1)
        re_im = frames @ basis
        out[k] = np.hypot(re_im[:, 0], re_im[:, 1])
    values = np.log1p(out).astype(np.float32)
    return Spectrogram(values, cfg.sample_rate / cfg.hop)


def compress_time(spec: Spectrogram, factor: int) -> Spectrogram:
    """Non-overlapping mean pooling along time; trailing remainder frames are dropped."""
    if factor < 1:
        raise FrontendError("compression factor must be >= 1")
    T = spec.t_frames
    if T < factor:
        raise FrontendError(f"cannot compress {T} frames by factor {factor}")
    if factor == 1:
        return Spectrogram(spec.values.copy(), spec.frame_rate)
    n = T // factor
    v = spec.values[:, : n * factor].astype(np.float64).reshape(spec.f_bins, n, factor).mean(axis=2)
    return Spectrogram(v.astype(spec.values.dtype), spec.frame_rate / factor)


def load_wav(path) -> AudioClip:
    """Read PCM WAV (16-bit int or 32-bit float), mixing channels down by mean."""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        data = data.astype(np.float64)
    else:
        raise FrontendError(f"{path}: unsupported WAV sample type {data.dtype}")
    if data.ndim == 2:
        data = data.mean(axis=1)
    return AudioClip(data, rate)


def save_wav(path, clip: AudioClip, pcm16: bool = True) -> None:
    if pcm16:
        data = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype(np.int16)
    else:
        data = clip.samples.astype(np.float32)
    wavfile.write(str(path), clip.sample_rate, data)


def spectrogram_from_audio(clip: AudioClip, cfg: CqtConfig = CqtConfig(), compress: int = 100) -> Spectrogram:
    if clip.sample_rate != cfg.sample_rate:
        clip = resample(clip, cfg.sample_rate)
    return compress_time(cqt(clip, cfg), compress)


def write_spectrogram(path, spec: Spectrogram, meta: Optional[dict] = None) -> None:
    """Binary cache file plus a ``key=value`` sidecar (``<path>.txt``) when ``meta`` is given."""
    path = Path(path)
    F, T = spec.values.shape
    with open(path, "wb") as fh:
        fh.write(SPEC_MAGIC)
        fh.write(struct.pack("<IIf", F, T, spec.frame_rate))
        fh.write(np.ascontiguousarray(spec.values, dtype="<f4").tobytes())
    if meta is not None:
        lines = [f"{k}={v}" for k, v in meta.items()]
        path.with_suffix(path.suffix + ".txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_spectrogram(path) -> Spectrogram:
    raw = Path(path).read_bytes()
    if raw[:8] != SPEC_MAGIC:
        raise FrontendError(f"{path}: not a spectrogram cache file")
    F, T, rate = struct.unpack("<IIf", raw[8:20])
    values = np.frombuffer(raw, dtype="<f4", count=F * T, offset=20).reshape(F, T).astype(np.float32)
    return Spectrogram(values, float(rate))


def read_sidecar(path) -> dict:
    text = Path(str(path) + ".txt").read_text(encoding="utf-8")
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


def frontend_meta(source, cfg: CqtConfig, compress: int) -> dict:
    return {
        "source": str(source),
        "bins": cfg.bins,
        "bins_per_octave": cfg.bins_per_octave,
        "fmin": cfg.fmin,
        "hop": cfg.hop,
        "window": cfg.window,
        "sample_rate": cfg.sample_rate,
        "compress": compress,
    }
