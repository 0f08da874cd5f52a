"""CSV dataset manifests and the synthetic harmonic-tone benchmark corpus."""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .audio import AudioClip, CqtConfig, Spectrogram, frontend_meta, load_wav, read_spectrogram, save_wav, \
    spectrogram_from_audio, write_spectrogram
from .augment import make_rng

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
FIELDS = ("id", "audio_path", "split", "labels")


class ManifestError(ValueError):
    pass


@dataclass
class Row:
    id: str
    audio_path: str
    split: str
    tokens: Tuple[str, ...]


@dataclass
class LabeledDataset:
    rows: List[Row]
    vocab: List[str]
    multi_label: bool
    root: Path = Path(".")
    diagnostics: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def path(self, row: Row) -> Path:
        p = Path(row.audio_path)
        return p if p.is_absolute() else self.root / p

    def label_vector(self, row: Row) -> np.ndarray:
        v = np.zeros(len(self.vocab), dtype=np.float32)
        for t in row.tokens:
            v[self.vocab.index(t)] = 1.0
        return v

    def label_index(self, row: Row) -> int:
        return self.vocab.index(row.tokens[0])

    def split_rows(self, split: str) -> List[Row]:
        return [r for r in self.rows if r.split == split]

    def split_counts(self) -> dict:
        return {s: sum(r.split == s for r in self.rows) for s in SPLITS}


def load_manifest(path, task: Optional[str] = None, check_paths: bool = True) -> LabeledDataset:
    """Parse a manifest; bad rows are dropped with a diagnostic, >10% bad rows aborts.

    ``task`` is ``"genre"`` (one token per row) or ``"tagging"`` (';'-separated
    tags); when omitted it is inferred from the presence of ';'.
    """
    path = Path(path)
    root = path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(f not in reader.fieldnames for f in FIELDS):
            raise ManifestError(f"{path}: header must contain {', '.join(FIELDS)}")
        raw = list(reader)
    rows, diags, seen = [], [], set()
    for n, rec in enumerate(raw, start=2):
        rid = (rec.get("id") or "").strip()
        tokens = tuple(t.strip() for t in (rec.get("labels") or "").split(";") if t.strip())
        split = (rec.get("split") or "").strip()
        audio = (rec.get("audio_path") or "").strip()
        if not rid:
            diags.append(f"line {n}: empty id")
        elif rid in seen:
            diags.append(f"line {n}: duplicate id {rid!r}")
        elif split not in SPLITS:
            diags.append(f"line {n}: id {rid!r} has unknown split {split!r}")
        elif not tokens:
            diags.append(f"line {n}: id {rid!r} has empty labels")
        elif check_paths and not (Path(audio) if Path(audio).is_absolute() else root / audio).exists():
            diags.append(f"line {n}: id {rid!r} audio not found: {audio}")
        else:
            seen.add(rid)
            rows.append(Row(rid, audio, split, tokens))
    for d in diags:
        log.warning("%s: %s", path, d)
    if raw and len(diags) > 0.1 * len(raw):
        raise ManifestError(f"{path}: {len(diags)} of {len(raw)} rows rejected; first: {diags[0]}")
    multi = any(len(r.tokens) > 1 for r in rows) if task is None else task == "tagging"
    if not multi:
        bad = [r.id for r in rows if len(r.tokens) != 1]
        if bad:
            raise ManifestError(f"{path}: genre rows must carry one label; offending ids {bad[:5]}")
    vocab = sorted({t for r in rows for t in r.tokens})
    ds = LabeledDataset(rows, vocab, multi, root, diags)
    log.info("%s: %d rows, splits %s, %d labels", path, len(rows), ds.split_counts(), len(vocab))
    return ds


def write_manifest(ds: LabeledDataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIELDS)
        for r in ds.rows:
            w.writerow([r.id, r.audio_path, r.split, ";".join(sorted(r.tokens))])


# -- spectrogram cache ------------------------------------------------------------

def cache_dir(default) -> Path:
    return Path(os.environ.get("S3T_CACHE_DIR", default))


def load_spectrograms(ds: LabeledDataset, rows: Sequence[Row], cfg: CqtConfig = CqtConfig(),
                      compress: int = 100, cache: Optional[Path] = None) -> List[Spectrogram]:
    """Frontend output for each row, read from / written to the spectrogram cache."""
    cache = cache_dir(cache if cache is not None else ds.root / ".s3t_cache")
    cache.mkdir(parents=True, exist_ok=True)
    out = []
    for r in rows:
        f = cache / f"{r.id}.c{compress}.s3tspec"
        if f.exists():
            out.append(read_spectrogram(f))
            continue
        spec = spectrogram_from_audio(load_wav(ds.path(r)), cfg, compress)
        write_spectrogram(f, spec, frontend_meta(ds.path(r), cfg, compress))
        out.append(read_spectrogram(f))
    return out


# -- synthetic corpus -------------------------------------------------------------

@dataclass(frozen=True)
class ClassRecipe:
    name: str
    f0_range: Tuple[float, float]
    harmonic_decay: float
    n_harmonics: int
    noise: float
    am_rate: float


BASE_RECIPES = (
    ClassRecipe("drone", (55.0, 110.0), 2.0, 10, 0.02, 0.5),
    ClassRecipe("lead", (220.0, 440.0), 0.7, 10, 0.05, 4.0),
    ClassRecipe("pad", (110.0, 220.0), 1.5, 10, 0.25, 1.0),
    ClassRecipe("bell", (440.0, 880.0), 1.2, 6, 0.01, 6.0),
)


def default_recipes(n: int) -> List[ClassRecipe]:
    recipes = list(BASE_RECIPES[:n])
    for c in range(len(recipes), n):
        base = BASE_RECIPES[c % len(BASE_RECIPES)]
        lo = base.f0_range[0] * 2 ** (0.25 * (c // len(BASE_RECIPES)))
        recipes.append(ClassRecipe(f"{base.name}{c}", (lo, 2 * lo), base.harmonic_decay + 0.1 * c,
                                   base.n_harmonics, base.noise, base.am_rate + 0.25 * c))
    return recipes


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 4
    clips_per_class: int = 50
    duration: float = 30.0
    sample_rate: int = 22050
    recipes: Tuple[ClassRecipe, ...] = ()

    def __post_init__(self):
        if not self.recipes:
            object.__setattr__(self, "recipes", tuple(default_recipes(self.n_classes)))
        if len(self.recipes) != self.n_classes:
            raise ValueError("need one recipe per class")
        keys = [(r.f0_range, r.harmonic_decay, r.noise, r.am_rate) for r in self.recipes]
        if len(set(keys)) != len(keys):
            raise ValueError("class recipes must differ")


def synth_clip(recipe: ClassRecipe, duration: float, sr: int, rng: np.random.Generator) -> AudioClip:
    n = int(round(duration * sr))
    t = np.arange(n) / sr
    f0 = rng.uniform(*recipe.f0_range)
    phases = rng.uniform(0, 2 * np.pi, recipe.n_harmonics)
    tone = np.zeros(n)
    for h in range(1, recipe.n_harmonics + 1):
        if h * f0 >= sr / 2:
            break
        tone += h ** -recipe.harmonic_decay * np.sin(2 * np.pi * h * f0 * t + phases[h - 1])
    tone /= np.max(np.abs(tone))
    am = 0.75 + 0.25 * np.sin(2 * np.pi * recipe.am_rate * t + rng.uniform(0, 2 * np.pi))
    gain = rng.uniform(0.3, 0.7)
    x = gain * am * tone + recipe.noise * gain * rng.standard_normal(n)
    return AudioClip(np.clip(x, -1.0, 1.0), sr)


def generate_synthetic(spec: SyntheticSpec, out_dir, seed: int = 0) -> LabeledDataset:
    """Write WAV clips and ``manifest.csv``; each class is split 8:1:1 train/valid/test."""
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    rows = []
    n = spec.clips_per_class
    n_valid = n_test = max(1, round(0.1 * n)) if n >= 3 else 0
    for c, recipe in enumerate(spec.recipes):
        for i in range(n):
            rng = make_rng([seed, c, i])
            clip = synth_clip(recipe, spec.duration, spec.sample_rate, rng)
            rid = f"{recipe.name}_{i:04d}"
            rel = f"audio/{rid}.wav"
            save_wav(out / rel, clip)
            split = "test" if i >= n - n_test else "valid" if i >= n - n_test - n_valid else "train"
            rows.append(Row(rid, rel, split, (recipe.name,)))
    ds = LabeledDataset(rows, sorted(r.name for r in spec.recipes), False, out)
    write_manifest(ds, out / "manifest.csv")
    return ds
