"""Frozen-feature extraction, linear probes, tagging/genre metrics and repeated runs."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .audio import Spectrogram
from .augment import make_rng
from .backbone import no_decay
from .optim import AdamState, lr_at, optimizer_step
from .preproc import preprocess

log = logging.getLogger(__name__)

FEAT_MAGIC = b"S3TFEAT1"


class EvalError(ValueError):
    pass


# -- features -------------------------------------------------------------------

@dataclass
class FeatureTable:
    ids: List[str]
    features: np.ndarray
    labels: np.ndarray
    multi_label: bool = False

    def __len__(self):
        return len(self.ids)

    def select(self, idx) -> "FeatureTable":
        idx = np.asarray(idx, dtype=int)
        return FeatureTable([self.ids[i] for i in idx], self.features[idx], self.labels[idx], self.multi_label)


def write_features(path, table: FeatureTable) -> None:
    N, D = table.features.shape
    L = table.labels.shape[1] if table.labels.ndim == 2 else 0
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<III", N, D, L))
        for i, rid in enumerate(table.ids):
            b = rid.encode("utf-8")
            fh.write(struct.pack("<I", len(b)))
            fh.write(b)
            fh.write(np.asarray(table.features[i], dtype="<f4").tobytes())
            if L:
                fh.write(np.asarray(table.labels[i], dtype="<f4").tobytes())


def read_features(path) -> FeatureTable:
    raw = Path(path).read_bytes()
    if raw[:8] != FEAT_MAGIC:
        raise EvalError(f"{path}: not a feature table")
    N, D, L = struct.unpack_from("<III", raw, 8)
    off = 20
    ids, feats, labels = [], np.empty((N, D), np.float32), np.zeros((N, L), np.float32)
    for i in range(N):
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        ids.append(raw[off:off + n].decode("utf-8"))
        off += n
        feats[i] = np.frombuffer(raw, "<f4", D, off)
        off += 4 * D
        if L:
            labels[i] = np.frombuffer(raw, "<f4", L, off)
            off += 4 * L
    return FeatureTable(ids, feats, labels, bool(L) and bool((labels.sum(1) > 1).any()))


@torch.no_grad()
def featurize(specs: Sequence[Spectrogram], backbone: nn.Module, preprocessor: str = "folding",
              ids: Optional[Sequence[str]] = None, labels: Optional[np.ndarray] = None,
              max_frames: int = 336, size: Optional[int] = None, batch: int = 8) -> FeatureTable:
    """Eval-mode representations of full-length (unaugmented) spectrograms.

    Spectrograms longer than ``max_frames`` are cut into consecutive chunks and
    the chunk features are averaged. ``size`` defaults to the backbone's input size.
    """
    if size is None:
        size = backbone.cfg.input_size if hasattr(backbone, "cfg") else 256
    backbone.eval()
    inputs, owner = [], []
    for n, spec in enumerate(specs):
        T = spec.t_frames
        for s in range(0, T, max_frames) if T > max_frames else (0,):
            inputs.append(preprocess(spec.replace(spec.values[:, s:s + max_frames]), preprocessor, size).values)
            owner.append(n)
    out = []
    for i in range(0, len(inputs), batch):
        x = torch.from_numpy(np.stack(inputs[i:i + batch]))[:, None]
        out.append(backbone(x).double())
    feats = torch.cat(out).numpy() if out else np.zeros((0, 0))
    owner = np.asarray(owner)
    pooled = np.stack([feats[owner == n].mean(axis=0) for n in range(len(specs))]).astype(np.float32)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(specs))]
    if labels is None:
        labels = np.zeros((len(specs), 0), np.float32)
    return FeatureTable(ids, pooled, np.asarray(labels, np.float32))


# -- metrics ---------------------------------------------------------------------

def top_k_accuracy(scores: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Ties in scores rank the lower class index first."""
    scores = np.asarray(scores)
    C = scores.shape[1]
    if not 1 <= k <= C:
        raise EvalError(f"k={k} outside [1, {C}]")
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return float(np.mean((order == np.asarray(labels)[:, None]).any(axis=1)))


def _includable(labels: np.ndarray):
    pos = labels.sum(axis=0)
    keep = (pos > 0) & (pos < labels.shape[0])
    return np.flatnonzero(keep), np.flatnonzero(~keep)


def roc_auc_binary(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC from average ranks; ties give half credit."""
    from scipy.stats import rankdata

    labels = labels.astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Step-wise AP; all items sharing a score enter at one threshold."""
    labels = np.asarray(labels).astype(bool)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_at = tp[ends]
    precision = tp_at / (ends + 1)
    recall = tp_at / labels.sum()
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def _tagwise(fn, scores, labels, return_excluded):
    scores, labels = np.asarray(scores, float), np.asarray(labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    keep, excluded = _includable(labels)
    if keep.size == 0:
        raise EvalError("no tag has both positive and negative examples")
    value = float(np.mean([fn(scores[:, j], labels[:, j]) for j in keep]))
    return (value, excluded.tolist()) if return_excluded else value


def roc_auc_tagwise(scores, labels, return_excluded: bool = False):
    return _tagwise(roc_auc_binary, scores, labels, return_excluded)


def pr_auc_tagwise(scores, labels, return_excluded: bool = False):
    return _tagwise(average_precision, scores, labels, return_excluded)


# -- probe -------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 1e-3
    weight_decay: float = 0.05
    epochs: int = 50
    warmup_epochs: int = 5
    batch_size: int = 64


class LinearProbe(nn.Module):
    def __init__(self, dim: int, n_out: int, multi_label: bool):
        super().__init__()
        self.fc = nn.Linear(dim, n_out)
        self.multi_label = multi_label

    def forward(self, x):
        return self.fc(x)

    @torch.no_grad()
    def scores(self, features: np.ndarray) -> np.ndarray:
        logits = self.fc(torch.as_tensor(np.asarray(features), dtype=torch.float32))
        return (torch.sigmoid(logits) if self.multi_label else torch.softmax(logits, 1)).numpy()


def _targets(labels: np.ndarray, multi_label: bool) -> np.ndarray:
    return labels.astype(np.float32) if multi_label else labels.argmax(axis=1)


def train_probe(features: np.ndarray, labels: np.ndarray, multi_label: bool,
                cfg: ProbeConfig = ProbeConfig(), seed: int = 0) -> LinearProbe:
    """Single linear layer on frozen features, AdamW with warmup + cosine.

    ``labels`` is one-hot (genre) or multi-hot (tagging), shape ``(N, C)``.
    """
    features = np.asarray(features, np.float32)
    labels = np.asarray(labels)
    if multi_label:
        if not (labels.sum(axis=0) > 0).any():
            raise EvalError("no tag has a positive training example")
    elif len(np.unique(labels.argmax(axis=1))) < 2:
        raise EvalError("linear probe needs at least two classes in the training rows")
    N = features.shape[0]
    g = torch.Generator().manual_seed(seed)
    probe = LinearProbe(features.shape[1], labels.shape[1], multi_label)
    with torch.no_grad():
        probe.fc.weight.copy_(torch.randn(probe.fc.weight.shape, generator=g) * 0.01)
        probe.fc.bias.zero_()
    x = torch.from_numpy(features)
    y = torch.from_numpy(_targets(labels, multi_label))
    loss_fn = nn.BCEWithLogitsLoss() if multi_label else nn.CrossEntropyLoss()
    spe = math.ceil(N / cfg.batch_size)
    total, warmup = cfg.epochs * spe, cfg.warmup_epochs * spe
    params = dict(probe.named_parameters())
    opt = AdamState.zeros_like({k: v.detach() for k, v in params.items()})
    rng = make_rng([seed, 7])
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(N)
        for b in range(spe):
            idx = torch.from_numpy(order[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            probe.zero_grad()
            loss_fn(probe(x[idx]), y[idx]).backward()
            optimizer_step({k: p.data for k, p in params.items()}, {k: p.grad for k, p in params.items()},
                           opt, lr_at(step, total, cfg.lr, warmup), cfg.weight_decay, no_decay)
            step += 1
    probe.eval()
    return probe


def evaluate_scores(scores: np.ndarray, labels: np.ndarray, multi_label: bool) -> Dict[str, float]:
    if multi_label:
        return {"roc_auc": roc_auc_tagwise(scores, labels), "pr_auc": pr_auc_tagwise(scores, labels)}
    y = labels.argmax(axis=1)
    out = {"top1": top_k_accuracy(scores, y, 1)}
    if scores.shape[1] >= 5:
        out["top5"] = top_k_accuracy(scores, y, 5)
    return out


# -- subsets and repeats --------------------------------------------------------------

def subset(labels: np.ndarray, fraction: float, seed: int, multi_label: bool = False) -> np.ndarray:
    """Stratified row indices: ``ceil(fraction * n)`` per bucket, at least one each.

    Buckets are classes for single-label data; for multi-label data a row's
    bucket is its rarest present tag (rows without tags form one bucket).
    """
    if not 0.0 < fraction <= 1.0:
        raise EvalError("fraction must be in (0, 1]")
    labels = np.asarray(labels)
    N = labels.shape[0]
    if fraction == 1.0:
        return np.arange(N)
    if multi_label:
        freq = labels.sum(axis=0)
        masked = np.where(labels > 0, freq[None, :], np.inf)
        bucket = np.where(np.isfinite(masked.min(axis=1)), masked.argmin(axis=1), -1)
    else:
        bucket = labels.argmax(axis=1)
    rng = make_rng([seed, 11])
    chosen = []
    for b in np.unique(bucket):
        rows = np.flatnonzero(bucket == b)
        k = max(1, math.ceil(fraction * rows.size))
        chosen.append(rng.choice(rows, size=k, replace=False))
    return np.sort(np.concatenate(chosen))


@dataclass
class MetricsReport:
    runs: List[Dict[str, float]]
    mean: Dict[str, float] = field(default_factory=dict)
    std: Dict[str, float] = field(default_factory=dict)
    excluded_tags: List[str] = field(default_factory=list)

    @classmethod
    def from_runs(cls, runs, excluded_tags=()):
        keys = runs[0].keys()
        mean = {k: float(np.mean([r[k] for r in runs])) for k in keys}
        std = {k: float(np.std([r[k] for r in runs], ddof=1)) if len(runs) > 1 else 0.0 for k in keys}
        return cls(list(runs), mean, std, list(excluded_tags))

    def to_json(self) -> str:
        return json.dumps({"runs": self.runs, "mean": self.mean, "std": self.std,
                           "excluded_tags": self.excluded_tags}, indent=2, sort_keys=True)

    def to_table(self) -> str:
        keys = list(self.mean)
        lines = [f"{'metric':<10}{'mean':>10}{'std':>10}" + "".join(f"{f'run{i}':>10}" for i in range(len(self.runs)))]
        for k in keys:
            lines.append(f"{k:<10}{self.mean[k]:>10.4f}{self.std[k]:>10.4f}"
                         + "".join(f"{r[k]:>10.4f}" for r in self.runs))
        return "\n".join(lines)


def repeated_eval(train: FeatureTable, test: FeatureTable, n_repeats: int = 5, base_seed: int = 0,
                  cfg: ProbeConfig = ProbeConfig(), fraction: float = 1.0,
                  vocab: Optional[Sequence[str]] = None) -> MetricsReport:
    """Retrain the probe ``n_repeats`` times (seeds ``base_seed + i``) on fixed features."""
    if n_repeats < 1:
        raise EvalError("n_repeats must be >= 1")
    multi = train.multi_label
    runs, excluded = [], []
    for i in range(n_repeats):
        seed = base_seed + i
        tr = train.select(subset(train.labels, fraction, seed, multi)) if fraction < 1.0 else train
        probe = train_probe(tr.features, tr.labels, multi, cfg, seed)
        scores = probe.scores(test.features)
        runs.append(evaluate_scores(scores, test.labels, multi))
    if multi:
        _, ex = _includable(test.labels)
        excluded = [vocab[j] if vocab is not None else str(j) for j in ex]
    return MetricsReport.from_runs(runs, excluded)
