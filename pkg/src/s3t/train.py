"""Pretraining loop and the single-file checkpoint container."""
from __future__ import annotations

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .audio import Spectrogram
from .augment import AugmentConfig, augment_pair, make_rng
from .backbone import SwinConfig
from .moco import MoCoConfig, MoCoState, init_state, pretrain_step
from .optim import AdamState, lr_at
from .preproc import preprocess

log = logging.getLogger(__name__)

CKPT_MAGIC = b"S3TCKPT1"
SCHEMA_VERSION = 1

_DTYPES = {0: torch.float32, 1: torch.float64, 2: torch.int64, 3: torch.uint8}
_CODES = {v: k for k, v in _DTYPES.items()}
_NP = {0: "<f4", 1: "<f8", 2: "<i8", 3: "u1"}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    warmup_epochs: int = 20
    base_lr: float = 5e-4
    weight_decay: float = 0.05
    batch_size: int = 128
    seed: int = 0
    schedule: str = "cosine"
    microbatch: int = 8
    checkpoint_every: int = 0
    preprocessor: str = "folding"

    def __post_init__(self):
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.schedule != "cosine":
            raise ValueError(f"unsupported schedule {self.schedule!r}")


# -- checkpoint container -----------------------------------------------------

@dataclass
class Checkpoint:
    manifest: dict
    tensors: Dict[str, torch.Tensor] = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    meta = json.dumps(ckpt.manifest, sort_keys=True).encode("utf-8")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(ckpt.tensors)))
        for name, t in ckpt.tensors.items():
            t = t.detach().cpu().contiguous()
            if t.dtype not in _CODES:
                raise TypeError(f"unsupported tensor dtype {t.dtype} for {name}")
            code = _CODES[t.dtype]
            bname = name.encode("utf-8")
            fh.write(struct.pack("<I", len(bname)))
            fh.write(bname)
            fh.write(struct.pack("<BI", code, t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(t.numpy().astype(_NP[code], copy=False).tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an S3T checkpoint")
    (n,) = struct.unpack_from("<Q", raw, 8)
    off = 16
    manifest = json.loads(raw[off:off + n].decode("utf-8"))
    off += n
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + ln].decode("utf-8")
        off += ln
        code, rank = struct.unpack_from("<BI", raw, off)
        off += 5
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        dt = np.dtype(_NP[code])
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype=dt, count=size, offset=off).reshape(dims).copy()
        off += size * dt.itemsize
        tensors[name] = torch.from_numpy(arr)
    return Checkpoint(manifest, tensors)


def checkpoint_from_state(state: MoCoState, configs: dict, epoch: int, trace: List[dict]) -> Checkpoint:
    tensors = {}
    for name, p in state.query_params().items():
        tensors[f"query.{name}"] = p.detach().clone()
    for name, p in state.key_params().items():
        tensors[f"key.{name}"] = p.detach().clone()
    for name, t in state.optimizer.exp_avg.items():
        tensors[f"opt.exp_avg.{name}"] = t.clone()
    for name, t in state.optimizer.exp_avg_sq.items():
        tensors[f"opt.exp_avg_sq.{name}"] = t.clone()
    tensors["queue"] = state.queue.clone()
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": configs,
        "epoch": epoch,
        "step": state.steps,
        "queue_ptr": state.queue_ptr,
        "keys_seen": state.keys_seen,
        "optimizer_step": state.optimizer.step,
        "rng": {"algorithm": "PCG64 keyed by (seed, epoch, step, sample)", "seed": configs["train"]["seed"]},
        "trace": trace,
    }
    return Checkpoint(manifest, tensors)


def state_from_checkpoint(ckpt: Checkpoint) -> MoCoState:
    swin, moco, _ = configs_from_manifest(ckpt.manifest)
    state = init_state(swin, moco, seed=0)
    _load_into(state.query_params(), ckpt.tensors, "query.")
    _load_into(state.key_params(), ckpt.tensors, "key.")
    opt = AdamState(ckpt.manifest["optimizer_step"])
    for name in state.query_params():
        opt.exp_avg[name] = ckpt.tensors[f"opt.exp_avg.{name}"].clone()
        opt.exp_avg_sq[name] = ckpt.tensors[f"opt.exp_avg_sq.{name}"].clone()
    state.optimizer = opt
    state.queue = ckpt.tensors["queue"].clone()
    state.queue_ptr = ckpt.manifest["queue_ptr"]
    state.keys_seen = ckpt.manifest["keys_seen"]
    state.steps = ckpt.manifest["step"]
    return state


def _load_into(params, tensors, prefix):
    with torch.no_grad():
        for name, p in params.items():
            key = prefix + name
            if key not in tensors:
                raise KeyError(f"checkpoint is missing tensor {key!r}")
            if tuple(tensors[key].shape) != tuple(p.shape):
                raise ValueError(f"shape mismatch for {key}: {tuple(tensors[key].shape)} vs {tuple(p.shape)}")
            p.copy_(tensors[key])


def configs_to_dict(swin: SwinConfig, moco: MoCoConfig, train: TrainConfig, augment: AugmentConfig) -> dict:
    snapshot = {
        "model": dataclasses.asdict(swin),
        "moco": dataclasses.asdict(moco),
        "train": dataclasses.asdict(train),
        "augment": dataclasses.asdict(augment),
    }
    return json.loads(json.dumps(snapshot))


def configs_from_manifest(manifest: dict):
    c = manifest["config"]
    return SwinConfig(**c["model"]), MoCoConfig(**c["moco"]), TrainConfig(**c["train"])


def load_encoder(path):
    """Query encoder of a checkpoint, in eval mode."""
    state = state_from_checkpoint(load_checkpoint(path))
    state.query.eval()
    return state.query


# -- loop -----------------------------------------------------------------------

def make_batch(specs: Sequence[Spectrogram], indices, aug: AugmentConfig, seed: int, epoch: int, step: int,
               preprocessor: str, size: int):
    xq, xk = [], []
    for i in indices:
        pair = augment_pair(specs[i], aug, make_rng([seed, epoch, step, int(i)]))
        xq.append(preprocess(pair.query, preprocessor, size).values)
        xk.append(preprocess(pair.key, preprocessor, size).values)
    return (torch.from_numpy(np.stack(xq))[:, None], torch.from_numpy(np.stack(xk))[:, None])


def pretrain(specs: Sequence[Spectrogram], swin: SwinConfig, moco: MoCoConfig, cfg: TrainConfig,
             aug: AugmentConfig = AugmentConfig(), out_dir=None, resume: Optional[Checkpoint] = None,
             stop_after_epoch: Optional[int] = None,
             on_step: Optional[Callable[[dict], None]] = None) -> Checkpoint:
    """Run MoCo pretraining and return the final checkpoint.

    Batches are drawn without replacement, dropping the incomplete tail. All
    randomness is keyed on ``(seed, epoch, step, sample)``, so a resumed run
    replays the uninterrupted one exactly. ``stop_after_epoch`` ends the run
    early (used to produce resumable intermediate checkpoints).
    """
    if not specs:
        raise ValueError("pretraining dataset is empty")
    configs = configs_to_dict(swin, moco, cfg, aug)
    spe = len(specs) // cfg.batch_size
    if spe == 0:
        raise ValueError(f"dataset of {len(specs)} clips is smaller than one batch of {cfg.batch_size}")
    if moco.queue_size % cfg.batch_size:
        raise ValueError("batch size must divide queue size")
    total = cfg.epochs * spe
    warmup = cfg.warmup_epochs * spe
    if resume is not None:
        if resume.manifest.get("schema_version") != SCHEMA_VERSION:
            raise ValueError("checkpoint schema version mismatch")
        if resume.manifest["config"]["model"] != configs["model"] or \
                resume.manifest["config"]["moco"] != configs["moco"]:
            raise ValueError("checkpoint model/moco config differs from the requested run")
        state = state_from_checkpoint(resume)
        start_epoch = resume.manifest["epoch"]
        trace = list(resume.manifest["trace"])
    else:
        state = init_state(swin, moco, cfg.seed)
        start_epoch = 0
        trace = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    last = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)
    for epoch in range(start_epoch, last):
        order = make_rng([cfg.seed, epoch]).permutation(len(specs))
        for b in range(spe):
            step = epoch * spe + b
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            xq, xk = make_batch(specs, idx, aug, cfg.seed, epoch, step, cfg.preprocessor, swin.input_size)
            gen = torch.Generator().manual_seed(cfg.seed * 1_000_003 + step)
            diag = pretrain_step(state, xq, xk, lr_at(step, total, cfg.base_lr, warmup),
                                 cfg.weight_decay, gen, cfg.microbatch)
            rec = {"step": step, "epoch": epoch, **diag}
            trace.append(rec)
            log.info("step %d epoch %d loss %.5f pos %.4f lr %.3g", step, epoch, diag["loss"],
                     diag["pos_logit_mean"], diag["lr"])
            if on_step:
                on_step(rec)
        done = epoch + 1
        if out_dir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"ckpt_epoch{done:04d}.s3tckpt",
                            checkpoint_from_state(state, configs, done, trace))
    final = checkpoint_from_state(state, configs, max(start_epoch, last), trace)
    if out_dir is not None:
        save_checkpoint(out_dir / "last.s3tckpt", final)
        with open(out_dir / "trace.jsonl", "w", encoding="utf-8") as fh:
            for rec in trace:
                fh.write(json.dumps(rec) + "\n")
    return final
