"""Desk-scale end-to-end run: synthetic corpus -> pretrain -> frozen features -> probes.

The random-init baseline uses the exact initial weights the pretraining run starts from.
An existing ``run/last.s3tckpt`` in the work directory is resumed, so a finished run
is not repeated.
"""
from __future__ import annotations

import json
import logging
import math
import time
from pathlib import Path
from typing import Optional

import numpy as np

from .config import Config, desk_preset
from .data import SyntheticSpec, generate_synthetic, load_manifest, load_spectrograms
from .evaluation import featurize, repeated_eval
from .moco import init_state
from .train import load_checkpoint, pretrain, state_from_checkpoint

log = logging.getLogger(__name__)


def _tables(ds, specs, backbone, preprocessor):
    labels = np.stack([ds.label_vector(r) for r in ds.rows])
    ft = featurize(specs, backbone, preprocessor, [r.id for r in ds.rows], labels)
    split = np.array([r.split for r in ds.rows])
    return ft.select(np.flatnonzero(split == "train")), ft.select(np.flatnonzero(split == "test"))


def run_desk_benchmark(workdir, cfg: Optional[Config] = None, synth: SyntheticSpec = SyntheticSpec(),
                       seed: int = 0, repeats: int = 5) -> dict:
    cfg = cfg or desk_preset()
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    manifest = work / "corpus" / "manifest.csv"
    if not manifest.exists():
        generate_synthetic(synth, work / "corpus", seed)
    ds = load_manifest(manifest, task="genre")
    specs = load_spectrograms(ds, ds.rows, cfg.frontend, cfg.compress, work / "cache")
    train_specs = [s for s, r in zip(specs, ds.rows) if r.split == "train"]
    log.info("corpus ready: %d clips (%d train) in %.0fs", len(specs), len(train_specs), time.time() - t0)

    last = work / "run" / "last.s3tckpt"
    resume = load_checkpoint(last) if last.exists() else None
    final = pretrain(train_specs, cfg.model, cfg.moco, cfg.train, cfg.augment, out_dir=work / "run",
                     resume=resume)
    trace = [rec["loss"] for rec in final.manifest["trace"]]
    spe = len(train_specs) // cfg.train.batch_size
    initial = init_state(cfg.model, cfg.moco, cfg.train.seed).query
    pretrained = state_from_checkpoint(final).query

    pre = cfg.train.preprocessor
    rnd_train, rnd_test = _tables(ds, specs, initial.backbone, pre)
    s3t_train, s3t_test = _tables(ds, specs, pretrained.backbone, pre)
    rnd = repeated_eval(rnd_train, rnd_test, repeats, seed, cfg.probe)
    s3t = repeated_eval(s3t_train, s3t_test, repeats, seed, cfg.probe)
    ref = math.log(cfg.moco.queue_size + 1)
    result = {
        "ln_K_plus_1": ref,
        "first_epoch_loss": float(np.mean(trace[:spe])),
        "last_epoch_loss": float(np.mean(trace[-spe:])),
        "loss_trace": trace,
        "random_init": {"mean": rnd.mean, "std": rnd.std, "runs": rnd.runs},
        "s3t": {"mean": s3t.mean, "std": s3t.std, "runs": s3t.runs},
        "seconds": time.time() - t0,
    }
    (work / "benchmark.json").write_text(json.dumps(result, indent=2), encoding="utf-8")
    return result
