"""TOML configuration: one section per stage, every key optional.

Sections and their defaults::

    [frontend]  bins=84 bins_per_octave=12 fmin=32.70 hop=512 sample_rate=22050 compress=100
    [augment]   AugmentConfig fields (crop_ratio, freq_mask_*, time_mask_*, warp_*, shift_*)
    [model]     SwinConfig fields (input_size=256 patch_size=4 embed_dim=96 depths heads window=8 ...)
                plus preprocessor = "folding" | "tiling"
    [moco]      queue_size=65536 momentum=0.999 temperature=0.2 proj_hidden=768 proj_dim=128 symmetric=false
    [train]     epochs=400 warmup_epochs=20 base_lr=0.0005 weight_decay=0.05 batch_size=128 seed=0 ...
    [eval]      lr=0.001 weight_decay=0.05 epochs=50 warmup_epochs=5 batch_size=64 repeats=5 fraction=1.0

``preset = "desk"`` at top level starts from the desk-scale defaults instead.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import tomli

from .audio import CqtConfig
from .augment import AugmentConfig
from .backbone import SwinConfig
from .evaluation import ProbeConfig
from .moco import MoCoConfig
from .train import TrainConfig


@dataclass
class Config:
    frontend: CqtConfig = field(default_factory=CqtConfig)
    compress: int = 100
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: SwinConfig = field(default_factory=SwinConfig)
    moco: MoCoConfig = field(default_factory=MoCoConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    repeats: int = 5
    fraction: float = 1.0


def full_preset() -> Config:
    return Config()


def desk_preset() -> Config:
    """Batch 32, queue 4096, 50 epochs; momentum lowered to 0.99 for the short run."""
    return Config(
        moco=MoCoConfig(queue_size=4096, momentum=0.99),
        train=TrainConfig(epochs=50, warmup_epochs=5, batch_size=32),
    )


PRESETS = {"full": full_preset, "desk": desk_preset}


def _apply(obj, section: dict, where: str):
    names = {f.name for f in fields(obj)}
    unknown = set(section) - names
    if unknown:
        raise ValueError(f"[{where}] unknown keys: {', '.join(sorted(unknown))}")
    updates = {k: tuple(v) if isinstance(v, list) else v for k, v in section.items()}
    return replace(obj, **updates)


def parse_config(data: dict) -> Config:
    data = dict(data)
    cfg = PRESETS[data.pop("preset", "full")]()
    front = dict(data.pop("frontend", {}))
    if "compress" in front:
        cfg.compress = int(front.pop("compress"))
    cfg.frontend = _apply(cfg.frontend, front, "frontend")
    cfg.augment = _apply(cfg.augment, data.pop("augment", {}), "augment")
    model = dict(data.pop("model", {}))
    pre = model.pop("preprocessor", None)
    cfg.model = _apply(cfg.model, model, "model")
    cfg.moco = _apply(cfg.moco, data.pop("moco", {}), "moco")
    train = dict(data.pop("train", {}))
    if pre is not None:
        train["preprocessor"] = pre
    cfg.train = _apply(cfg.train, train, "train")
    ev = dict(data.pop("eval", {}))
    cfg.repeats = int(ev.pop("repeats", cfg.repeats))
    cfg.fraction = float(ev.pop("fraction", cfg.fraction))
    cfg.probe = _apply(cfg.probe, ev, "eval")
    if data:
        raise ValueError(f"unknown config sections: {', '.join(sorted(data))}")
    return cfg


def load_config(path: Optional[str] = None) -> Config:
    if path is None:
        return Config()
    with open(path, "rb") as fh:
        return parse_config(tomli.load(fh))


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def dump_config(cfg: Config) -> str:
    sections = {
        "frontend": {**dataclasses.asdict(cfg.frontend), "compress": cfg.compress},
        "augment": dataclasses.asdict(cfg.augment),
        "model": {**dataclasses.asdict(cfg.model), "preprocessor": cfg.train.preprocessor},
        "moco": dataclasses.asdict(cfg.moco),
        "train": {k: v for k, v in dataclasses.asdict(cfg.train).items() if k != "preprocessor"},
        "eval": {**dataclasses.asdict(cfg.probe), "repeats": cfg.repeats, "fraction": cfg.fraction},
    }
    out = []
    for name, body in sections.items():
        out.append(f"[{name}]")
        out.extend(f"{k} = {_toml_value(v)}" for k, v in body.items())
        out.append("")
    return "\n".join(out)
