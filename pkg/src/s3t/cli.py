"""Command-line entry point: ``s3t <subcommand> ...``.

Exit codes: 0 success, 1 user error (bad flags, bad inputs), 2 internal error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .audio import CqtConfig, FrontendError, frontend_meta, load_wav, read_spectrogram, \
    spectrogram_from_audio, write_spectrogram
from .augment import AugmentError, augment_pair, make_rng
from .config import PRESETS, load_config
from .data import ManifestError, SyntheticSpec, generate_synthetic, load_manifest, load_spectrograms
from .evaluation import EvalError, FeatureTable, featurize, read_features, repeated_eval, write_features
from .train import load_checkpoint, load_encoder, pretrain

log = logging.getLogger("s3t")

USER_ERRORS = (FrontendError, AugmentError, ManifestError, EvalError, FileNotFoundError, ValueError, KeyError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _config(args):
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = PRESETS[getattr(args, "preset", None) or "full"]()
    return cfg


def cmd_synth(args):
    spec = SyntheticSpec(args.classes, args.per_class, args.duration)
    ds = generate_synthetic(spec, args.out, args.seed)
    print(f"wrote {len(ds)} clips to {args.out} (splits {ds.split_counts()})")


def _inputs(path: Path):
    """(id, wav path) pairs from a directory of WAVs or a manifest CSV."""
    if path.is_dir():
        return [(str(p.relative_to(path).with_suffix("")).replace("/", "__"), p)
                for p in sorted(path.rglob("*.wav"))], None
    ds = load_manifest(path)
    return [(r.id, ds.path(r)) for r in ds.rows], ds


def cmd_featurize(args):
    cfg = CqtConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items, ds = _inputs(Path(args.input))
    specs, ids, failures = [], [], 0
    for rid, wav in items:
        try:
            spec = spectrogram_from_audio(load_wav(wav), cfg, args.compress)
        except (FrontendError, ValueError, OSError) as exc:
            log.error("skipping %s: %s", rid, exc)
            failures += 1
            continue
        write_spectrogram(out / f"{rid}.s3tspec", spec, frontend_meta(wav, cfg, args.compress))
        specs.append(spec)
        ids.append(rid)
    print(f"featurized {len(specs)} clips into {out}")
    if args.ckpt:
        encoder = load_encoder(args.ckpt)
        labels = None
        if ds is not None:
            rows = {r.id: r for r in ds.rows}
            labels = np.stack([ds.label_vector(rows[i]) for i in ids])
        table = featurize(specs, encoder.backbone, args.preprocessor, ids, labels)
        write_features(out / "features.s3tfeat", table)
        print(f"wrote {len(table)} feature rows to {out / 'features.s3tfeat'}")
    if failures:
        print(f"{failures} clip(s) failed", file=sys.stderr)
        return 1
    return 0


def cmd_augment_preview(args):
    cfg = _config(args)
    spec = read_spectrogram(args.input)
    pair = augment_pair(spec, cfg.augment, make_rng(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_spectrogram(out / "query.s3tspec", pair.query)
    write_spectrogram(out / "key.s3tspec", pair.key)
    (out / "provenance.json").write_text(pair.provenance_json(), encoding="utf-8")
    print(f"query {pair.query.values.shape} key {pair.key.values.shape} -> {out}")


def cmd_pretrain(args):
    cfg = _config(args)
    if args.seed is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    if args.epochs is not None:
        cfg.train = replace(cfg.train, epochs=args.epochs,
                            warmup_epochs=min(cfg.train.warmup_epochs, max(0, args.epochs - 1)))
    ds = load_manifest(args.data)
    specs = load_spectrograms(ds, ds.split_rows("train"), cfg.frontend, cfg.compress)
    resume = load_checkpoint(args.resume) if args.resume else None
    out = Path(args.out)

    def emit(rec):
        print(json.dumps(rec), flush=True)

    final = pretrain(specs, cfg.model, cfg.moco, cfg.train, cfg.augment, out, resume, on_step=emit)
    print(f"checkpoint at epoch {final.manifest['epoch']} written to {out / 'last.s3tckpt'}")


def cmd_probe(args):
    cfg = _config(args)
    table = read_features(args.features)
    ds = load_manifest(args.labels, task=args.task, check_paths=False)
    rows = {r.id: r for r in ds.rows}
    missing = [i for i in table.ids if i not in rows]
    if missing:
        raise EvalError(f"{len(missing)} feature ids absent from manifest, e.g. {missing[:3]}")
    labels = np.stack([ds.label_vector(rows[i]) for i in table.ids])
    full = FeatureTable(table.ids, table.features, labels, args.task == "tagging")
    split = np.array([rows[i].split for i in table.ids])
    train, test = full.select(np.flatnonzero(split == "train")), full.select(np.flatnonzero(split == "test"))
    fraction = args.fraction if args.fraction is not None else cfg.fraction
    repeats = args.repeats if args.repeats is not None else cfg.repeats
    report = repeated_eval(train, test, repeats, args.seed, cfg.probe, fraction, ds.vocab)
    print(report.to_table())
    print(report.to_json())
    if args.out:
        Path(args.out).write_text(report.to_json(), encoding="utf-8")


def cmd_inspect(args):
    ckpt = load_checkpoint(args.ckpt)
    manifest = {k: v for k, v in ckpt.manifest.items() if k != "trace"}
    manifest["trace_length"] = len(ckpt.manifest.get("trace", []))
    print(json.dumps(manifest, indent=2, sort_keys=True))
    width = max(len(n) for n in ckpt.tensors)
    print(f"{'tensor':<{width}}  shape")
    for name, t in ckpt.tensors.items():
        print(f"{name:<{width}}  {tuple(t.shape)}")


def cmd_benchmark(args):
    from .benchmark import run_desk_benchmark

    res = run_desk_benchmark(args.out, _config(args), SyntheticSpec(), args.seed, args.repeats)
    print(json.dumps({k: v for k, v in res.items() if k != "loss_trace"}, indent=2))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="s3t", description="Self-supervised Swin-T music representations.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate the synthetic harmonic-tone corpus")
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--per-class", type=int, default=50)
    s.add_argument("--duration", type=float, default=30.0)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("featurize", help="audio -> compressed log-CQT cache (and features with --ckpt)")
    s.add_argument("--in", dest="input", required=True, help="directory of WAVs or manifest CSV")
    s.add_argument("--out", required=True)
    s.add_argument("--compress", type=int, default=100)
    s.add_argument("--ckpt", help="also write features.s3tfeat using this checkpoint's encoder")
    s.add_argument("--preprocessor", choices=("folding", "tiling"), default="folding")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_featurize)

    s = sub.add_parser("augment-preview", help="write one augmented query/key pair")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    s.set_defaults(fn=cmd_augment_preview)

    s = sub.add_parser("pretrain", help="MoCo pretraining on a manifest's train split")
    s.add_argument("--config")
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("probe", help="linear probe on a feature table")
    s.add_argument("--features", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--task", choices=("genre", "tagging"), required=True)
    s.add_argument("--fraction", type=float)
    s.add_argument("--repeats", type=int)
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_probe)

    s = sub.add_parser("inspect-ckpt", help="print a checkpoint's manifest and tensor shapes")
    s.add_argument("ckpt")
    s.set_defaults(fn=cmd_inspect)

    s = sub.add_parser("benchmark", help="desk-scale synthetic pretrain + probe comparison")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_benchmark)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args) or 0
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
