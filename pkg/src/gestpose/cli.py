"""``gestpose`` command line: gen-data, pretrain, train, eval, embed."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import runs
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, apply_preset, seed_from_env
from .data import DatasetManifest, conv_dict, read_dataset, write_dataset, write_manifest
from .errors import ConfigError, GestPoseError, ManifestError, MetricError
from .losses import pca_project, silhouette_score
from .pipeline import evaluate
from .pretrain import embed

SPLITS = ("train", "val", "test")
REPORT_COLUMNS = ("checkpoint", "split", "mpjpe_mm", "mpvpe_mm", "coarse_acc", "fine_acc",
                  "silhouette_coarse", "silhouette_fine")


def _common(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", help="named ablation preset (full, no-pt, no-guidance, ...)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--data-dir")
    p.add_argument("--out-dir")
    p.add_argument("--no-pretrain", action="store_true")
    p.add_argument("--no-guidance", action="store_true")
    p.add_argument("--freeze-encoder", action="store_true")
    p.add_argument("--occlusion-aug", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="gestpose", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "pretrain", "train"):
        _common(sub.add_parser(name))
    sub.choices["train"].add_argument("--stage1", help="stage-1 checkpoint to initialize from")
    for name in ("eval", "embed"):
        p = sub.add_parser(name)
        _common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", default="test", choices=SPLITS)
        p.add_argument("--output", help="output file (default under --out-dir)")
    sub.choices["eval"].add_argument("--oracle", action="store_true",
                                     help="substitute ground truth for predictions")
    return parser


def resolve_config(args, environ=None):
    """Defaults, then config file, preset, --set pairs, flags, and finally $GESTPOSE_SEED."""
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.preset:
        cfg = apply_preset(cfg, args.preset)
    pairs = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        pairs[key.strip()] = value.strip()
    flags = {"seed": args.seed, "data_dir": args.data_dir, "out_dir": args.out_dir}
    pairs.update({k: v for k, v in flags.items() if v is not None})
    for flag in ("no_pretrain", "no_guidance", "freeze_encoder", "occlusion_aug"):
        if getattr(args, flag):
            pairs[flag] = "true"
    cfg = RunConfig.from_dict(pairs, cfg)
    return seed_from_env(cfg, environ)


def _load_splits(cfg, names=SPLITS):
    out = {}
    for name in names:
        path = Path(cfg.data_dir) / f"{name}.jsonl"
        if not path.exists():
            raise FileNotFoundError(f"dataset split {path} not found (run gen-data first)")
        out[name] = read_dataset(path)
    return out


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])


def cmd_gen_data(cfg):
    splits = runs.make_dataset(cfg)
    out = Path(cfg.data_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        write_dataset(splits[name], out / f"{name}.jsonl")
    image, volume = runs.conventions(cfg)
    manifest = DatasetManifest(
        seed=cfg.seed, taxonomy=runs.taxonomy(cfg).to_dict(),
        counts={k: len(v) for k, v in splits.items()}, noise_deg=cfg.noise_deg,
        image_conv=conv_dict(image), volume_conv=conv_dict(volume),
        extra={"occlusion_aug": cfg.occlusion_aug, "max_drop": cfg.max_drop})
    write_manifest(out / "manifest.json", manifest)
    print(" ".join(f"{k}={len(v)}" for k, v in splits.items()))
    return 0


def cmd_pretrain(cfg):
    data = _load_splits(cfg, ("train", "val"))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = runs.run_pretrain(cfg, data["train"], data["val"])
    save_checkpoint(out / "stage1.ckpt", res.arrays, "stage1", cfg.to_dict(),
                    {"format": "float32-le", "best_epoch": res.best_epoch})
    _write_csv(out / "stage1_metrics.csv", runs.PRETRAIN_COLUMNS, res.rows)
    if res.rows:
        last = res.rows[-1]
        print(f"stage1: {len(res.rows)} epochs, best epoch {res.best_epoch}, "
              f"final val coarse acc {last[5]:.3f}")
    else:
        print("stage1: 0 epochs, initial weights saved")
    return 0


def cmd_train(cfg, stage1_path=None):
    data = _load_splits(cfg, ("train", "val"))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage1 = None
    if not cfg.no_pretrain:
        path = stage1_path or cfg.stage1_checkpoint or str(out / "stage1.ckpt")
        if not Path(path).exists():
            raise FileNotFoundError(f"stage-1 checkpoint {path} not found (or pass --no-pretrain)")
        _, stage1 = load_checkpoint(path)
    _, res = runs.run_train(cfg, data["train"], data["val"], stage1)
    save_checkpoint(out / "stage2.ckpt", res.arrays, "stage2", cfg.to_dict(),
                    {"format": "float32-le", "best_epoch": res.best_epoch})
    _write_csv(out / "stage2_metrics.csv", runs.TRAIN_COLUMNS, res.rows)
    if res.rows:
        best = res.rows[res.best_epoch]
        print(f"stage2: {len(res.rows)} epochs, best val MPJPE {best[2]:.3f} mm at epoch {res.best_epoch}")
    else:
        print("stage2: 0 epochs, initial weights saved")
    return 0


def _model_from_checkpoint(path, cfg):
    """Rebuild a network from the config echoed in a checkpoint and load its arrays."""
    manifest, arrays = load_checkpoint(path)
    saved = RunConfig.from_dict(manifest.config, cfg)
    model = runs.build_model(saved)
    missing = [n for n in model.store.names() if n not in arrays]
    if manifest.stage == "stage2" and missing:
        raise ManifestError(f"{path}: stage-2 checkpoint lacks {missing[0]!r}")
    for name, t in model.store.items():
        if name not in arrays:
            continue
        if arrays[name].shape != t.shape:
            raise ManifestError(f"{name}: checkpoint shape {arrays[name].shape}, model expects {t.shape}")
        t.data[...] = arrays[name]
    return manifest, model


def _silhouettes(g, samples):
    """Coarse and fine silhouettes; nan (with a warning) where a split is too small."""
    out = []
    for kind in ("coarse", "fine"):
        labels = np.array([getattr(s, kind) for s in samples])
        try:
            out.append(silhouette_score(g, labels))
        except MetricError as exc:
            print(f"gestpose: warning: {kind} silhouette undefined: {exc}", file=sys.stderr)
            out.append(float("nan"))
    return tuple(out)


def cmd_eval(cfg, checkpoint, split, output=None, oracle=False):
    manifest, model = _model_from_checkpoint(checkpoint, cfg)
    if manifest.stage != "stage2":
        raise ManifestError(f"eval needs a stage2 checkpoint, {checkpoint} is {manifest.stage!r}")
    samples = _load_splits(cfg, (split,))[split]
    ev = evaluate(model, samples, oracle=oracle)
    sc, sf = _silhouettes(ev.g, samples)
    row = (str(checkpoint), split, ev.mpjpe_mm, ev.mpvpe_mm, ev.coarse_acc, ev.fine_acc, sc, sf)
    path = Path(output) if output else Path(cfg.out_dir) / f"eval_{split}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(path, REPORT_COLUMNS, [row])
    print(",".join(REPORT_COLUMNS))
    print(",".join(f"{v:.6f}" if isinstance(v, float) else v for v in row))
    return 0


def cmd_embed(cfg, checkpoint, split, output=None):
    _, model = _model_from_checkpoint(checkpoint, cfg)
    samples = _load_splits(cfg, (split,))[split]
    g, lc, lf = embed(model.encoder, model.heads, samples)
    pcs = pca_project(g, k=2)
    path = Path(output) if output else Path(cfg.out_dir) / f"embed_{split}.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for i, s in enumerate(samples):
            rec = {"index": i, "coarse": int(s.coarse), "fine": int(s.fine),
                   "g": [float(v) for v in g[i]], "logits_coarse": [float(v) for v in lc[i]],
                   "logits_fine": [float(v) for v in lf[i]], "pca": [float(v) for v in pcs[i]]}
            fh.write(json.dumps(rec) + "\n")
    sc, sf = _silhouettes(g, samples)
    print(f"silhouette_coarse={sc:.6f} silhouette_fine={sf:.6f} rows={len(samples)}")
    return 0


def main(argv=None, environ=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args, environ)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.stage1)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.split, args.output, args.oracle)
        return cmd_embed(cfg, args.checkpoint, args.split, args.output)
    except ConfigError as exc:
        print(f"gestpose: config error: {exc}", file=sys.stderr)
        return 2
    except (GestPoseError, OSError, ValueError) as exc:
        print(f"gestpose: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
