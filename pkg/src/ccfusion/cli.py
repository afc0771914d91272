"""Command line: train, fuse, fuse-medical, evaluate, mask-gen and two utility commands.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import pickle
import sys
import warnings
from pathlib import Path

import yaml

from ccfusion.errors import ConfigError, DataError, FusionError, MetricError
from ccfusion.imagecore import (
    DegenerateMaskWarning,
    ImagePlane,
    atomic_write,
    list_images,
    load_color,
    load_grayscale,
    save_mask,
    save_plane,
    save_rgb,
    save_ycbcr_planes,
    threshold_saliency_mask,
)
from ccfusion.inference import fuse_medical, fuse_planes, load_for_inference
from ccfusion.metrics import evaluate_triple, reports_to_csv
from ccfusion.trainer import Trainer, TrainConfig, load_corpus, run_two_stage, set_deterministic

log = logging.getLogger("ccfusion")

EXIT_OK = 0

TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
PATH_KEYS = ("corpus_dir", "mask_dir", "weights", "out_dir")
FLAG_KEYS = ("disable_ca", "disable_backbone_taps", "stage1_only")


# --------------------------------------------------------------------------- run config


@dataclasses.dataclass
class RunConfig:
    train: TrainConfig
    corpus_dir: Path
    out_dir: Path
    mask_dir: Path | None = None
    weights: str = "deterministic"
    stage1_only: bool = False

    @property
    def stage2_enabled(self):
        return not self.stage1_only and self.train.stage2_epochs > 0 and self.train.max_steps_stage2 != 0

    def validate_paths(self):
        ivif = self.train.mode == "ivif"
        subdirs = ("ir", "vis") if ivif else ("mri", "fun")
        if not self.corpus_dir.is_dir():
            raise ConfigError(f"corpus_dir does not exist: {self.corpus_dir}")
        for sub in subdirs:
            if not (self.corpus_dir / sub).is_dir():
                raise ConfigError(f"corpus_dir lacks the {sub}/ folder: {self.corpus_dir / sub}")
        if self.stage2_enabled:
            if self.mask_dir is None:
                raise ConfigError("stage 2 is enabled but no mask_dir is configured")
            if not self.mask_dir.is_dir():
                raise ConfigError(f"mask_dir does not exist: {self.mask_dir}")
        elif self.mask_dir is not None and not self.mask_dir.is_dir():
            raise ConfigError(f"mask_dir does not exist: {self.mask_dir}")
        if self.weights != "deterministic" and not Path(self.weights).is_file():
            raise ConfigError(f"backbone weights file does not exist: {self.weights}")
        if self.out_dir.exists() and not self.out_dir.is_dir():
            raise ConfigError(f"out_dir is not a directory: {self.out_dir}")


def read_config_file(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = sorted(set(data) - TRAIN_KEYS - set(PATH_KEYS) - set(FLAG_KEYS))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {', '.join(unknown)}")
    return data


def build_run_config(args):
    """Merge defaults, the config file and command-line flags (flags win)."""
    data = read_config_file(args.config) if args.config else {}
    base = Path(args.config).parent if args.config else Path.cwd()
    if args.seed is not None:
        data["seed"] = args.seed
    if args.deterministic:
        data["deterministic"] = True
    for key in FLAG_KEYS:
        if getattr(args, key):
            data[key] = True
    for key in ("corpus_dir", "mask_dir", "out_dir", "weights"):
        val = getattr(args, key, None)
        if val is not None:
            data[key] = val

    train_kw = {k: v for k, v in data.items() if k in TRAIN_KEYS}
    if data.get("disable_ca"):
        train_kw["use_ca"] = False
    if data.get("disable_backbone_taps"):
        train_kw["use_backbone_taps"] = False
    try:
        train = TrainConfig(**train_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training settings: {exc}") from exc

    def path(key):
        val = data.get(key)
        if val is None:
            return None
        p = Path(val)
        return p if p.is_absolute() else base / p

    if data.get("corpus_dir") is None:
        raise ConfigError("corpus_dir is required (config key or --corpus-dir)")
    weights = data.get("weights", "deterministic")
    if str(weights) != "deterministic":
        weights = str(path("weights"))
    return RunConfig(
        train=train,
        corpus_dir=path("corpus_dir"),
        out_dir=path("out_dir") or Path("runs") / "latest",
        mask_dir=path("mask_dir"),
        weights=str(weights),
        stage1_only=bool(data.get("stage1_only", False)),
    )


# --------------------------------------------------------------------------- commands


def cmd_train(args):
    from ccfusion.backbone import load_backbone
    from ccfusion.network import build_model

    run = build_run_config(args)
    run.validate_paths()
    cfg = run.train
    if cfg.deterministic:
        set_deterministic(cfg.seed)
    corpus = load_corpus(run.corpus_dir, cfg.mode, run.mask_dir)
    if not corpus:
        raise DataError(f"no image pairs found under {run.corpus_dir}")
    backbone = load_backbone(run.weights, seed=cfg.seed) if run.weights == "deterministic" else load_backbone(run.weights)
    model = build_model(cfg.seed, use_ca=cfg.use_ca, use_backbone_taps=cfg.use_backbone_taps)
    trainer = Trainer(model, backbone, cfg, out_dir=run.out_dir)
    run_two_stage(trainer, corpus, stage1_only=run.stage1_only)
    summary = {
        "steps": trainer.step,
        "contrastive_calls": backbone.contrastive_calls,
        "checkpoint": str(run.out_dir / "latest.ckpt"),
        "pairs": len(corpus),
    }
    text = json.dumps({"config": cfg.to_dict(), **summary}, indent=2, sort_keys=True)
    atomic_write(run.out_dir / "run.json", lambda tmp: Path(tmp).write_text(text))
    print(f"trained {trainer.step} steps on {len(corpus)} pairs -> {summary['checkpoint']}")
    return EXIT_OK


def _pairs_from_dirs(dir_a, dir_b):
    a = {p.stem: p for p in list_images(dir_a)}
    b = {p.stem: p for p in list_images(dir_b)}
    missing = sorted(set(a) ^ set(b))
    if missing:
        raise DataError(f"unmatched files between {dir_a} and {dir_b}: {', '.join(missing)}")
    if not a:
        raise DataError(f"no images in {dir_a}")
    return [(stem, a[stem], b[stem]) for stem in sorted(a)]


def _output_name(src, out_dir):
    suffix = src.suffix.lower() if src.suffix.lower() in (".png", ".tif", ".tiff") else ".png"
    return Path(out_dir) / f"{src.stem}{suffix}"


def cmd_fuse(args):
    ir_path, vis_path, out = Path(args.ir), Path(args.vis), Path(args.out)
    if ir_path.is_dir() != vis_path.is_dir():
        raise ConfigError("--ir and --vis must both be files or both be directories")
    model, backbone = load_for_inference(args.checkpoint, args.weights)
    if ir_path.is_dir():
        jobs = [(i, v, _output_name(i, out)) for _, i, v in _pairs_from_dirs(ir_path, vis_path)]
    else:
        jobs = [(ir_path, vis_path, out)]
    for i, v, o in jobs:
        fused = fuse_planes(model, backbone, load_grayscale(i), load_grayscale(v))
        save_plane(o, ImagePlane(fused.astype(float), "unit8"))
        print(f"fused {i.name} -> {o}")
    return EXIT_OK


def companion_path(out):
    out = Path(out)
    return out.with_name(f"{out.stem}_ycbcr.tiff")


def cmd_fuse_medical(args):
    model, backbone = load_for_inference(args.checkpoint, args.weights)
    mri = load_grayscale(args.mri)
    functional = load_color(args.functional)
    result = fuse_medical(model, backbone, mri, functional)
    out = Path(args.out)
    if result.rgb is None:
        save_plane(out, ImagePlane(result.y.astype(float), "unit8"))
        print(f"fused grayscale -> {out}")
        return EXIT_OK
    # planes first: the RGB file appearing last marks a complete result
    save_ycbcr_planes(companion_path(out), [result.y, result.cb, result.cr])
    save_rgb(out, result.rgb)
    print(f"fused color -> {out} (planes: {companion_path(out)})")
    return EXIT_OK


def _read_triple_list(path):
    triples = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) not in (3, 4):
            raise ConfigError(f"{path}:{n}: expected 'vis,ir,fused' or 'id,vis,ir,fused'")
        if len(parts) == 3:
            parts = [Path(parts[2]).stem] + parts
        triples.append((parts[0], Path(parts[1]), Path(parts[2]), Path(parts[3])))
    return triples


def collect_triples(args):
    if args.triples:
        if any((args.vis, args.ir, args.fused)):
            raise ConfigError("use either --triples or --vis/--ir/--fused, not both")
        return _read_triple_list(args.triples)
    if not all((args.vis, args.ir, args.fused)):
        raise ConfigError("evaluate needs --triples or all of --vis, --ir, --fused")
    for d in (args.vis, args.ir, args.fused):
        if not Path(d).is_dir():
            raise ConfigError(f"not a directory: {d}")
    vis = {p.stem: p for p in list_images(args.vis)}
    ir = {p.stem: p for p in list_images(args.ir)}
    out = []
    for f in list_images(args.fused):
        if f.stem not in vis or f.stem not in ir:
            raise DataError(f"fused image {f.name} has no matching source pair")
        out.append((f.stem, vis[f.stem], ir[f.stem], f))
    if not out:
        raise DataError(f"no fused images in {args.fused}")
    return out


def cmd_evaluate(args):
    rows = []
    for pair_id, v, r, f in collect_triples(args):
        planes = [load_grayscale(p) for p in (v, r, f)]
        try:
            rows.append((pair_id, evaluate_triple(*planes)))
        except MetricError as exc:
            print(f"warning: {pair_id}: {exc.metric} undefined ({exc})", file=sys.stderr)
            rows.append((pair_id, exc))
    text = reports_to_csv(rows)
    atomic_write(args.out, lambda tmp: Path(tmp).write_text(text, encoding="utf-8"))
    print(f"evaluated {len(rows)} triples -> {args.out}")
    return EXIT_OK


def cmd_mask_gen(args):
    if not 0.0 <= args.quantile < 1.0:
        raise ConfigError(f"--quantile must lie in [0, 1), got {args.quantile}")
    src = Path(args.ir_dir)
    if not src.is_dir():
        raise ConfigError(f"not a directory: {src}")
    images = list_images(src)
    if not images:
        raise DataError(f"no images in {src}")
    for p in images:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", DegenerateMaskWarning)
            mask = threshold_saliency_mask(load_grayscale(p), args.quantile, args.largest_component)
        for w in caught:
            print(f"warning: {p.name}: {w.message}", file=sys.stderr)
        save_mask(_output_name(p, args.out), mask)
    print(f"wrote {len(images)} masks -> {args.out}")
    return EXIT_OK


def cmd_convert_vgg19(args):
    from ccfusion.backbone import convert_torchvision_vgg19

    if not Path(args.src).is_file():
        raise ConfigError(f"source state dict not found: {args.src}")
    convert_torchvision_vgg19(args.src, args.dst)
    print(f"wrote backbone weights -> {args.dst}")
    return EXIT_OK


def cmd_make_toy_corpus(args):
    from ccfusion.toy import make_pairs, write_corpus

    write_corpus(args.out, make_pairs(args.count, args.size, args.seed))
    print(f"wrote {args.count} toy pairs -> {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser():
    parser = argparse.ArgumentParser(prog="ccfusion", description="Infrared/visible and medical image fusion.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="two-stage training")
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--stage1-only", dest="stage1_only", action="store_true")
    p.add_argument("--disable-ca", dest="disable_ca", action="store_true")
    p.add_argument("--disable-backbone-taps", dest="disable_backbone_taps", action="store_true")
    p.add_argument("--corpus-dir", dest="corpus_dir")
    p.add_argument("--mask-dir", dest="mask_dir")
    p.add_argument("--weights", help="backbone weights container, or 'deterministic'")
    p.add_argument("--out", dest="out_dir", help="output directory for checkpoints and logs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fuse", help="fuse a pair or two folders of pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ir", required=True)
    p.add_argument("--vis", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--weights", help="override the backbone recorded in the checkpoint")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("fuse-medical", help="fuse an MRI with a PET/SPECT image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mri", required=True)
    p.add_argument("--functional", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--weights")
    p.set_defaults(func=cmd_fuse_medical)

    p = sub.add_parser("evaluate", help="metric table for fused results")
    p.add_argument("--triples", help="text file of 'vis,ir,fused' or 'id,vis,ir,fused' lines")
    p.add_argument("--vis")
    p.add_argument("--ir")
    p.add_argument("--fused")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("mask-gen", help="threshold infrared images into saliency masks")
    p.add_argument("ir_dir")
    p.add_argument("--quantile", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--largest-component", action="store_true")
    p.set_defaults(func=cmd_mask_gen)

    p = sub.add_parser("convert-vgg19", help="repack a torchvision vgg19 state dict")
    p.add_argument("src")
    p.add_argument("dst")
    p.set_defaults(func=cmd_convert_vgg19)

    p = sub.add_parser("make-toy-corpus", help="write synthetic infrared/visible pairs with masks")
    p.add_argument("out")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_toy_corpus)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except FusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, pickle.UnpicklingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
