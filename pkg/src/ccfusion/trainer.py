"""Two-stage training: adaptive pixel loss first, then fine-tuning with contrastive terms."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ccfusion.adaptive_weights import AdaptiveWeights, image_statistics, is_degenerate
from ccfusion.errors import CheckpointError, ConfigError, DataError, NonFiniteLossError
from ccfusion.imagecore import (
    ImagePlane,
    SourcePair,
    atomic_write,
    crop_patches,
    list_images,
    load_color,
    load_grayscale,
    load_mask,
    normalize,
    rgb_to_ycbcr,
)
from ccfusion.losses import DEFAULT_LAYER_WEIGHTS, total_loss
from ccfusion.network import FusionNet, count_parameters
from ccfusion.store import read_container, write_container

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1
MODES = ("ivif", "medical")


class DegenerateSamplingWarning(UserWarning):
    pass


@dataclass
class TrainConfig:
    patch_size: int = 64
    patch_count: int = 1410
    batch_size: int = 30
    stage2_batch_size: int | None = None
    learning_rate: float = 1e-4
    alpha: float = 20.0
    stage1_epochs: int = 10
    stage2_epochs: int = 5
    negatives: int = 3
    seed: int = 0
    mode: str = "ivif"
    layer_weights: tuple = DEFAULT_LAYER_WEIGHTS
    grad_clip: float | None = 5.0
    max_steps_stage1: int | None = None
    max_steps_stage2: int | None = None
    alternations: int = 1
    use_ca: bool = True
    use_backbone_taps: bool = True
    deterministic: bool = True

    def __post_init__(self):
        self.layer_weights = tuple(float(w) for w in self.layer_weights)
        self.validate()

    def validate(self):
        for name in ("patch_size", "patch_count", "batch_size", "negatives", "alternations"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("stage1_epochs", "stage2_epochs"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.stage2_batch_size is not None and self.stage2_batch_size < 1:
            raise ConfigError("stage2_batch_size must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if any(w < 0 for w in self.layer_weights):
            raise ConfigError("layer_weights must be non-negative")
        if len(self.layer_weights) != 5:
            raise ConfigError("layer_weights needs one entry per contrastive tap (5)")

    @classmethod
    def medical(cls, functional="pet", **overrides):
        """Presets for MRI-PET / MRI-SPECT training: 3 epochs at batch 30, 1 fine-tune epoch at batch 10."""
        counts = {"pet": 2662, "spect": 4114}
        if functional not in counts:
            raise ConfigError(f"functional modality must be 'pet' or 'spect', got {functional!r}")
        base = dict(
            mode="medical",
            patch_count=counts[functional],
            batch_size=30,
            stage2_batch_size=10,
            stage1_epochs=3,
            stage2_epochs=1,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["layer_weights"] = list(self.layer_weights)
        return d

    def batch_size_for(self, stage):
        if stage == 2 and self.stage2_batch_size is not None:
            return self.stage2_batch_size
        return self.batch_size


@dataclass(frozen=True)
class ContrastiveSample:
    """Patch index of the positive and the patch indices of its negatives (first co-located)."""

    index: int
    negatives: tuple


def build_contrastive_samples(patchset, negatives, seed):
    """One sample per patch: the co-located opposite-modality patch plus ``negatives - 1``
    patches drawn from other source pairs."""
    n = len(patchset)
    rng = np.random.default_rng(seed)
    pair_idx = patchset.pair_index
    single_pair = len(np.unique(pair_idx)) < 2
    if single_pair and negatives > 1:
        warnings.warn(
            "corpus has a single source pair: extra negatives are resampled from the same pair",
            DegenerateSamplingWarning,
            stacklevel=2,
        )
    samples = []
    for k in range(n):
        extra = []
        if negatives > 1:
            if single_pair:
                extra = rng.choice(n, size=negatives - 1, replace=True)
            else:
                pool = np.flatnonzero(pair_idx != pair_idx[k])
                extra = rng.choice(pool, size=negatives - 1, replace=len(pool) < negatives - 1)
        samples.append(ContrastiveSample(k, (k, *[int(e) for e in extra])))
    return samples


def signed(arr, range_tag="unit8"):
    lo, hi = {"unit8": (0.0, 255.0), "unit": (0.0, 1.0), "signed": (-1.0, 1.0)}[range_tag]
    return (np.asarray(arr, dtype=np.float64) - lo) * (2.0 / (hi - lo)) - 1.0


def patch_weights(patchset, pairs):
    """Per-patch adaptive weights; flat patch pairs fall back to their full source pair."""
    pair_w = []
    for p in pairs:
        sv = image_statistics(normalize(p.vis, "signed"))
        sr = image_statistics(normalize(p.ir, "signed"))
        pair_w.append(AdaptiveWeights.from_statistics(sv[0], sr[0], sv[1], sr[1]))
    out = np.empty((len(patchset), 4))
    fallback = 0
    for k in range(len(patchset)):
        sv = image_statistics(ImagePlane(signed(patchset.vis[k], patchset.range_tag), "signed"))
        sr = image_statistics(ImagePlane(signed(patchset.ir[k], patchset.range_tag), "signed"))
        if is_degenerate(sv, sr):
            out[k] = pair_w[patchset.pair_index[k]].as_tuple()
            fallback += 1
        else:
            out[k] = AdaptiveWeights.from_statistics(sv[0], sr[0], sv[1], sr[1]).as_tuple()
    if fallback:
        log.info("%d flat patches use source-pair weights", fallback)
    return out


def corpus_hash(pairs):
    h = hashlib.sha256()
    for p in pairs:
        h.update(p.name.encode())
        for arr in (p.ir.pixels, p.vis.pixels) + ((p.mask.m,) if p.mask is not None else ()):
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def set_deterministic(seed):
    torch.manual_seed(int(seed))
    torch.use_deterministic_algorithms(True, warn_only=True)


LOG_WEIGHT_COLUMNS = ("sigma_a", "sigma_b", "gamma_a", "gamma_b")


def log_columns(mode):
    pair = ("l_mri", "l_fun") if mode == "medical" else ("l_ir", "l_vis")
    return ("step", "l_s", "l_n", "l_p", *pair, "l_total", *LOG_WEIGHT_COLUMNS)


def _write_csv(path, columns, rows):
    def write(tmp):
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([row[c] if c == "step" else repr(float(row[c])) for c in columns])

    atomic_write(path, write)


def write_training_log(path, rows, mode="ivif"):
    _write_csv(path, log_columns(mode), rows)


def write_weight_trace(path, rows):
    _write_csv(path, ("step", *LOG_WEIGHT_COLUMNS), rows)


# --------------------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model: FusionNet
    optimizer_state: dict | None
    step: int
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, model, optimizer=None, step=0, meta=None, version=None):
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    groups = None
    if optimizer is not None:
        state = optimizer.state_dict()
        for pid, pstate in state["state"].items():
            for key, val in pstate.items():
                tensors[f"optim.{pid}.{key}"] = val if torch.is_tensor(val) else torch.tensor(val)
        groups = state["param_groups"]
    info = {
        "schema": CHECKPOINT_SCHEMA,
        "step": int(step),
        "model_config": model.config,
        "param_count": count_parameters(model),
        "param_groups": groups,
        **(meta or {}),
    }
    kwargs = {} if version is None else {"version": version}
    write_container(path, tensors, kind="checkpoint", meta=info, **kwargs)


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    tensors, meta = read_container(path, kind="checkpoint")
    model = FusionNet(**meta.get("model_config", {}))
    state = {k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not fit the recorded architecture ({exc})") from exc
    opt_state = None
    if meta.get("param_groups") is not None:
        per_param = {}
        for k, v in tensors.items():
            if k.startswith("optim."):
                _, pid, key = k.split(".", 2)
                per_param.setdefault(int(pid), {})[key] = v
        opt_state = {"state": per_param, "param_groups": meta["param_groups"]}
    return Checkpoint(model, opt_state, int(meta.get("step", 0)), meta)


# --------------------------------------------------------------------------- training


class Trainer:
    """Owns the model, frozen backbone, Adam state and step counter across both stages."""

    def __init__(self, model, backbone, cfg: TrainConfig, optimizer_state=None, step=0, out_dir=None):
        self.model = model
        self.backbone = backbone
        self.cfg = cfg
        self.optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        if optimizer_state is not None:
            self.optimizer.load_state_dict(optimizer_state)
        self.step = int(step)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.log_rows = []
        self.corpus_digest = None

    @classmethod
    def from_checkpoint(cls, path, backbone, cfg, out_dir=None):
        ck = load_checkpoint(path)
        return cls(ck.model, backbone, cfg, ck.optimizer_state, ck.step, out_dir)

    def _dtype(self):
        return next(self.model.parameters()).dtype

    def _tensor(self, arr, range_tag):
        return torch.from_numpy(signed(arr, range_tag)).to(self._dtype())[:, None]

    def run_stage(self, pairs, stage):
        cfg = self.cfg
        pairs = list(pairs)
        if not pairs:
            raise DataError("training corpus is empty")
        if stage == 2:
            for p in pairs:
                if p.mask is None:
                    raise DataError(f"pair {p.name!r} has no saliency mask; stage 2 needs masks for every pair")
        epochs = cfg.stage1_epochs if stage == 1 else cfg.stage2_epochs
        max_steps = cfg.max_steps_stage1 if stage == 1 else cfg.max_steps_stage2
        if epochs == 0 or max_steps == 0:
            return []
        self.corpus_digest = corpus_hash(pairs)
        patches = crop_patches(pairs, cfg.patch_size, cfg.patch_count, cfg.seed)
        weights = patch_weights(patches, pairs)
        samples = build_contrastive_samples(patches, cfg.negatives, cfg.seed + 1) if stage == 2 else None
        bs = cfg.batch_size_for(stage)
        steps_per_epoch = math.ceil(len(patches) / bs)
        if max_steps is not None:
            epochs = min(epochs, math.ceil(max_steps / steps_per_epoch))
        rows = []
        done = 0
        self.model.train()
        for epoch in range(epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(patches))
            for k in range(steps_per_epoch):
                if max_steps is not None and done >= max_steps:
                    break
                idx = order[k * bs : (k + 1) * bs]
                rows.append(self._step(patches, weights, samples, idx, stage))
                done += 1
            self._checkpoint(stage, epoch)
        self.log_rows.extend(rows)
        return rows

    def _step(self, patches, weights, samples, idx, stage):
        cfg = self.cfg
        tag = patches.range_tag
        ir = self._tensor(patches.ir[idx], tag)
        vis = self._tensor(patches.vis[idx], tag)
        w_arr = torch.from_numpy(weights[idx])
        w = {k: w_arr[:, i] for i, k in enumerate(LOG_WEIGHT_COLUMNS)}
        fused = self.model(ir, vis, self.backbone)
        kwargs = {}
        if stage == 2:
            neg = np.array([samples[i].negatives for i in idx])
            kwargs = dict(
                backbone=self.backbone,
                mask=torch.from_numpy(patches.mask[idx]).to(self._dtype())[:, None],
                vis_negatives=[self._tensor(patches.vis[neg[:, j]], tag) for j in range(neg.shape[1])],
                ir_negatives=[self._tensor(patches.ir[neg[:, j]], tag) for j in range(neg.shape[1])],
                layer_weights=cfg.layer_weights,
            )
        bd = total_loss(vis, ir, fused, w, alpha=cfg.alpha, stage=stage, mode=cfg.mode, **kwargs)
        total = bd.l_total
        if not torch.isfinite(total):
            raise NonFiniteLossError(self.step + 1, float(total))
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        if cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.optimizer.step()
        self.step += 1
        row = {"step": self.step, "stage": stage, **bd.values()}
        for i, k in enumerate(LOG_WEIGHT_COLUMNS):
            row[k] = float(w_arr[:, i].mean())
        return row

    def _checkpoint(self, stage, epoch):
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        meta = {
            "seed": self.cfg.seed,
            "alpha": self.cfg.alpha,
            "stage": stage,
            "epoch": epoch,
            "mode": self.cfg.mode,
            "backbone": getattr(self.backbone, "source", None),
        }
        for name in (f"stage{stage}_epoch{epoch + 1:03d}.ckpt", "latest.ckpt"):
            path = self.out_dir / name
            save_checkpoint(path, self.model, self.optimizer, self.step, meta)
            self._write_manifest(path.with_suffix(".manifest.json"), meta)

    def _write_manifest(self, path, meta):
        manifest = {
            "config": self.cfg.to_dict(),
            "seed": self.cfg.seed,
            "corpus_sha256": self.corpus_digest,
            "step": self.step,
            **meta,
        }
        text = json.dumps(manifest, indent=2, sort_keys=True)
        atomic_write(path, lambda tmp: Path(tmp).write_text(text))

    def write_logs(self):
        if self.out_dir is None:
            return
        write_training_log(self.out_dir / "train_log.csv", self.log_rows, self.cfg.mode)
        write_weight_trace(self.out_dir / "weights_trace.csv", self.log_rows)


def train_stage1(model, corpus, cfg, backbone, trainer=None):
    trainer = trainer or Trainer(model, backbone, cfg)
    rows = trainer.run_stage(corpus, stage=1)
    return trainer.model, rows


def finetune_stage2(model, corpus_with_masks, cfg, backbone, trainer=None):
    trainer = trainer or Trainer(model, backbone, cfg)
    rows = trainer.run_stage(corpus_with_masks, stage=2)
    return trainer.model, rows


def run_two_stage(trainer, corpus, masked_corpus=None, stage1_only=False):
    """Stage 1 on ``corpus`` then stage 2 on ``masked_corpus``, ``cfg.alternations`` times."""
    for _ in range(trainer.cfg.alternations):
        trainer.run_stage(corpus, stage=1)
        if not stage1_only:
            trainer.run_stage(masked_corpus if masked_corpus is not None else corpus, stage=2)
    trainer.write_logs()
    return trainer


# --------------------------------------------------------------------------- corpora


def _match_names(dir_a, dir_b):
    a = {p.stem: p for p in list_images(dir_a)}
    b = {p.stem: p for p in list_images(dir_b)}
    names = sorted(set(a) & set(b))
    if not names:
        raise DataError(f"no matching image names in {dir_a} and {dir_b}")
    return [(n, a[n], b[n]) for n in names]


def _attach_mask(name, plane, mask_dir):
    if mask_dir is None:
        return None
    hits = [p for p in list_images(mask_dir) if p.stem == name]
    return load_mask(hits[0], plane) if hits else None


def load_ivif_corpus(corpus_dir, mask_dir=None):
    """Pairs from ``corpus_dir/ir`` and ``corpus_dir/vis`` with matching file stems."""
    corpus_dir = Path(corpus_dir)
    pairs = []
    for name, ir_path, vis_path in _match_names(corpus_dir / "ir", corpus_dir / "vis"):
        ir = load_grayscale(ir_path)
        pairs.append(SourcePair(name, ir, load_grayscale(vis_path), _attach_mask(name, ir, mask_dir)))
    return pairs


def functional_luminance(img):
    """Y channel (8-bit scale) of a functional image; grayscale input passes through."""
    if isinstance(img, ImagePlane):
        return img
    return normalize(rgb_to_ycbcr(img).y, "unit8")


def load_medical_corpus(corpus_dir, mask_dir=None):
    """Pairs from ``corpus_dir/mri`` and ``corpus_dir/fun``. The ``ir`` slot holds the
    functional luminance, ``vis`` the MRI and the mask is the MRI-segmented mask."""
    corpus_dir = Path(corpus_dir)
    pairs = []
    for name, mri_path, fun_path in _match_names(corpus_dir / "mri", corpus_dir / "fun"):
        mri = load_grayscale(mri_path)
        fun_y = functional_luminance(load_color(fun_path))
        pairs.append(SourcePair(name, fun_y, mri, _attach_mask(name, mri, mask_dir)))
    return pairs


def load_corpus(corpus_dir, mode="ivif", mask_dir=None):
    if mode == "medical":
        return load_medical_corpus(corpus_dir, mask_dir)
    return load_ivif_corpus(corpus_dir, mask_dir)
