"""Training runs, scene prediction and regime recommendation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentPolicy, NormalizationStats, apply_augment, normalize
from .data_pipeline import DatasetDescriptor, grid_tiles, load_manifest, random_crop, sliding_windows, stitch_predictions
from .evaluation import EvalReport, evaluate_dataset
from .losses import REGIMES, MccConfig
from .model import (
    ArchitectureSpec,
    Checkpoint,
    NonFiniteLossError,
    build_network,
    load_checkpoint,
    make_optimizer,
    save_checkpoint,
    training_step,
)
from .sampler import SampleStream, compose_batch, single_domain_batch
from .taxonomy import CANONICAL, RemapTable

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    regime: str
    target: str
    source: Optional[str] = None
    arch: ArchitectureSpec = field(default_factory=ArchitectureSpec)
    batch_size: int = 8
    steps: int = 500
    seed: int = 0
    lr: float = 1e-3
    policy: Optional[AugmentPolicy] = field(default_factory=AugmentPolicy)
    mcc: MccConfig = field(default_factory=MccConfig)
    stats: NormalizationStats = field(default_factory=NormalizationStats)
    out: str = "runs/default"
    tile_size: int = 1000
    crop_size: int = 512
    window: int = 512
    stride: Optional[int] = None
    val_every: int = 50
    val_images: int = 4
    target_remap: Optional[str] = None
    source_remap: Optional[str] = None
    source_downscale: int = 1

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.regime != "supervised" and not self.source:
            raise ConfigError(f"regime {self.regime!r} requires a source manifest")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.regime == "supervised":
            if self.batch_size < 1:
                raise ConfigError("batch size must be >= 1")
        elif self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch size must be even for mixed regimes")
        if self.crop_size > self.tile_size:
            raise ConfigError(f"crop_size {self.crop_size} exceeds tile_size {self.tile_size}")
        if self.source_downscale < 1:
            raise ConfigError("source_downscale must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if isinstance(d.get("arch"), dict):
            d["arch"] = ArchitectureSpec.from_dict(d["arch"])
        if isinstance(d.get("policy"), dict):
            d["policy"] = AugmentPolicy.from_dict(d["policy"])
        if isinstance(d.get("mcc"), dict):
            d["mcc"] = MccConfig(**d["mcc"])
        if isinstance(d.get("stats"), dict):
            d["stats"] = NormalizationStats(tuple(d["stats"]["mean"]), tuple(d["stats"]["std"]))
        return cls(**d)


@dataclass
class TrainResult:
    checkpoint: Path
    log: list[dict]
    net: torch.nn.Module


def load_canonical(manifest: str, remap: Optional[str] = None) -> DatasetDescriptor:
    """Load a manifest and remap it onto the canonical 5-class taxonomy."""
    desc = load_manifest(manifest)
    if remap:
        table = RemapTable.load(remap)
    elif desc.taxonomy == CANONICAL:
        return desc
    else:
        raise ConfigError(f"dataset {desc.name!r} uses a non-canonical taxonomy and no remap table was given")
    if table.source != desc.taxonomy:
        raise ConfigError(f"remap table {remap} does not describe the taxonomy of {desc.name!r}")
    return desc.remapped(table)


def _training_tiles(desc: DatasetDescriptor, tile_size: int):
    tiles = []
    for pair in desc.split("train"):
        tiles.extend(grid_tiles(pair, min(tile_size, *pair.shape)))
    if not tiles:
        raise ConfigError(f"dataset {desc.name!r} has no training pairs")
    return tiles


def _make_transform(cfg: RunConfig, step_ref: list):
    counter = [0]

    def transform(tile, domain):
        counter[0] += 1
        rng = np.random.default_rng([cfg.seed, step_ref[0], counter[0]])
        pair = random_crop(tile, min(cfg.crop_size, *tile.shape), rng)
        image, labels = pair.image, pair.labels
        if cfg.policy is not None:
            progress = (step_ref[0] - 1) / max(cfg.steps - 1, 1)
            image, labels = apply_augment(image, labels, progress, rng, cfg.policy, CANONICAL.unknown_index)
        return normalize(image, cfg.stats), labels.astype(np.int64)

    return transform


def _window_probs(net: torch.nn.Module, image: np.ndarray, window: int, stride: Optional[int],
                  stats: NormalizationStats, batch: int = 8):
    windows = sliding_windows(image, window, stride)
    out = []
    with torch.no_grad():
        for i in range(0, len(windows), batch):
            chunk = windows[i:i + batch]
            x = torch.from_numpy(np.stack([normalize(w, stats) for w, _ in chunk]))
            probs = F.softmax(net(x).double(), dim=1).numpy()
            out.extend((p, origin) for p, (_, origin) in zip(probs, chunk))
    return out


def predict_with(net: torch.nn.Module, image: np.ndarray, window: int, stride: Optional[int] = None,
                 stats: NormalizationStats = NormalizationStats()) -> np.ndarray:
    net.eval()
    return stitch_predictions(_window_probs(net, image, window, stride, stats), image.shape[:2])


def _checkpoint_stats(ckpt: Checkpoint) -> NormalizationStats:
    stats = ckpt.config.get("stats")
    if stats:
        return NormalizationStats(tuple(stats["mean"]), tuple(stats["std"]))
    return NormalizationStats()


def predict_scene(checkpoint: Union[Checkpoint, str, Path], image: np.ndarray, window: int = 512,
                  stride: Optional[int] = None) -> np.ndarray:
    """Sliding-window inference over a whole scene with an eval-mode network."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    h, w = image.shape[:2]
    if window > h or window > w:
        raise ValueError(f"window exceeds image: {window} > {h}x{w}")
    return predict_with(ckpt.net, image, window, stride, _checkpoint_stats(ckpt))


def evaluate_net(net, desc: DatasetDescriptor, window: int, stride: Optional[int] = None,
                 stats: NormalizationStats = NormalizationStats(), split: str = "test",
                 limit: Optional[int] = None, metadata: Optional[dict] = None) -> EvalReport:
    pairs = desc.split(split)[:limit]
    preds, gts = [], []
    for p in pairs:
        win = min(window, *p.shape)
        preds.append((p.id, predict_with(net, p.image, win, stride if stride is None else min(stride, win), stats)))
        gts.append((p.id, p.labels))
    return evaluate_dataset(preds, gts, desc.taxonomy, metadata)


def evaluate_checkpoint(checkpoint: Union[Checkpoint, str, Path], desc: DatasetDescriptor, window: int = 512,
                        stride: Optional[int] = None, split: str = "test",
                        metadata: Optional[dict] = None) -> EvalReport:
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    meta = {
        "regime": ckpt.config.get("regime", ""),
        "source": ckpt.config.get("source_name", "none"),
        "seed": ckpt.config.get("seed"),
        "split": split,
        **(metadata or {}),
    }
    return evaluate_net(ckpt.net, desc, window, stride, _checkpoint_stats(ckpt), split, metadata=meta)


def train_run(cfg: RunConfig) -> TrainResult:
    """Train one regime end to end and write ``metrics.jsonl`` and ``checkpoint.pt`` to ``cfg.out``."""
    cfg.validate()
    target = load_canonical(cfg.target, cfg.target_remap)
    source = None
    if cfg.regime != "supervised":
        source = load_canonical(cfg.source, cfg.source_remap)
        if cfg.source_downscale > 1:
            source = source.downscaled(cfg.source_downscale)
    if cfg.arch.num_classes != len(CANONICAL):
        raise ConfigError(f"architecture has {cfg.arch.num_classes} classes, taxonomy has {len(CANONICAL)}")

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    step_ref = [0]
    transform = _make_transform(cfg, step_ref)
    target_stream = SampleStream(_training_tiles(target, cfg.tile_size), seed=cfg.seed + 1)
    source_stream = SampleStream(_training_tiles(source, cfg.tile_size), seed=cfg.seed + 2) if source else None

    net = build_network(cfg.arch, cfg.seed)
    optimizer = make_optimizer(net, cfg.lr)
    generator = torch.Generator().manual_seed(cfg.seed)
    val_desc = target if target.split("test") else None

    log = []
    with open(out / "metrics.jsonl", "w") as log_file:
        for step in range(1, cfg.steps + 1):
            step_ref[0] = step
            batch_id = f"step{step}"
            if source_stream is None:
                batch = single_domain_batch(target_stream, cfg.batch_size, transform, batch_id)
            else:
                batch = compose_batch(target_stream, source_stream, cfg.batch_size, transform, batch_id)
            try:
                result = training_step(net, batch, cfg.regime, optimizer, cfg.mcc,
                                       CANONICAL.unknown_index, generator)
            except NonFiniteLossError as e:
                raise NonFiniteLossError(f"step {step}: {e}") from None
            entry = {"step": step, "loss": result.loss, "loss_sn": result.loss_sn, "loss_mcc": result.loss_mcc}
            if val_desc is not None and cfg.val_every > 0 and (step % cfg.val_every == 0 or step == cfg.steps):
                report = evaluate_net(net, val_desc, cfg.window, cfg.stride, cfg.stats, limit=cfg.val_images)
                entry["val_miou"] = report.miou
            log.append(entry)
            log_file.write(json.dumps(entry) + "\n")

    snapshot = cfg.to_dict()
    snapshot["source_name"] = source.name if source else "none"
    snapshot["target_name"] = target.name
    ckpt_path = save_checkpoint(out / "checkpoint.pt", cfg.arch, net, optimizer, cfg.steps, snapshot)
    net.eval()
    return TrainResult(ckpt_path, log, net)


@dataclass
class RegimeRecommendation:
    regime: str
    reasons: list[str]


def recommend_regime(target: DatasetDescriptor, source: Optional[DatasetDescriptor]) -> RegimeRecommendation:
    """Pick a regime from zoom-level parity and annotation-rule agreement.

    Labelled transfer only pays off when the source sits at the same zoom
    level and follows the same annotation rules; otherwise its images are
    used unlabelled.
    """
    if source is None:
        return RegimeRecommendation("supervised", ["no source dataset"])
    reasons = []
    zoom_ok = source.zoom_level == target.zoom_level
    if zoom_ok:
        reasons.append(f"zoom levels match ({target.zoom_level})")
    else:
        gap = source.zoom_level - target.zoom_level
        hint = f"; downscale source by linear factor {2 ** gap} to match" if gap > 0 else ""
        reasons.append(f"zoom levels differ (source {source.zoom_level}, target {target.zoom_level}){hint}")
    rules_ok = source.annotation_rules_id == target.annotation_rules_id
    if rules_ok:
        reasons.append(f"annotation rules match ({target.annotation_rules_id!r})")
    else:
        reasons.append(
            f"annotation rules differ ({source.annotation_rules_id!r} vs {target.annotation_rules_id!r})"
        )
    return RegimeRecommendation("mcc_transfer" if zoom_ok and rules_ok else "mcc_semi", reasons)
