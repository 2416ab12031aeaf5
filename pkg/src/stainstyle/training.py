"""Classifier training, adversarial stain-style generator training, checkpoints."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import os
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

from .colorops import to_gray
from .data import Dataset, check_color_tile
from .evaluation import predict_proba, roc_auc
from .losses import (
    LossWeights,
    feature_preserving_loss,
    gan_loss_d,
    gan_loss_g,
    recon_loss,
    total_generator_loss,
)
from .networks import (
    Classifier,
    Discriminator,
    Generator,
    NetConfig,
    build_classifier,
    build_discriminator,
    build_from_config,
    build_generator,
    color_to_tensor,
    gray_to_tensor,
    tensor_to_color,
)

log = logging.getLogger(__name__)

COLLAPSE_WARN = 1e-3
CHECKPOINT_FORMAT = "stainstyle-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 2e-4
    adam_betas: tuple[float, float] = (0.5, 0.999)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_dir: str | None = None
    d_steps_per_g_step: int = 1
    # architecture
    classifier_width: int = 32
    classifier_depth: int = 3
    classifier_blocks: int = 2
    generator_width: int = 32
    generator_depth: int = 3
    discriminator_width: int = 32
    discriminator_depth: int = 3
    condition_generator: bool = False
    # caps the number of updates per epoch (None = full pass)
    steps_per_epoch: int | None = None

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        self.validate()

    def validate(self) -> None:
        if not (isinstance(self.epochs, int) and self.epochs >= 0):
            raise ValueError("epochs must be a nonnegative integer")
        for name in ("batch_size", "d_steps_per_g_step", "classifier_width", "classifier_depth",
                     "classifier_blocks", "generator_width", "generator_depth",
                     "discriminator_width", "discriminator_depth"):
            value = getattr(self, name)
            if not (isinstance(value, int) and value > 0):
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ValueError("learning_rate must be positive")
        if len(self.adam_betas) != 2 or not all(0 <= b < 1 for b in self.adam_betas):
            raise ValueError("adam_betas must be two numbers in [0, 1)")
        if self.steps_per_epoch is not None and self.steps_per_epoch <= 0:
            raise ValueError("steps_per_epoch must be positive")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["adam_betas"] = list(self.adam_betas)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class TrainHistory:
    records: list[dict[str, Any]] = field(default_factory=list)

    def append(self, record: dict[str, Any]) -> None:
        for key, value in record.items():
            if isinstance(value, float) and not math.isfinite(value):
                raise TrainingError(f"non-finite {key} at epoch {record.get('epoch')}")
        if self.records and record["epoch"] <= self.records[-1]["epoch"]:
            raise TrainingError("epoch indices must increase")
        self.records.append(record)

    def column(self, key: str) -> list:
        return [r[key] for r in self.records]

    def without_time(self) -> list[dict]:
        return [{k: v for k, v in r.items() if k != "seconds"} for r in self.records]

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "TrainHistory":
        with open(path, encoding="utf-8") as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


def _batches(n: int, batch_size: int, rng: np.random.Generator, limit: int | None):
    order = rng.permutation(n)
    starts = range(0, n, batch_size)
    for k, start in enumerate(starts):
        if limit is not None and k >= limit:
            return
        yield order[start:start + batch_size]


def _finite(value: torch.Tensor, what: str, epoch: int) -> float:
    v = float(value.detach())
    if not math.isfinite(v):
        raise TrainingError(f"non-finite {what} at epoch {epoch}")
    return v


def _snapshot(model: nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


# --------------------------------------------------------------------------- #
# Classifier
# --------------------------------------------------------------------------- #

def train_classifier(
    train: Dataset, val: Dataset, cfg: TrainConfig, learning_rate: float = 1e-3
) -> tuple[Classifier, TrainHistory]:
    """Minimize binary cross-entropy on ``train``; keep the best-validation-AUC weights."""
    if cfg.epochs == 0:
        raise TrainingError("no training performed: epochs = 0")
    if train.d != val.d:
        raise TrainingError(f"train tiles are {train.d}px but val tiles are {val.d}px")
    torch.manual_seed(cfg.seed)
    model = build_classifier(train.d, cfg.classifier_depth, cfg.classifier_width, cfg.seed, cfg.classifier_blocks)
    opt = torch.optim.Adam(model.parameters(), lr=learning_rate, betas=(0.9, 0.999))
    images = color_to_tensor(train.images)
    labels = torch.from_numpy(train.labels).float()
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    best_auc, best_state = -1.0, None
    loss_fn = nn.BCEWithLogitsLoss()

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        model.train()
        total, count = 0.0, 0
        for idx in _batches(len(train), cfg.batch_size, rng, cfg.steps_per_epoch):
            idx = torch.from_numpy(idx)
            loss = loss_fn(model.logits(images[idx]), labels[idx])
            value = _finite(loss, "classifier loss", epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(idx)
            count += len(idx)
        val_auc = roc_auc(predict_proba(model, val.images), val.labels)
        history.append({
            "epoch": epoch,
            "train_loss": total / count,
            "val_auc": val_auc,
            "seconds": time.perf_counter() - t0,
        })
        log.info("classifier epoch %d loss %.4f val AUC %.4f", epoch, total / count, val_auc)
        if val_auc > best_auc:
            best_auc, best_state = val_auc, _snapshot(model)
        if cfg.checkpoint_dir:
            save_checkpoint(model, Path(cfg.checkpoint_dir) / "classifier_last.ckpt")

    model.load_state_dict(best_state)
    model.eval()
    if cfg.checkpoint_dir:
        save_checkpoint(model, Path(cfg.checkpoint_dir) / "classifier_best.ckpt")
    return model, history


# --------------------------------------------------------------------------- #
# Stain-style generator
# --------------------------------------------------------------------------- #

def color_diversity(colors: torch.Tensor) -> float:
    """Std across tiles of per-tile channel means, averaged over channels."""
    means = colors.detach().double().mean(dim=(2, 3))
    return float(means.std(dim=0, unbiased=False).mean())


@torch.no_grad()
def _features(classifier: Classifier, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    return torch.cat([classifier.features(images[s:s + batch_size]) for s in range(0, len(images), batch_size)])


class _Tensors:
    def __init__(self, ds: Dataset, classifier: Classifier):
        self.color = color_to_tensor(ds.images)
        self.gray = gray_to_tensor(to_gray(ds.images))
        self.label = torch.from_numpy(ds.labels)
        self.feats = _features(classifier, self.color)


@torch.no_grad()
def _validate_sst(g, dnet, classifier, val: _Tensors, cfg: TrainConfig, batch_size: int = 128) -> dict:
    g.eval()
    dnet.eval()
    sums = {"val_recon": 0.0, "val_gan_g": 0.0, "val_fp": 0.0}
    fakes = []
    n = len(val.label)
    for s in range(0, n, batch_size):
        sl = slice(s, s + batch_size)
        label = val.label[sl] if cfg.condition_generator else None
        fake = g(val.gray[sl], label)
        k = len(fake)
        sums["val_recon"] += float(recon_loss(fake, val.color[sl])) * k
        sums["val_gan_g"] += float(gan_loss_g(dnet(val.gray[sl], fake, val.label[sl]))) * k
        sums["val_fp"] += float(feature_preserving_loss(val.feats[sl], classifier.features(fake))) * k
        fakes.append(fake)
    out = {k: v / n for k, v in sums.items()}
    out["val_total"] = float(total_generator_loss(out["val_recon"], out["val_gan_g"], out["val_fp"], cfg.loss_weights))
    out["color_diversity"] = color_diversity(torch.cat(fakes))
    g.train()
    dnet.train()
    return out


def train_sst(
    train: Dataset, val: Dataset, classifier: Classifier, cfg: TrainConfig
) -> tuple[Generator, TrainHistory]:
    """Train the gray-to-color generator against a conditional discriminator.

    Training pairs are (gray(tile), tile) from the target-style datasets.  Each
    step makes ``cfg.d_steps_per_g_step`` discriminator updates on the same
    batch, then one generator update on the weighted reconstruction + GAN +
    feature-preserving loss.  The classifier is frozen throughout.  Returns the
    generator with the lowest validation total loss.
    """
    if cfg.epochs == 0:
        raise TrainingError("no training performed: epochs = 0")
    d = classifier.config.d
    for ds in (train, val):
        if ds.d != d:
            raise TrainingError(f"classifier expects {d}px tiles, dataset {ds.split} has {ds.d}px")

    frozen = [p.requires_grad for p in classifier.parameters()]
    classifier.eval()
    for p in classifier.parameters():
        p.requires_grad_(False)
    try:
        return _train_sst(train, val, classifier, cfg, d)
    finally:
        for p, flag in zip(classifier.parameters(), frozen):
            p.requires_grad_(flag)


def _train_sst(train, val, classifier, cfg, d):
    torch.manual_seed(cfg.seed)
    g = build_generator(d, cfg.generator_depth, cfg.generator_width, cfg.seed, cfg.condition_generator)
    dnet = build_discriminator(d, cfg.discriminator_depth, cfg.discriminator_width, cfg.seed + 1)
    g.train()
    dnet.train()
    opt_g = torch.optim.Adam(g.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas)
    opt_d = torch.optim.Adam(dnet.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas)
    tr = _Tensors(train, classifier)
    va = _Tensors(val, classifier)
    rng = np.random.default_rng(cfg.seed)
    w = cfg.loss_weights
    history = TrainHistory()
    best_total, best_state = math.inf, None

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        sums = dict.fromkeys(("d_loss", "recon", "gan_g", "fp", "total"), 0.0)
        steps = 0
        for idx in _batches(len(train), cfg.batch_size, rng, cfg.steps_per_epoch):
            idx = torch.from_numpy(idx)
            gray, real, label, feat_real = tr.gray[idx], tr.color[idx], tr.label[idx], tr.feats[idx]
            g_label = label if cfg.condition_generator else None

            with torch.no_grad():
                fake = g(gray, g_label)
            for _ in range(cfg.d_steps_per_g_step):
                d_loss = gan_loss_d(dnet(gray, real, label), dnet(gray, fake, label))
                sums["d_loss"] += _finite(d_loss, "discriminator loss", epoch) / cfg.d_steps_per_g_step
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()

            fake = g(gray, g_label)
            rec = recon_loss(fake, real)
            gan = gan_loss_g(dnet(gray, fake, label))
            if w.lambda_fp > 0:
                fp = feature_preserving_loss(feat_real, classifier.features(fake))
            else:
                with torch.no_grad():
                    fp = feature_preserving_loss(feat_real, classifier.features(fake))
            total = total_generator_loss(rec, gan, fp, w)
            sums["total"] += _finite(total, "generator loss", epoch)
            sums["recon"] += float(rec.detach())
            sums["gan_g"] += float(gan.detach())
            sums["fp"] += float(fp.detach())
            opt_g.zero_grad()
            total.backward()
            opt_g.step()
            steps += 1

        record = {"epoch": epoch, **{k: v / steps for k, v in sums.items()}}
        record.update(_validate_sst(g, dnet, classifier, va, cfg))
        record["seconds"] = time.perf_counter() - t0
        history.append(record)
        log.info(
            "sst epoch %d recon %.4f gan %.4f fp %.4f | val total %.4f diversity %.5f",
            epoch, record["recon"], record["gan_g"], record["fp"], record["val_total"], record["color_diversity"],
        )
        if record["color_diversity"] < COLLAPSE_WARN:
            warnings.warn(
                f"possible mode collapse at epoch {epoch}: color diversity {record['color_diversity']:.2e}",
                RuntimeWarning,
                stacklevel=2,
            )
        if record["val_total"] < best_total:
            best_total, best_state = record["val_total"], _snapshot(g)
        if cfg.checkpoint_dir:
            save_checkpoint(g, Path(cfg.checkpoint_dir) / "generator_last.ckpt")
            save_checkpoint(dnet, Path(cfg.checkpoint_dir) / "discriminator_last.ckpt")

    g.load_state_dict(best_state)
    g.eval()
    if cfg.checkpoint_dir:
        save_checkpoint(g, Path(cfg.checkpoint_dir) / "generator_best.ckpt")
    return g, history


@torch.no_grad()
def apply_sst_batch(g: Generator, tiles: np.ndarray, labels=None, batch_size: int = 128) -> np.ndarray:
    """``tau = zeta o G`` on an ``(n, d, d, 3)`` stack."""
    tiles = np.asarray(tiles)
    d = g.config.d
    if tiles.ndim != 4 or tiles.shape[1:] != (d, d, 3):
        raise TrainingError(f"generator expects ({d}, {d}, 3) tiles, got {tiles.shape[1:]}")
    if g.config.label_conditioned and labels is None:
        raise TrainingError("label-conditioned generator needs labels")
    g.eval()
    gray = gray_to_tensor(to_gray(tiles))
    out = []
    for s in range(0, len(tiles), batch_size):
        label = None if labels is None else torch.as_tensor(np.asarray(labels)[s:s + batch_size])
        out.append(tensor_to_color(g(gray[s:s + batch_size], label)))
    return np.concatenate(out)


def apply_sst(g: Generator, tile: np.ndarray, label: int | None = None) -> np.ndarray:
    """Gray-normalize then colorize one tile."""
    tile = check_color_tile(tile)
    labels = None if label is None else [label]
    return apply_sst_batch(g, tile[None], labels)[0]


class SSTTransfer:
    """Tile transform wrapping a trained generator (usable by ``evaluate``)."""

    def __init__(self, g: Generator):
        self.g = g

    def __call__(self, tile):
        return apply_sst(self.g, tile)

    def batch(self, tiles):
        return apply_sst_batch(self.g, tiles)


# --------------------------------------------------------------------------- #
# Checkpoints
# --------------------------------------------------------------------------- #

def save_checkpoint(model: Generator | Discriminator | Classifier, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "state": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path, expected: NetConfig | dict | None = None):
    """Rebuild a network from a checkpoint; mismatched configs are an error."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a stainstyle checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {payload.get('version')} != {CHECKPOINT_VERSION}")
    config = payload["config"]
    if expected is not None:
        expected = expected.to_dict() if isinstance(expected, NetConfig) else dict(expected)
        if expected != config:
            raise CheckpointError(f"checkpoint config {config} does not match expected {expected}")
    try:
        model = build_from_config(config)
        model.load_state_dict(payload["state"], strict=True)
    except Exception as exc:
        raise CheckpointError(f"checkpoint {path} does not fit its config: {exc}") from None
    model.eval()
    return model
