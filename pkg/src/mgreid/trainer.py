"""Two-stage training: prompt learning against frozen visual prototypes, then
joint optimization of the image encoder, visual tokens, BN neck, classifier
and mask predictor."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .config import RunConfig
from .data import PipelineError, hflip, pk_batches, split_tensors
from .encoder import ImageEncoder
from .grounding import stripe_label_matrix
from .objectives import (
    PrototypeMemory,
    build_vpm1,
    loss_cmp,
    loss_i2tce,
    loss_id,
    loss_imp,
    loss_mask,
    stage_losses,
)
from .synth import Manifest
from .text import PromptSet, TextEncoder, init_prompts

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mgreid-checkpoint"
CHECKPOINT_VERSION = 1
LOSS_FIELDS = ("epoch", "iteration", "lr", "cmp", "id", "imp", "i2tce", "bce", "dice", "mask", "stage_total")


class CheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------- schedules

def cosine_lr(epoch: int, epochs: int, base_lr: float, min_lr: float = 1e-7) -> float:
    if epochs <= 1:
        return base_lr
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * epoch / (epochs - 1)))


def warmup_step_lr(step: int, epoch: int, base_lr: float, total_steps: int, epochs: int,
                   warmup_frac: float = 0.1, warmup_factor: float = 0.1,
                   milestones=(2 / 3, 5 / 6), gamma: float = 0.1) -> float:
    """Linear warmup over the first steps, then x gamma at each epoch milestone."""
    warmup = int(round(warmup_frac * total_steps))
    if step < warmup:
        alpha = step / warmup
        return base_lr * (warmup_factor * (1.0 - alpha) + alpha)
    drops = sum(epoch >= int(round(m * epochs)) for m in milestones)
    return base_lr * gamma ** drops


# ---------------------------------------------------------------- helpers

def param_hash(module: torch.nn.Module | list) -> str:
    params = module.parameters() if isinstance(module, torch.nn.Module) else module
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def build_encoder(cfg: RunConfig, num_classes: int) -> ImageEncoder:
    data = cfg.data
    grid = (*data.grid, data.patch_size)
    stripes = torch.from_numpy(stripe_label_matrix(grid).astype(np.float32))
    return ImageEncoder(cfg.model, (data.image_height, data.image_width), data.patch_size,
                        num_classes, am_msa=True, stripe_labels=stripes)


def build_text_encoder(cfg: RunConfig) -> TextEncoder:
    m = cfg.model
    return TextEncoder(m.prompt_dim, m.out_dim, m.text_layers, m.text_heads, seed=cfg.train.seed + 101)


@torch.no_grad()
def encode_split(model: ImageEncoder, images: torch.Tensor, mask_source: str,
                 labels: torch.Tensor | None = None, batch_size: int = 128):
    """Pre-BN fused features and final-layer mask probabilities, inference mode."""
    was_training = model.training
    model.eval()
    feats, probs = [], []
    for i in range(0, images.shape[0], batch_size):
        g = labels[i:i + batch_size] if labels is not None and mask_source == "external" else None
        out = model(images[i:i + batch_size], mask_source, g)
        feats.append(out.feature)
        if out.mask_probs is not None:
            probs.append(out.mask_probs[:, -1])
    model.train(was_training)
    return torch.cat(feats), (torch.cat(probs) if probs else None)


def inference_mask_source(training_source: str) -> str:
    return {"external": "predicted"}.get(training_source, training_source)


class LossLog:
    """Loss rows kept in memory and optionally streamed to CSV."""

    def __init__(self, path: str | Path | None = None):
        self.rows: list[dict[str, Any]] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.DictWriter(fh, LOSS_FIELDS).writeheader()

    def add(self, **row: Any) -> None:
        full = {k: row.get(k, "") for k in LOSS_FIELDS}
        self.rows.append(full)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.DictWriter(fh, LOSS_FIELDS).writerow(full)

    def epoch_means(self, key: str) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for r in self.rows:
            if r[key] != "":
                by_epoch.setdefault(int(r["epoch"]), []).append(float(r[key]))
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(state: dict[str, Any], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **state}
    buf = io.BytesIO()
    torch.save(payload, buf)
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=path.parent)
    with os.fdopen(fd, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path, kind: str | None = None) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises several unrelated types for bad files
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path} has version {payload.get('version')}, expected {CHECKPOINT_VERSION}"
        )
    if kind is not None and payload.get("kind") != kind:
        raise CheckpointError(f"{path} holds a {payload.get('kind')!r} checkpoint, expected {kind!r}")
    return payload


def prompt_state(prompts: PromptSet) -> dict[str, Any]:
    return {
        "num_ids": prompts.num_ids,
        "length": prompts.length,
        "dim": prompts.dim,
        "granularities": list(prompts.granularities),
        "values": prompts.as_tensor().detach().clone(),
    }


def prompts_from_state(state: dict[str, Any]) -> PromptSet:
    prompts = PromptSet(state["num_ids"], state["length"], state["dim"])
    if tuple(state["granularities"]) != prompts.granularities:
        raise CheckpointError(f"granularity order {state['granularities']} not supported")
    with torch.no_grad():
        for p, v in zip(prompts.prompts, state["values"]):
            p.copy_(v)
    return prompts


def save_prompts(prompts: PromptSet, path: str | Path) -> Path:
    return save_checkpoint({"kind": "prompts", **prompt_state(prompts)}, path)


def load_prompts(path: str | Path) -> PromptSet:
    return prompts_from_state(load_checkpoint(path, kind="prompts"))


# ---------------------------------------------------------------- stage 1

@dataclass
class Stage1Result:
    config: RunConfig
    prompts: PromptSet
    text_encoder: TextEncoder
    encoder_state: dict[str, torch.Tensor]
    vpm1: PrototypeMemory
    log: LossLog
    epoch: int = 0
    optimizer_state: dict | None = None

    def epoch_losses(self) -> list[float]:
        return self.log.epoch_means("cmp")

    def state(self) -> dict[str, Any]:
        return {
            "kind": "stage1",
            "config": self.config.to_dict(),
            "prompts": prompt_state(self.prompts),
            "text_encoder": self.text_encoder.state_dict(),
            "encoder": self.encoder_state,
            "vpm1": self.vpm1.rows,
            "epoch": self.epoch,
            "optimizer": self.optimizer_state,
            "losses": self.log.rows,
        }

    @classmethod
    def from_state(cls, state: dict[str, Any]) -> "Stage1Result":
        cfg = RunConfig.from_dict(state["config"])
        text = build_text_encoder(cfg)
        text.load_state_dict(state["text_encoder"])
        log_ = LossLog()
        log_.rows = list(state.get("losses", []))
        return cls(cfg, prompts_from_state(state["prompts"]), text, state["encoder"],
                   PrototypeMemory(state["vpm1"], "vpm1"), log_, state["epoch"], state.get("optimizer"))


def train_stage1(manifest: Manifest, labels: dict[str, np.ndarray] | None, cfg: RunConfig,
                 log_path: str | Path | None = None, resume: Stage1Result | None = None,
                 stop_after: int | None = None) -> Stage1Result:
    """Optimize the prompts so each identity's text token matches its visual prototype."""
    if labels is None:
        raise PipelineError("stage 1 needs the pseudo-label file (run annotate first)")
    tc = cfg.train
    train = split_tensors(manifest, "train", labels)
    num_classes = manifest.config.num_ids
    granularities = cfg.model.active_granularities

    if resume is None:
        torch.manual_seed(tc.seed)
        encoder = build_encoder(cfg, num_classes)
        encoder.eval()
        feats, _ = encode_split(encoder, train.images, "external", train.labels)
        vpm1 = build_vpm1(feats, train.ids, num_classes)
        prompts = init_prompts(num_classes, cfg.model.prompt_len, cfg.model.prompt_dim, seed=tc.seed + 202)
        text = build_text_encoder(cfg)
        result = Stage1Result(cfg, prompts, text, encoder.state_dict(), vpm1, LossLog(log_path))
    else:
        result = resume
        result.log.path = Path(log_path) if log_path else None

    prompts, text, vpm1 = result.prompts, result.text_encoder, result.vpm1
    prompts.requires_grad_(True)
    optimizer = torch.optim.Adam(prompts.parameters(), lr=tc.s1_lr, weight_decay=tc.weight_decay)
    if result.optimizer_state:
        optimizer.load_state_dict(result.optimizer_state)

    last = tc.s1_epochs if stop_after is None else min(tc.s1_epochs, stop_after)
    for epoch in range(result.epoch, last):
        lr = cosine_lr(epoch, tc.s1_epochs, tc.s1_lr, tc.s1_min_lr)
        for group in optimizer.param_groups:
            group["lr"] = lr
        for c in range(num_classes):
            t = text(prompts, [c], granularities)
            loss = loss_cmp(t, vpm1, torch.tensor([c]))
            total = stage_losses({"cmp": loss}, 1)
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            result.log.add(epoch=epoch, iteration=c, lr=lr, cmp=loss.item(), stage_total=total.item())
        log.info("stage1 epoch %d lr %.2e cmp %.4f", epoch, lr, result.log.epoch_means("cmp")[-1])
        result.epoch = epoch + 1
    result.optimizer_state = optimizer.state_dict()
    prompts.requires_grad_(False)
    return result


# ---------------------------------------------------------------- stage 2

@dataclass
class Stage2Result:
    config: RunConfig
    model: ImageEncoder
    prompts: PromptSet
    text_encoder: TextEncoder
    tpm: PrototypeMemory
    vpm2: PrototypeMemory
    log: LossLog
    epoch: int = 0
    step: int = 0
    optimizer_state: dict | None = None
    lr_history: list[float] = field(default_factory=list)

    def state(self) -> dict[str, Any]:
        return {
            "kind": "stage2",
            "config": self.config.to_dict(),
            "num_classes": self.model.classifier.weight.shape[0],
            "model": self.model.state_dict(),
            "prompts": prompt_state(self.prompts),
            "text_encoder": self.text_encoder.state_dict(),
            "tpm": self.tpm.rows,
            "vpm2": self.vpm2.rows,
            "epoch": self.epoch,
            "step": self.step,
            "optimizer": self.optimizer_state,
            "losses": self.log.rows,
            "lr_history": self.lr_history,
        }

    @classmethod
    def from_state(cls, state: dict[str, Any]) -> "Stage2Result":
        cfg = RunConfig.from_dict(state["config"])
        model = build_encoder(cfg, state["num_classes"])
        model.load_state_dict(state["model"])
        text = build_text_encoder(cfg)
        text.load_state_dict(state["text_encoder"])
        log_ = LossLog()
        log_.rows = list(state.get("losses", []))
        return cls(cfg, model, prompts_from_state(state["prompts"]), text,
                   PrototypeMemory(state["tpm"], "tpm"),
                   PrototypeMemory(state["vpm2"], "vpm2", cfg.train.momentum),
                   log_, state["epoch"], state["step"], state.get("optimizer"),
                   list(state.get("lr_history", [])))


def load_model(state: dict[str, Any]) -> ImageEncoder:
    """Image encoder only; the inference path needs nothing else."""
    cfg = RunConfig.from_dict(state["config"])
    model = build_encoder(cfg, state["num_classes"])
    model.load_state_dict(state["model"])
    model.eval()
    return model


def make_optimizer(model: ImageEncoder, cfg: RunConfig) -> torch.optim.Optimizer:
    tc = cfg.train
    groups = [{"params": model.base_parameters(), "lr": tc.s2_lr, "lr_mult": 1.0, "name": "base"}]
    if model.rmp is not None:
        groups.append({"params": model.rmp_parameters(), "lr": tc.s2_lr * tc.rmp_lr_mult,
                       "lr_mult": tc.rmp_lr_mult, "name": "rmp"})
    return torch.optim.Adam(groups, lr=tc.s2_lr, weight_decay=tc.weight_decay)


def stage2_losses(model: ImageEncoder, images: torch.Tensor, ids: torch.Tensor, labels: torch.Tensor,
                  vpm2, tpm, cfg: RunConfig, mask_source: str | None = None) -> dict[str, torch.Tensor]:
    tc = cfg.train
    source = mask_source or cfg.model.mask_source
    out = model(images, source, labels if source == "external" else None)
    feature = out.feature
    v_bn = model.bn_neck(feature)
    report = {
        "id": loss_id(v_bn, model.classifier.weight, ids),
        "imp": loss_imp(feature, vpm2, ids, tc.tau),
        "i2tce": loss_i2tce(feature, tpm, ids, tc.label_smoothing),
    }
    bce, dice, mask = loss_mask(out.mask_probs, labels, tc.dice_eps, parts=model.part_on)
    report.update(bce=bce, dice=dice, mask=mask)
    report["stage_total"] = stage_losses(report, 2)
    report["_feature"] = feature
    return report


def train_stage2(manifest: Manifest, labels: dict[str, np.ndarray] | None, stage1: Stage1Result | None,
                 cfg: RunConfig, log_path: str | Path | None = None, resume: Stage2Result | None = None,
                 stop_after: int | None = None) -> Stage2Result:
    if stage1 is None and resume is None:
        raise PipelineError("stage 2 needs the stage-1 prompts (run train --stage 1 first)")
    if labels is None:
        raise PipelineError("stage 2 needs the pseudo-label file (run annotate first)")
    tc = cfg.train
    train = split_tensors(manifest, "train", labels)
    num_classes = manifest.config.num_ids
    grid = manifest.config.grid
    granularities = cfg.model.active_granularities

    if resume is None:
        torch.manual_seed(tc.seed + 303)
        model = build_encoder(cfg, num_classes)
        model.load_state_dict(stage1.encoder_state)
        prompts, text = stage1.prompts, stage1.text_encoder
        prompts.requires_grad_(False)
        with torch.no_grad():
            tpm = PrototypeMemory(text(prompts, list(range(num_classes)), granularities), "tpm")
        vpm2 = PrototypeMemory(tpm.rows.clone(), "vpm2", tc.momentum)
        result = Stage2Result(cfg, model, prompts, text, tpm, vpm2, LossLog(log_path))
    else:
        result = resume
        result.log.path = Path(log_path) if log_path else None
    model = result.model
    optimizer = make_optimizer(model, cfg)
    if result.optimizer_state:
        optimizer.load_state_dict(result.optimizer_state)

    ids_np = train.ids.numpy()
    steps_per_epoch = len(pk_batches(ids_np, tc.ids_per_batch, tc.samples_per_id, np.random.default_rng(0)))
    total_steps = steps_per_epoch * tc.s2_epochs
    last = tc.s2_epochs if stop_after is None else min(tc.s2_epochs, stop_after)

    for epoch in range(result.epoch, last):
        feats, _ = encode_split(model, train.images, "external", train.labels)
        result.vpm2 = PrototypeMemory.from_features(feats, train.ids, num_classes, "vpm2", tc.momentum)
        model.train()
        rng = np.random.default_rng([tc.seed, 404, epoch])
        for it, idx in enumerate(pk_batches(ids_np, tc.ids_per_batch, tc.samples_per_id, rng)):
            lr = warmup_step_lr(result.step, epoch, tc.s2_lr, total_steps, tc.s2_epochs,
                                tc.warmup_frac, tc.warmup_factor, tc.decay_milestones, tc.decay_gamma)
            for group in optimizer.param_groups:
                group["lr"] = lr * group["lr_mult"]
            images, g = train.images[idx], train.labels[idx]
            if tc.flip:
                flip = torch.from_numpy(rng.random(len(idx)) < 0.5)
                fi, fg = hflip(images[flip], g[flip], grid)
                images, g = images.clone(), g.clone()
                images[flip], g[flip] = fi, fg
            ids = train.ids[idx]
            report = stage2_losses(model, images, ids, g, result.vpm2, result.tpm, cfg)
            optimizer.zero_grad(set_to_none=True)
            report["stage_total"].backward()
            optimizer.step()
            result.vpm2.update(report["_feature"].detach(), ids)
            result.lr_history.append(lr)
            result.log.add(epoch=epoch, iteration=it, lr=lr,
                           **{k: v.item() for k, v in report.items() if not k.startswith("_")})
            result.step += 1
        log.info("stage2 epoch %d total %.4f", epoch, result.log.epoch_means("stage_total")[-1])
        result.epoch = epoch + 1
    result.optimizer_state = optimizer.state_dict()
    model.eval()
    return result


def trainable_groups(model: ImageEncoder) -> dict[str, list[torch.nn.Parameter]]:
    """Named parameter groups used for freezing checks."""
    return {
        "patch_embed": list(model.patch_embed.parameters()),
        "visual_tokens": [model.global_token, model.local_tokens],
        "encoder_layers": list(model.blocks.parameters()) + [model.pos_embed]
        + list(model.norm_post.parameters()) + list(model.proj.parameters()),
        "bn_neck": [model.bottleneck.weight],
        "classifier": list(model.classifier.parameters()),
        "rmp": model.rmp_parameters(),
    }

