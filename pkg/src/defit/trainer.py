"""Few-shot SGD adaptation of the trainable set.

The trainable set is the adapter factors, the prompt bank, and the four
decoupling heads; everything else stays frozen. Per-class text rows are
recomputed inside every step so their gradient path stays live. Losses are
batch sums divided by the actual batch size before the optimizer step.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch

from .captions import designated_captions, fallback_caption
from .configs import (
    CHECKPOINT_SCHEMA_VERSION,
    BackboneConfig,
    LossWeights,
    TrainConfig,
    save_train_config,
    train_config_from_flat,
    train_config_to_flat,
)
from .encoder import DualEncoder, class_text_embeddings, decouple
from .errors import (
    CheckpointIntegrityError,
    CheckpointMismatchError,
    CheckpointVersionError,
    CompatibilityError,
    ConfigError,
    NumericError,
    PromptInitError,
    TrainingDivergedError,
)
from .losses import invariant_ce, total_loss
from .manifest import DatasetManifest, load_image
from .prompts import PromptBank
from . import tokenizer
from .encoder import TEMPLATE_PREFIX


@dataclass
class TrainLogEntry:
    """One optimizer step; ``total`` reconciles with the weighted components."""

    step: int
    epoch: int
    ce: float
    kl: float
    hsic_v: float
    hsic_t: float
    total: float
    learning_rate: float
    wall_time: float

    def to_json_dict(self) -> dict:
        return {
            "step": self.step,
            "epoch": self.epoch,
            "loss": {"ce": self.ce, "kl": self.kl, "hsic_v": self.hsic_v,
                     "hsic_t": self.hsic_t, "total": self.total},
            "learning_rate": self.learning_rate,
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_json_dict(cls, raw: dict) -> "TrainLogEntry":
        loss = raw["loss"]
        return cls(step=raw["step"], epoch=raw["epoch"], ce=loss["ce"],
                   kl=loss["kl"], hsic_v=loss["hsic_v"], hsic_t=loss["hsic_t"],
                   total=loss["total"], learning_rate=raw["learning_rate"],
                   wall_time=raw["wall_time"])


@dataclass
class AdaptedModel:
    """A trained model plus the class context it was trained against."""

    model: DualEncoder
    class_names: tuple
    captions: dict
    weights: LossWeights


@dataclass
class TrainResult:
    adapted: AdaptedModel
    config: TrainConfig
    log: list
    checkpoint_path: Optional[Path] = None
    log_path: Optional[Path] = None


def init_prompts(model: DualEncoder, class_names, captions: dict | None = None,
                 seed: int | None = None,
                 generator: torch.Generator | None = None) -> PromptBank:
    """(Re)initialize the prompt bank for a training run.

    Layer-1 text prompts are copied from the embedding vectors of the first
    ``m`` template tokens ("a photo of a", with any class captions available
    as tokenizer context); every other prompt tensor draws from N(0, 0.02^2).
    """
    bank = model.prompts
    if bank.depth == 0:
        return bank
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else int(seed))
    with torch.no_grad():
        for block in bank.vision_tokens:
            block.normal_(0.0, 0.02, generator=generator)
        for block in bank.text_tokens:
            block.normal_(0.0, 0.02, generator=generator)
        template_ids = tokenizer.encode(TEMPLATE_PREFIX, model.config.vocab_size,
                                        add_special=False)
        if len(template_ids) < bank.width:
            raise PromptInitError(
                f"template {TEMPLATE_PREFIX!r} has {len(template_ids)} tokens, "
                f"fewer than the prompt width {bank.width}")
        rows = model.text.token_embed.weight[
            torch.tensor(template_ids[:bank.width], dtype=torch.long)]
        bank.text_tokens[0].copy_(rows)
    return bank


def record_text_ids(model: DualEncoder, record) -> torch.Tensor:
    """Token ids of a record's paired text (its caption, or the template)."""
    text = record.caption or fallback_caption(record.class_name)
    return model.tokenize(text)


def _step_lr(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if not cfg.cosine_lr or total_steps <= 0:
        return cfg.learning_rate
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def train(cfg: TrainConfig, manifest: DatasetManifest) -> TrainResult:
    """Run the adaptation loop on the manifest's train split.

    The caller is responsible for few-shot subsampling (see
    ``sample_few_shot``); this function trains on the train split as given.
    """
    train_records = manifest.split_records("train")
    if not train_records:
        raise ConfigError("train split is empty; nothing to fit")
    device = torch.device(cfg.device)

    model = DualEncoder(cfg.backbone, lora_rank=cfg.lora_rank,
                        lora_scale=cfg.lora_scale, prompt_depth=cfg.prompt_depth,
                        prompt_width=cfg.prompt_width, theta_seed=cfg.seed)
    model.to(device)
    run_gen = torch.Generator().manual_seed(int(cfg.seed))
    captions = designated_captions(manifest)
    init_prompts(model, manifest.class_names, captions, generator=run_gen)

    images = torch.stack([load_image(r, manifest) for r in train_records]).to(device)
    labels = torch.tensor([r.label for r in train_records], dtype=torch.long)
    text_ids = [record_text_ids(model, r) for r in train_records]

    n = len(train_records)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    optimizer = torch.optim.SGD(model.trainable_parameters(),
                                lr=cfg.learning_rate, momentum=cfg.momentum)
    log: list = []
    step = 0
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=run_gen)
        for chunk in perm.split(cfg.batch_size):
            t0 = time.perf_counter()
            lr = _step_lr(cfg, step, total_steps)
            for group in optimizer.param_groups:
                group["lr"] = lr
            idx = chunk.tolist()
            y = labels[chunk]
            try:
                class_emb = class_text_embeddings(model, manifest.class_names,
                                                  captions)
                img_dec = decouple(model.encode_images(images[chunk]),
                                   model.heads, "vision")
                txt_dec = decouple(model.encode_texts([text_ids[i] for i in idx]),
                                   model.heads, "text")
                if cfg.loss_mode == "ce_only":
                    loss = invariant_ce(img_dec.invariant, class_emb.invariant,
                                        y, cfg.weights.tau)
                    ce = float(loss.detach())
                    breakdown = {"ce": ce, "kl": 0.0, "hsic_v": 0.0,
                                 "hsic_t": 0.0, "total": ce}
                else:
                    loss, breakdown = total_loss(img_dec, txt_dec, class_emb, y,
                                                 cfg.weights, cfg.hsic)
            except NumericError as exc:
                # parameters blew past the encoders' numeric guards
                raise TrainingDivergedError(
                    f"numeric failure at step {step} (epoch {epoch}): {exc}",
                    {}) from exc
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at step {step} (epoch {epoch}): {breakdown}",
                    breakdown)
            optimizer.zero_grad()
            (loss / len(idx)).backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.trainable_parameters(),
                                               cfg.grad_clip)
            optimizer.step()
            log.append(TrainLogEntry(step=step, epoch=epoch,
                                     learning_rate=lr,
                                     wall_time=time.perf_counter() - t0,
                                     **breakdown))
            step += 1

    adapted = AdaptedModel(model=model, class_names=manifest.class_names,
                           captions=captions, weights=cfg.weights)
    result = TrainResult(adapted=adapted, config=cfg, log=log)
    if cfg.out_dir is not None:
        out_dir = Path(cfg.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint_path = save_checkpoint(adapted, cfg, out_dir / "checkpoint.pt")
        result.log_path = write_train_log(log, out_dir / "train_log.jsonl")
        save_train_config(cfg, out_dir / "train_config.yaml")
    return result


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(adapted: AdaptedModel, cfg: TrainConfig, path) -> Path:
    """Archive the trainable set plus metadata; the backbone goes by reference.

    The frozen backbone is identified by its config+seed and a content
    fingerprint, which loading verifies after rebuilding it.
    """
    path = Path(path)
    flat_cfg = {k: (str(v) if isinstance(v, Path) else v)
                for k, v in train_config_to_flat(cfg).items()}
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "config": flat_cfg,
        "class_names": list(adapted.class_names),
        "captions": dict(adapted.captions),
        "backbone_fingerprint": adapted.model.backbone_fingerprint(),
        "theta": adapted.model.trainable_state_dict(),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path, expected_backbone: BackboneConfig | None = None):
    """Rebuild the model from a checkpoint; returns (AdaptedModel, TrainConfig).

    Raises CheckpointIntegrityError on unreadable/truncated files,
    CheckpointVersionError on schema mismatch, and CheckpointMismatchError
    when the stored trainable set does not fit the rebuilt model.
    """
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointIntegrityError(
            f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise CheckpointIntegrityError(
            f"checkpoint {path} has unexpected payload type {type(payload).__name__}")
    missing = [k for k in ("schema_version", "config", "class_names", "captions",
                           "backbone_fingerprint", "theta") if k not in payload]
    if missing:
        raise CheckpointIntegrityError(
            f"checkpoint {path} is missing entries: {missing}")
    version = payload["schema_version"]
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointVersionError(
            f"checkpoint schema version is {version}, this build supports "
            f"{CHECKPOINT_SCHEMA_VERSION}")
    cfg = train_config_from_flat(payload["config"])
    if expected_backbone is not None and cfg.backbone != expected_backbone:
        raise CheckpointMismatchError(
            f"checkpoint was trained with backbone {cfg.backbone}, "
            f"expected {expected_backbone}")
    model = DualEncoder(cfg.backbone, lora_rank=cfg.lora_rank,
                        lora_scale=cfg.lora_scale, prompt_depth=cfg.prompt_depth,
                        prompt_width=cfg.prompt_width, theta_seed=cfg.seed)
    fingerprint = model.backbone_fingerprint()
    if fingerprint != payload["backbone_fingerprint"]:
        raise CheckpointMismatchError(
            "rebuilt frozen backbone does not match the checkpoint fingerprint "
            f"({fingerprint[:12]}... vs {str(payload['backbone_fingerprint'])[:12]}...)")
    try:
        model.load_trainable_state_dict(payload["theta"])
    except CompatibilityError as exc:
        raise CheckpointMismatchError(str(exc)) from exc
    adapted = AdaptedModel(model=model,
                           class_names=tuple(payload["class_names"]),
                           captions=dict(payload["captions"]),
                           weights=cfg.weights)
    return adapted, cfg


# ---------------------------------------------------------------------------
# Step logs
# ---------------------------------------------------------------------------

def write_train_log(entries, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry.to_json_dict(), sort_keys=True) + "\n")
    return path


def read_train_log(path) -> list:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                entries.append(TrainLogEntry.from_json_dict(json.loads(line)))
    return entries
