"""Dual encoder with frozen backbone, low-rank adapters, deep prompts, and
feature-splitting heads.

Construction is fully deterministic: frozen tower weights come from
``config.seed`` and the trainable set (adapter ``B`` factors, prompt tokens,
head weights) from ``theta_seed``, each through its own ``torch.Generator``.
Only the trainable set ever receives gradients; the frozen parameters are
covered by a content fingerprint that checkpoints verify on load.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from . import tokenizer
from .configs import BackboneConfig
from .errors import (
    CompatibilityError,
    ContextLengthError,
    DegenerateEmbeddingError,
    DimensionError,
    ParameterError,
    UnknownClassError,
)
from .lora import LoraLinear, LoraTarget
from .prompts import PromptBank, inject_prompts

TEMPLATE_PREFIX = "a photo of a"

_BRANCHES = ("invariant", "spurious")
_MODALITIES = ("vision", "text")


def class_prompt_text(class_name: str, caption: str | None = None) -> str:
    """The text encoded for a class row: template plus optional curated caption."""
    base = f"{TEMPLATE_PREFIX} {class_name}"
    if caption:
        return f"{base}, {caption}"
    return base


def _frozen_linear(d_in: int, d_out: int, g: torch.Generator, std: float,
                   bias: bool = True) -> nn.Linear:
    lin = nn.Linear(d_in, d_out, bias=bias)
    lin.weight.data.normal_(0.0, std, generator=g)
    if bias:
        lin.bias.data.zero_()
    for p in lin.parameters():
        p.requires_grad_(False)
    return lin


def _frozen_norm(dim: int) -> nn.LayerNorm:
    ln = nn.LayerNorm(dim)
    for p in ln.parameters():
        p.requires_grad_(False)
    return ln


class TransformerBlock(nn.Module):
    """Pre-LN block; query/key projections carry low-rank adapters."""

    def __init__(self, dim: int, n_heads: int, tower: str, layer_idx: int,
                 rank: int, scale: float, backbone_gen: torch.Generator,
                 theta_gen: torch.Generator, mlp_ratio: int = 4):
        super().__init__()
        if dim % n_heads:
            raise ParameterError(f"dim {dim} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        std = dim ** -0.5
        self.ln1 = _frozen_norm(dim)
        wq = torch.empty(dim, dim).normal_(0.0, std, generator=backbone_gen)
        wk = torch.empty(dim, dim).normal_(0.0, std, generator=backbone_gen)
        zero = torch.zeros(dim)
        self.q = LoraLinear(wq, zero, rank=rank, scale=scale,
                            target=LoraTarget("query", tower, layer_idx),
                            generator=theta_gen)
        self.k = LoraLinear(wk, zero, rank=rank, scale=scale,
                            target=LoraTarget("key", tower, layer_idx),
                            generator=theta_gen)
        self.v = _frozen_linear(dim, dim, backbone_gen, std)
        self.o = _frozen_linear(dim, dim, backbone_gen, std)
        self.ln2 = _frozen_norm(dim)
        self.fc1 = _frozen_linear(dim, mlp_ratio * dim, backbone_gen, std)
        self.fc2 = _frozen_linear(mlp_ratio * dim, dim, backbone_gen, (mlp_ratio * dim) ** -0.5)

    def _attend(self, x: torch.Tensor, adapted: bool) -> torch.Tensor:
        b, length, dim = x.shape
        h = self.ln1(x)
        if adapted:
            q = self.q(h)
            k = self.k(h)
        else:
            q = F.linear(h, self.q.weight, self.q.bias)
            k = F.linear(h, self.k.weight, self.k.bias)
        v = self.v(h)
        dh = dim // self.n_heads

        def split(t):  # (B, L, D) -> (B, nh, L, dh)
            return t.view(b, length, self.n_heads, dh).transpose(1, 2)

        attn = split(q) @ split(k).transpose(-1, -2) * dh ** -0.5
        attn = attn.softmax(dim=-1)
        out = (attn @ split(v)).transpose(1, 2).reshape(b, length, dim)
        return self.o(out)

    def forward(self, x: torch.Tensor, adapted: bool = True) -> torch.Tensor:
        x = x + self._attend(x, adapted)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x


class VisionTower(nn.Module):
    def __init__(self, cfg: BackboneConfig, rank: int, scale: float,
                 backbone_gen: torch.Generator, theta_gen: torch.Generator):
        super().__init__()
        self.cfg = cfg
        patch_dim = cfg.channels * cfg.patch_size * cfg.patch_size
        self.patch_embed = _frozen_linear(patch_dim, cfg.vision_dim, backbone_gen,
                                          patch_dim ** -0.5)
        self.cls_token = nn.Parameter(
            torch.empty(cfg.vision_dim).normal_(0.0, 0.02, generator=backbone_gen),
            requires_grad=False)
        self.pos_embed = nn.Parameter(
            torch.empty(1 + cfg.patch_or_token_count, cfg.vision_dim)
            .normal_(0.0, 0.02, generator=backbone_gen),
            requires_grad=False)
        self.blocks = nn.ModuleList([
            TransformerBlock(cfg.vision_dim, cfg.n_heads, "vision", j + 1,
                             rank, scale, backbone_gen, theta_gen)
            for j in range(cfg.vision_layers)
        ])
        self.ln_final = _frozen_norm(cfg.vision_dim)
        self.proj = _frozen_linear(cfg.vision_dim, cfg.joint_dim, backbone_gen,
                                   cfg.vision_dim ** -0.5, bias=False)

    def _patchify(self, images: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if images.ndim != 4:
            raise DimensionError(
                f"images must be (B, C, H, W), got shape {tuple(images.shape)}")
        b, c, h, w = images.shape
        if c != cfg.channels:
            raise DimensionError(f"images channel axis has size {c}, expected {cfg.channels}")
        if h != cfg.image_size or w != cfg.image_size:
            raise DimensionError(
                f"images spatial axes are {h}x{w}, expected {cfg.image_size}x{cfg.image_size}")
        g, p = cfg.patch_grid, cfg.patch_size
        x = images.reshape(b, c, g, p, g, p)
        x = x.permute(0, 2, 4, 1, 3, 5).reshape(b, g * g, c * p * p)
        return x

    def forward(self, images: torch.Tensor, bank: PromptBank | None,
                adapted: bool = True) -> torch.Tensor:
        x = self.patch_embed(self._patchify(images))
        cls = self.cls_token.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        for j, block in enumerate(self.blocks, start=1):
            if bank is not None:
                x = inject_prompts(x, bank, "vision", j)
            x = block(x, adapted=adapted)
        x = self.ln_final(x)
        return self.proj(x[:, 0])


class TextTower(nn.Module):
    def __init__(self, cfg: BackboneConfig, rank: int, scale: float,
                 backbone_gen: torch.Generator, theta_gen: torch.Generator):
        super().__init__()
        self.cfg = cfg
        self.token_embed = nn.Embedding(cfg.vocab_size, cfg.text_dim)
        self.token_embed.weight.data.normal_(0.0, 0.02, generator=backbone_gen)
        self.token_embed.weight.requires_grad_(False)
        self.pos_embed = nn.Parameter(
            torch.empty(cfg.patch_or_token_count, cfg.text_dim)
            .normal_(0.0, 0.02, generator=backbone_gen),
            requires_grad=False)
        self.blocks = nn.ModuleList([
            TransformerBlock(cfg.text_dim, cfg.n_heads, "text", j + 1,
                             rank, scale, backbone_gen, theta_gen)
            for j in range(cfg.text_layers)
        ])
        self.ln_final = _frozen_norm(cfg.text_dim)
        self.proj = _frozen_linear(cfg.text_dim, cfg.joint_dim, backbone_gen,
                                   cfg.text_dim ** -0.5, bias=False)

    def forward(self, token_ids: torch.Tensor, bank: PromptBank | None,
                adapted: bool = True) -> torch.Tensor:
        if token_ids.ndim != 1:
            raise DimensionError(
                f"token_ids must be 1-d, got shape {tuple(token_ids.shape)}")
        length = token_ids.shape[0]
        if length < 2:
            raise DimensionError("token_ids must contain at least BOS and EOS")
        if length > self.cfg.patch_or_token_count:
            raise ContextLengthError(
                f"token sequence of length {length} exceeds the backbone limit "
                f"of {self.cfg.patch_or_token_count}")
        if int(token_ids.max()) >= self.cfg.vocab_size or int(token_ids.min()) < 0:
            raise ParameterError("token id outside [0, vocab_size)")
        x = self.token_embed(token_ids) + self.pos_embed[:length]
        x = x.unsqueeze(0)
        for j, block in enumerate(self.blocks, start=1):
            if bank is not None:
                x = inject_prompts(x, bank, "text", j)
            x = block(x, adapted=adapted)
        x = self.ln_final(x)
        shift = bank.width if (bank is not None and bank.depth >= 1) else 0
        pooled = x[0, length - 1 + shift]   # the EOS position
        return self.proj(pooled)


class ProjectionHeads(nn.Module):
    """Four trainable affine heads: {vision, text} x {invariant, spurious}."""

    def __init__(self, joint_dim: int, generator: torch.Generator | None = None,
                 init_std: float = 0.02):
        super().__init__()
        self.joint_dim = joint_dim
        for modality in _MODALITIES:
            for branch in _BRANCHES:
                lin = nn.Linear(joint_dim, joint_dim)
                lin.weight.data.normal_(0.0, init_std, generator=generator)
                lin.bias.data.zero_()
                self.add_module(f"{modality}_{branch}", lin)

    def head(self, modality: str, branch: str) -> nn.Linear:
        if modality not in _MODALITIES:
            raise ParameterError(f"modality must be one of {_MODALITIES}, got {modality!r}")
        if branch not in _BRANCHES:
            raise ParameterError(f"branch must be one of {_BRANCHES}, got {branch!r}")
        return getattr(self, f"{modality}_{branch}")

    @classmethod
    def identity(cls, joint_dim: int) -> "ProjectionHeads":
        """Heads that pass embeddings through unchanged (useful in tests)."""
        heads = cls(joint_dim)
        for modality in _MODALITIES:
            for branch in _BRANCHES:
                lin = heads.head(modality, branch)
                with torch.no_grad():
                    lin.weight.copy_(torch.eye(joint_dim))
                    lin.bias.zero_()
        return heads


@dataclass
class DecoupledEmbedding:
    """Unit-norm invariant and spurious views of one (or a batch of) embedding."""

    invariant: torch.Tensor
    spurious: torch.Tensor
    modality: str


def decouple(z: torch.Tensor, heads: ProjectionHeads, modality: str,
             eps: float = 1e-8) -> DecoupledEmbedding:
    """Split a joint embedding into L2-normalized invariant/spurious parts.

    ``z`` is (d,) or (N, d). Raises if either projection collapses below
    ``eps`` in norm, since its direction would be meaningless.
    """
    if z.shape[-1] != heads.joint_dim:
        raise DimensionError(
            f"z last axis has size {z.shape[-1]}, expected joint_dim={heads.joint_dim}")
    parts = {}
    for branch in _BRANCHES:
        raw = heads.head(modality, branch)(z)
        norm = torch.linalg.vector_norm(raw, dim=-1, keepdim=True)
        if bool((norm < eps).any()):
            raise DegenerateEmbeddingError(
                f"{modality} {branch} projection produced a (near-)zero vector "
                f"(min norm {float(norm.detach().min()):.3g})")
        parts[branch] = raw / norm
    return DecoupledEmbedding(invariant=parts["invariant"],
                              spurious=parts["spurious"], modality=modality)


@dataclass
class ClassEmbeddings:
    """Per-class text rows on both branches; rows are unit-norm."""

    class_names: tuple
    invariant: torch.Tensor   # (C, joint_dim)
    spurious: torch.Tensor    # (C, joint_dim)

    def index_of(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise UnknownClassError(
                f"unknown class {name!r}; known classes: {sorted(self.class_names)}"
            ) from None


class DualEncoder(nn.Module):
    """Frozen two-tower encoder plus the trainable adaptation set."""

    def __init__(self, config: BackboneConfig, lora_rank: int = 4,
                 lora_scale: float = 1.0, prompt_depth: int = 3,
                 prompt_width: int = 2, theta_seed: int | None = None):
        super().__init__()
        if prompt_depth > min(config.vision_layers, config.text_layers):
            raise ParameterError(
                f"prompt_depth ({prompt_depth}) exceeds the shallower tower "
                f"({min(config.vision_layers, config.text_layers)} layers)")
        self.config = config
        self.lora_rank = lora_rank
        self.lora_scale = float(lora_scale)
        backbone_gen = torch.Generator().manual_seed(int(config.seed))
        theta_gen = torch.Generator().manual_seed(
            int(config.seed if theta_seed is None else theta_seed))
        self.vision = VisionTower(config, lora_rank, lora_scale, backbone_gen, theta_gen)
        self.text = TextTower(config, lora_rank, lora_scale, backbone_gen, theta_gen)
        self.prompts = PromptBank(prompt_depth, prompt_width,
                                  config.vision_dim, config.text_dim,
                                  generator=theta_gen)
        self.heads = ProjectionHeads(config.joint_dim, generator=theta_gen)

    # -- tokenization -------------------------------------------------------
    def tokenize(self, text: str) -> torch.Tensor:
        ids = tokenizer.encode(text, self.config.vocab_size)
        if len(ids) > self.config.patch_or_token_count:
            raise ContextLengthError(
                f"text of {len(ids)} tokens exceeds the backbone limit of "
                f"{self.config.patch_or_token_count}")
        return torch.tensor(ids, dtype=torch.long)

    # -- encoding -----------------------------------------------------------
    def encode_images(self, images: torch.Tensor, adapted: bool = True,
                      prompted: bool = True) -> torch.Tensor:
        bank = self.prompts if (prompted and self.prompts.depth > 0) else None
        return self.vision(images, bank, adapted=adapted)

    def encode_image(self, image: torch.Tensor, adapted: bool = True,
                     prompted: bool = True) -> torch.Tensor:
        if image.ndim != 3:
            raise DimensionError(
                f"image must be (C, H, W), got shape {tuple(image.shape)}")
        return self.encode_images(image.unsqueeze(0), adapted=adapted,
                                  prompted=prompted)[0]

    def encode_text(self, token_ids, adapted: bool = True,
                    prompted: bool = True) -> torch.Tensor:
        if not isinstance(token_ids, torch.Tensor):
            token_ids = torch.tensor(list(token_ids), dtype=torch.long)
        bank = self.prompts if (prompted and self.prompts.depth > 0) else None
        return self.text(token_ids, bank, adapted=adapted)

    def encode_texts(self, sequences, adapted: bool = True,
                     prompted: bool = True) -> torch.Tensor:
        return torch.stack([
            self.encode_text(ids, adapted=adapted, prompted=prompted)
            for ids in sequences
        ])

    def frozen_encode_images(self, images: torch.Tensor) -> torch.Tensor:
        """Backbone-only image embeddings (no adapters, no prompts)."""
        return self.vision(images, None, adapted=False)

    def frozen_encode_text(self, token_ids) -> torch.Tensor:
        if not isinstance(token_ids, torch.Tensor):
            token_ids = torch.tensor(list(token_ids), dtype=torch.long)
        return self.text(token_ids, None, adapted=False)

    # -- trainable-set bookkeeping -------------------------------------------
    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def trainable_state_dict(self) -> dict:
        return {name: p.detach().clone()
                for name, p in self.named_parameters() if p.requires_grad}

    def load_trainable_state_dict(self, state: dict) -> None:
        own = {name: p for name, p in self.named_parameters() if p.requires_grad}
        if set(state) != set(own):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise CompatibilityError(
                f"trainable state mismatch (missing: {missing[:4]}, extra: {extra[:4]})")
        with torch.no_grad():
            for name, tensor in state.items():
                if own[name].shape != tensor.shape:
                    raise CompatibilityError(
                        f"parameter {name} has shape {tuple(tensor.shape)}, "
                        f"expected {tuple(own[name].shape)}")
                own[name].copy_(tensor)

    def backbone_fingerprint(self) -> str:
        """sha256 over the frozen parameters, in name order."""
        digest = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            if not p.requires_grad:
                digest.update(name.encode("utf-8"))
                digest.update(str(tuple(p.shape)).encode("utf-8"))
                digest.update(p.detach().cpu().numpy().tobytes())
        return digest.hexdigest()

    def load_backbone_state_dict(self, state: dict) -> None:
        """Optional path for real pretrained weights; keys must be frozen params."""
        frozen = {name: p for name, p in self.named_parameters() if not p.requires_grad}
        unknown = sorted(set(state) - set(frozen))
        if unknown:
            raise CompatibilityError(f"not frozen backbone parameters: {unknown[:4]}")
        with torch.no_grad():
            for name, tensor in state.items():
                if frozen[name].shape != tensor.shape:
                    raise CompatibilityError(
                        f"parameter {name} has shape {tuple(tensor.shape)}, "
                        f"expected {tuple(frozen[name].shape)}")
                frozen[name].copy_(tensor)


def class_text_embeddings(model: DualEncoder, class_names,
                          captions: dict | None = None) -> ClassEmbeddings:
    """Encode one template row per class on both branches.

    ``captions`` optionally maps class name -> designated caption text, which
    is appended to the template before encoding.
    """
    names = tuple(class_names)
    if len(names) < 2:
        raise ParameterError(f"need at least 2 classes, got {len(names)}")
    if len(set(names)) != len(names):
        raise ParameterError(f"class names must be unique, got {names}")
    captions = captions or {}
    inv_rows, sp_rows = [], []
    for name in names:
        text = class_prompt_text(name, captions.get(name))
        z = model.encode_text(model.tokenize(text))
        dec = decouple(z, model.heads, "text")
        inv_rows.append(dec.invariant)
        sp_rows.append(dec.spurious)
    return ClassEmbeddings(class_names=names,
                           invariant=torch.stack(inv_rows),
                           spurious=torch.stack(sp_rows))
