"""Deep learnable prompts.

A :class:`PromptBank` holds ``m`` prompt vectors per tower for each of the
first ``J`` transformer layers. Injection reserves positions ``1..m`` (right
after the CLS/BOS token): layer 1 inserts its vectors there, layers 2..J
replace whatever the previous layer's prompt slots produced with fresh
vectors, and layers above J leave the sequence alone — so the sequence grows
by exactly ``m`` at layer 1 and never changes length again.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import DimensionError, ParameterError

_MODALITIES = ("vision", "text")


class PromptBank(nn.Module):
    """Learnable prompt tokens, indexed by (modality, layer)."""

    def __init__(self, depth: int, width: int, vision_dim: int, text_dim: int,
                 generator: torch.Generator | None = None, init_std: float = 0.02):
        super().__init__()
        if depth < 0:
            raise ParameterError(f"prompt depth must be >= 0, got {depth}")
        if width < 1:
            raise ParameterError(f"prompt width must be >= 1, got {width}")
        self.depth = depth
        self.width = width
        self.vision_dim = vision_dim
        self.text_dim = text_dim

        def bank(dim: int) -> nn.ParameterList:
            tokens = []
            for _ in range(depth):
                t = torch.empty(width, dim)
                t.normal_(mean=0.0, std=init_std, generator=generator)
                tokens.append(nn.Parameter(t))
            return nn.ParameterList(tokens)

        self.vision_tokens = bank(vision_dim)
        self.text_tokens = bank(text_dim)

    def tokens(self, modality: str, layer: int) -> torch.Tensor | None:
        """Prompt block for 1-based ``layer``; None when layer > depth."""
        if modality not in _MODALITIES:
            raise ParameterError(f"modality must be one of {_MODALITIES}, got {modality!r}")
        if layer < 1:
            raise ParameterError(f"layer must be >= 1, got {layer}")
        if layer > self.depth:
            return None
        bank = self.vision_tokens if modality == "vision" else self.text_tokens
        return bank[layer - 1]

    def extra_repr(self) -> str:
        return f"depth={self.depth}, width={self.width}"


def inject_prompts(layer_tokens: torch.Tensor, bank: PromptBank, modality: str,
                   layer: int) -> torch.Tensor:
    """Insert/replace prompt slots ahead of transformer block ``layer``.

    ``layer_tokens`` is (L, d) or (B, L, d). Layers are assumed to be visited
    in order starting at 1, so for layers 2..J the slots written by the
    previous layer already occupy positions 1..m.
    """
    prompts = bank.tokens(modality, layer)
    if prompts is None:
        return layer_tokens
    if layer_tokens.ndim not in (2, 3):
        raise DimensionError(
            f"layer_tokens must be (L, d) or (B, L, d), got shape {tuple(layer_tokens.shape)}"
        )
    d = layer_tokens.shape[-1]
    if prompts.shape[1] != d:
        raise DimensionError(
            f"prompt dim {prompts.shape[1]} does not match token dim {d}"
        )
    m = bank.width
    batched = layer_tokens.ndim == 3
    if batched:
        block = prompts.unsqueeze(0).expand(layer_tokens.shape[0], m, d)
    else:
        block = prompts
    seq_len = layer_tokens.shape[-2]
    if seq_len < 1:
        raise DimensionError("layer_tokens must contain at least the CLS/BOS token")
    lead = layer_tokens[..., :1, :]
    if layer == 1:
        rest = layer_tokens[..., 1:, :]
    else:
        if seq_len < 1 + m:
            raise DimensionError(
                f"sequence of length {seq_len} has no prompt slots to replace at layer {layer}"
            )
        rest = layer_tokens[..., 1 + m:, :]
    return torch.cat([lead, block, rest], dim=-2)
