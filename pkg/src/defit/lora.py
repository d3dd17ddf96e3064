"""Low-rank adapters on frozen linear maps.

An adapter contributes ``scale * A @ B`` on top of a frozen weight ``W0``:
``A`` has shape (d_out, r) and ``B`` (r, d_in). ``A`` starts at zero so a
freshly adapted model reproduces the frozen one exactly; ``B`` starts random
so ``A`` has a gradient path from the first step.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionError, ParameterError

_PROJECTIONS = ("query", "key")
_TOWERS = ("vision", "text")


@dataclass(frozen=True)
class LoraTarget:
    """Which frozen projection an adapter attaches to."""

    projection: str   # "query" | "key"
    tower: str        # "vision" | "text"
    layer: int        # 1-based block index

    def __post_init__(self):
        if self.projection not in _PROJECTIONS:
            raise ParameterError(f"target.projection must be one of {_PROJECTIONS}, got {self.projection!r}")
        if self.tower not in _TOWERS:
            raise ParameterError(f"target.tower must be one of {_TOWERS}, got {self.tower!r}")
        if self.layer < 1:
            raise ParameterError(f"target.layer must be >= 1, got {self.layer}")


class LoraAdapter(nn.Module):
    """Trainable low-rank delta for one (d_out, d_in) weight."""

    def __init__(self, d_out: int, d_in: int, rank: int, scale: float = 1.0,
                 target: LoraTarget | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        if rank < 1:
            raise ParameterError(f"rank must be >= 1, got {rank}")
        if rank >= min(d_out, d_in):
            raise ParameterError(
                f"rank ({rank}) must be smaller than min(d_out, d_in) = {min(d_out, d_in)}"
            )
        if not scale > 0:
            raise ParameterError(f"scale must be > 0, got {scale}")
        self.rank = rank
        self.scale = float(scale)
        self.target = target
        self.A = nn.Parameter(torch.zeros(d_out, rank))
        b = torch.empty(rank, d_in)
        b.normal_(mean=0.0, std=rank ** -0.5, generator=generator)
        self.B = nn.Parameter(b)

    def delta(self) -> torch.Tensor:
        """The dense weight update, ``scale * A @ B``."""
        return self.scale * (self.A @ self.B)

    def extra_repr(self) -> str:
        d_out, r = self.A.shape
        return f"d_out={d_out}, d_in={self.B.shape[1]}, rank={r}, scale={self.scale}"


def lora_forward(x: torch.Tensor, w0: torch.Tensor, adapter: LoraAdapter) -> torch.Tensor:
    """Apply the adapted map ``(W0 + scale*A@B) x`` without materializing it.

    ``x`` may be a vector (d_in,) or batched (..., d_in). ``w0`` never receives
    gradient here even if it requires grad elsewhere.
    """
    if w0.ndim != 2:
        raise DimensionError(f"w0 must be 2-d, got shape {tuple(w0.shape)}")
    d_out, d_in = w0.shape
    if adapter.A.shape[0] != d_out:
        raise DimensionError(
            f"adapter A output axis has size {adapter.A.shape[0]}, expected d_out={d_out}"
        )
    if adapter.B.shape[1] != d_in:
        raise DimensionError(
            f"adapter B input axis has size {adapter.B.shape[1]}, expected d_in={d_in}"
        )
    if x.shape[-1] != d_in:
        raise DimensionError(
            f"x last axis has size {x.shape[-1]}, expected d_in={d_in}"
        )
    base = F.linear(x, w0.detach())
    low_rank = F.linear(F.linear(x, adapter.B), adapter.A)
    return base + adapter.scale * low_rank


def lora_merge(w0: torch.Tensor, adapter: LoraAdapter) -> torch.Tensor:
    """Materialize the adapted weight ``W0 + scale*A@B``."""
    if w0.ndim != 2:
        raise DimensionError(f"w0 must be 2-d, got shape {tuple(w0.shape)}")
    if adapter.A.shape[0] != w0.shape[0]:
        raise DimensionError(
            f"adapter A output axis has size {adapter.A.shape[0]}, expected d_out={w0.shape[0]}"
        )
    if adapter.B.shape[1] != w0.shape[1]:
        raise DimensionError(
            f"adapter B input axis has size {adapter.B.shape[1]}, expected d_in={w0.shape[1]}"
        )
    return w0.detach() + adapter.delta()


class LoraLinear(nn.Module):
    """A frozen ``nn.Linear`` plus a trainable low-rank adapter.

    The frozen weight and bias stay in the state dict (requires_grad=False) so
    the backbone fingerprint covers them; only ``adapter.A``/``adapter.B``
    train.
    """

    def __init__(self, weight: torch.Tensor, bias: torch.Tensor | None,
                 rank: int, scale: float, target: LoraTarget,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.weight = nn.Parameter(weight.detach().clone(), requires_grad=False)
        if bias is not None:
            self.bias = nn.Parameter(bias.detach().clone(), requires_grad=False)
        else:
            self.bias = None
        d_out, d_in = weight.shape
        self.adapter = LoraAdapter(d_out, d_in, rank=rank, scale=scale,
                                   target=target, generator=generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        base = F.linear(x, self.weight, self.bias)
        low_rank = F.linear(F.linear(x, self.adapter.B), self.adapter.A)
        return base + self.adapter.scale * low_rank

    def merged_weight(self) -> torch.Tensor:
        return lora_merge(self.weight, self.adapter)
