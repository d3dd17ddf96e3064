"""Input-validation helpers.

Small sklearn-style ``check_*`` functions used at public API boundaries. Each
returns its (possibly coerced) input on success and raises a typed error from
:mod:`defit.errors` on failure, so call sites stay one line.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .errors import DimensionError, LabelError, NumericError, ParameterError

__all__ = [
    "check_positive",
    "check_non_negative",
    "check_in_range",
    "check_tensor",
    "check_finite",
    "check_unit_rows",
    "check_labels",
    "check_prob_rows",
]


def check_positive(value: float, name: str) -> float:
    if not value > 0:
        raise ParameterError(f"{name} must be > 0, got {value!r}")
    return value


def check_non_negative(value: float, name: str) -> float:
    if not value >= 0:
        raise ParameterError(f"{name} must be >= 0, got {value!r}")
    return value


def check_in_range(value: float, lo: float, hi: float, name: str) -> float:
    if not (lo <= value <= hi):
        raise ParameterError(f"{name} must be in [{lo}, {hi}], got {value!r}")
    return value


def check_tensor(x: torch.Tensor, ndim: int, name: str, last_dim: int | None = None) -> torch.Tensor:
    """Check rank and (optionally) the size of the last axis."""
    if not isinstance(x, torch.Tensor):
        raise DimensionError(f"{name} must be a tensor, got {type(x).__name__}")
    if x.ndim != ndim:
        raise DimensionError(f"{name} must have {ndim} dims, got shape {tuple(x.shape)}")
    if last_dim is not None and x.shape[-1] != last_dim:
        raise DimensionError(
            f"{name} last axis must have size {last_dim}, got {x.shape[-1]} "
            f"(shape {tuple(x.shape)})"
        )
    return x


def check_finite(x: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(f"{name} contains non-finite values")
    return x


def check_unit_rows(x: torch.Tensor, name: str, atol: float = 1e-4) -> torch.Tensor:
    """Check that every row (last axis) of ``x`` has unit L2 norm."""
    norms = torch.linalg.vector_norm(x.detach(), dim=-1)
    if not torch.all((norms - 1.0).abs() <= atol):
        worst = float((norms - 1.0).abs().max())
        raise NumericError(f"{name} rows must be unit-norm (max |norm-1| = {worst:.3g})")
    return x


def check_labels(labels, n_classes: int, n_rows: int | None = None):
    """Validate integer labels in [0, n_classes); returns a 1-d LongTensor."""
    if isinstance(labels, torch.Tensor):
        t = labels.long()
    else:
        t = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if t.ndim != 1:
        raise DimensionError(f"labels must be 1-d, got shape {tuple(t.shape)}")
    if n_rows is not None and t.shape[0] != n_rows:
        raise DimensionError(f"labels length {t.shape[0]} does not match batch size {n_rows}")
    bad = ((t < 0) | (t >= n_classes)).nonzero(as_tuple=True)[0]
    if bad.numel():
        i = int(bad[0])
        raise LabelError(
            f"label {int(t[i])} at position {i} is outside [0, {n_classes})"
        )
    return t


def check_prob_rows(p: torch.Tensor | np.ndarray, name: str, atol: float = 1e-6):
    """Check that each row of ``p`` is a probability distribution."""
    arr = p.detach().cpu().numpy() if isinstance(p, torch.Tensor) else np.asarray(p)
    if np.any(arr < -atol):
        raise NumericError(f"{name} has negative entries")
    sums = arr.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=atol):
        worst = float(np.abs(sums - 1.0).max())
        raise NumericError(f"{name} rows must sum to 1 (max |sum-1| = {worst:.3g})")
    return p


def as_records(X) -> Sequence:
    """Coerce estimator input to a record sequence (manifest or list of records)."""
    from .manifest import DatasetManifest  # local import avoids a cycle

    if isinstance(X, DatasetManifest):
        return list(X.records)
    return list(X)
