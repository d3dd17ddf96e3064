"""The three-part robustness objective.

All batch losses reduce by SUM over the batch; the trainer divides by the
batch size before stepping. Components:

* ``invariant_ce`` — contrastive cross-entropy between image invariant
  embeddings and per-class text rows at temperature tau.
* ``spurious_kl`` — KL divergence from the spurious branch's class
  distribution to a fixed reference (uniform by default), neutralizing
  whatever the spurious features predict.
* ``conditional_hsic`` — class-conditional HSIC between the invariant and
  spurious features of one modality, estimating their dependence given the
  label; RBF kernels with a median-heuristic bandwidth that never receives
  gradient.

``total_loss`` combines them as ``ce + alpha_sp * kl + beta * (hsic_v + hsic_t) / 2``.
"""

from __future__ import annotations

import torch

from .configs import HsicConfig, LossWeights
from .encoder import ClassEmbeddings, DecoupledEmbedding
from .errors import DimensionError, InfiniteDivergenceError, LabelError, ParameterError
from .validation import check_finite, check_labels, check_prob_rows

__all__ = [
    "similarity",
    "class_probs",
    "uniform_reference",
    "invariant_ce",
    "spurious_kl",
    "conditional_hsic",
    "total_loss",
]


def similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Dot product along the last axis; inputs are unit vectors by contract."""
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(
            f"last axes differ: {a.shape[-1]} vs {b.shape[-1]}")
    out = (a * b).sum(dim=-1)
    check_finite(out, "similarity")
    return out


def class_probs(z: torch.Tensor, class_rows: torch.Tensor, tau: float) -> torch.Tensor:
    """Softmax over classes of ``sim(z, class_rows) / tau``.

    ``z`` is (d,) or (N, d); ``class_rows`` is (C, d). Returns (C,) or (N, C).
    Implemented with max-subtraction for stability.
    """
    if not tau > 0:
        raise ParameterError(f"tau must be > 0, got {tau!r}")
    if class_rows.ndim != 2:
        raise DimensionError(
            f"class_rows must be (C, d), got shape {tuple(class_rows.shape)}")
    if z.shape[-1] != class_rows.shape[1]:
        raise DimensionError(
            f"z last axis has size {z.shape[-1]}, expected {class_rows.shape[1]}")
    logits = z @ class_rows.T / tau
    shifted = logits - logits.max(dim=-1, keepdim=True).values
    expd = shifted.exp()
    return expd / expd.sum(dim=-1, keepdim=True)


def uniform_reference(n_classes: int, dtype=torch.float32) -> torch.Tensor:
    """The uniform distribution over ``n_classes``."""
    if n_classes < 2:
        raise ParameterError(f"need at least 2 classes, got {n_classes}")
    return torch.full((n_classes,), 1.0 / n_classes, dtype=dtype)


def invariant_ce(image_invariant: torch.Tensor, class_invariant: torch.Tensor,
                 labels, tau: float) -> torch.Tensor:
    """Sum over the batch of ``-log p(y_i | x_i)`` on the invariant branch."""
    if image_invariant.ndim != 2:
        raise DimensionError(
            f"image_invariant must be (N, d), got shape {tuple(image_invariant.shape)}")
    n, _ = image_invariant.shape
    c = class_invariant.shape[0]
    labels = check_labels(labels, c, n_rows=n)
    if not tau > 0:
        raise ParameterError(f"tau must be > 0, got {tau!r}")
    logits = image_invariant @ class_invariant.T / tau
    shifted = logits - logits.max(dim=-1, keepdim=True).values
    log_probs = shifted - shifted.exp().sum(dim=-1, keepdim=True).log()
    return -log_probs[torch.arange(n), labels].sum()


def spurious_kl(spurious_probs: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """Sum over the batch of ``KL(p_i || reference)`` with the 0*log0 = 0 convention."""
    p = spurious_probs if spurious_probs.ndim == 2 else spurious_probs.unsqueeze(0)
    if reference.ndim != 1:
        raise DimensionError(
            f"reference must be 1-d, got shape {tuple(reference.shape)}")
    if p.shape[-1] != reference.shape[0]:
        raise DimensionError(
            f"probs have {p.shape[-1]} classes, reference has {reference.shape[0]}")
    check_prob_rows(p, "spurious_probs")
    check_prob_rows(reference, "reference")
    mass_on_zero = (p > 0) & (reference <= 0).unsqueeze(0)
    if bool(mass_on_zero.any()):
        idx = int(mass_on_zero.any(dim=-1).nonzero(as_tuple=True)[0][0])
        raise InfiniteDivergenceError(
            f"reference has zero mass where row {idx} has positive probability; "
            f"KL is infinite")
    terms = torch.special.xlogy(p, p) - torch.special.xlogy(p, reference.unsqueeze(0))
    return terms.sum()


def _median(values: torch.Tensor) -> torch.Tensor:
    """Plain median (average of the two middle values for even counts)."""
    v = values.flatten().sort().values
    k = v.shape[0]
    if k % 2:
        return v[k // 2]
    return 0.5 * (v[k // 2 - 1] + v[k // 2])


def _pairwise_sq_dists(x: torch.Tensor) -> torch.Tensor:
    sq = (x * x).sum(dim=-1)
    d2 = sq.unsqueeze(0) + sq.unsqueeze(1) - 2.0 * (x @ x.T)
    return d2.clamp_min(0.0)


def _rbf_gram(x: torch.Tensor, cfg: HsicConfig) -> torch.Tensor:
    """RBF gram matrix with bandwidth sigma^2 from config; bandwidth has no grad."""
    d2 = _pairwise_sq_dists(x)
    if isinstance(cfg.bandwidth, str):   # median heuristic on this group
        n = x.shape[0]
        iu, ju = torch.triu_indices(n, n, offset=1)
        sigma_sq = _median(d2.detach()[iu, ju])
        sigma_sq = torch.clamp(sigma_sq, min=cfg.bandwidth_floor)
    else:
        sigma_sq = torch.as_tensor(cfg.bandwidth, dtype=x.dtype)
    return torch.exp(-d2 / (2.0 * sigma_sq))


def conditional_hsic(invariant: torch.Tensor, spurious: torch.Tensor, labels,
                     cfg: HsicConfig | None = None) -> torch.Tensor:
    """Class-conditional HSIC between two feature sets.

    For every class with at least ``cfg.min_class_count`` members, computes
    the biased HSIC estimate ``trace(K H L H) / (n_c - 1)^2`` on that class's
    rows and averages the per-class values weighted by class count. Returns a
    zero of the input dtype when no class qualifies.
    """
    cfg = cfg or HsicConfig()
    if invariant.ndim != 2 or spurious.ndim != 2:
        raise DimensionError(
            f"features must be (N, d), got {tuple(invariant.shape)} and "
            f"{tuple(spurious.shape)}")
    if invariant.shape[0] != spurious.shape[0]:
        raise DimensionError(
            f"feature row counts differ: {invariant.shape[0]} vs {spurious.shape[0]}")
    n = invariant.shape[0]
    if not isinstance(labels, torch.Tensor):
        labels = torch.as_tensor(list(labels), dtype=torch.long)
    labels = labels.long()
    if labels.ndim != 1 or labels.shape[0] != n:
        raise DimensionError(
            f"labels must be 1-d with {n} entries, got shape {tuple(labels.shape)}")
    if n and int(labels.min()) < 0:
        raise LabelError(f"label {int(labels.min())} is negative")
    total = invariant.new_zeros(())
    weight_sum = 0
    for cls in sorted(set(int(v) for v in labels)):
        idx = (labels == cls).nonzero(as_tuple=True)[0]
        n_c = idx.shape[0]
        if n_c < cfg.min_class_count:
            continue
        u = invariant[idx]
        s = spurious[idx]
        k = _rbf_gram(u, cfg)
        l = _rbf_gram(s, cfg)
        h = torch.eye(n_c, dtype=u.dtype) - u.new_full((n_c, n_c), 1.0 / n_c)
        hsic_c = torch.trace(k @ h @ l @ h) / (n_c - 1) ** 2
        total = total + n_c * hsic_c
        weight_sum += n_c
    if weight_sum == 0:
        return invariant.new_zeros(())
    return total / weight_sum


def total_loss(image: DecoupledEmbedding, text: DecoupledEmbedding,
               class_embeddings: ClassEmbeddings, labels,
               weights: LossWeights | None = None,
               hsic: HsicConfig | None = None):
    """Combine the three terms; returns (scalar tensor, float breakdown dict).

    The breakdown records the raw component values {ce, kl, hsic_v, hsic_t,
    total} before weighting, with ``total`` the weighted combination.
    """
    weights = weights or LossWeights()
    hsic = hsic or HsicConfig()
    n = image.invariant.shape[0]
    c = class_embeddings.invariant.shape[0]
    labels = check_labels(labels, c, n_rows=n)

    ce = invariant_ce(image.invariant, class_embeddings.invariant, labels, weights.tau)

    reference = uniform_reference(c, dtype=image.spurious.dtype)
    p_sp = class_probs(image.spurious, class_embeddings.spurious, weights.tau)
    kl = spurious_kl(p_sp, reference)
    if weights.spurious_text_side:
        p_sp_text = class_probs(text.spurious, class_embeddings.spurious, weights.tau)
        kl = kl + spurious_kl(p_sp_text, reference)

    hsic_v = conditional_hsic(image.invariant, image.spurious, labels, hsic)
    hsic_t = conditional_hsic(text.invariant, text.spurious, labels, hsic)

    total = ce + weights.alpha_sp * kl + weights.beta * (hsic_v + hsic_t) / 2
    breakdown = {
        "ce": float(ce.detach()),
        "kl": float(kl.detach()),
        "hsic_v": float(hsic_v.detach()),
        "hsic_t": float(hsic_t.detach()),
        "total": float(total.detach()),
    }
    return total, breakdown
