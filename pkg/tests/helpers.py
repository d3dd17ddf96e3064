"""Shared test utilities: random fixtures, finite differences, brute-force oracles."""

from __future__ import annotations

import numpy as np
import torch


def unit_rows(rng: np.random.Generator, n: int, d: int,
              dtype=torch.float32) -> torch.Tensor:
    """(n, d) tensor of L2-normalized rows drawn from a seeded generator."""
    m = rng.normal(size=(n, d))
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    return torch.tensor(m, dtype=dtype)


def numerical_grad(f, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central finite differences of the scalar ``f()`` with respect to ``x``.

    ``f`` must recompute its value from ``x`` on every call; ``x`` is modified
    in place one coordinate at a time and restored afterwards.
    """
    grad = torch.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + h
        hi = float(f())
        flat[i] = orig - h
        lo = float(f())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def analytic_grad(f, x: torch.Tensor) -> torch.Tensor:
    """Autograd gradient of the scalar ``f()`` with respect to leaf ``x``."""
    if x.grad is not None:
        x.grad = None
    value = f()
    value.backward()
    return x.grad.detach().clone()


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(torch.linalg.vector_norm(b)), 1e-12)
    return float(torch.linalg.vector_norm(a - b)) / denom


def rbf_gram_oracle(x: np.ndarray, sigma_sq: float) -> np.ndarray:
    """Loop-built RBF gram matrix exp(-||xi - xj||^2 / (2 sigma^2))."""
    n = x.shape[0]
    gram = np.empty((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(n):
            d2 = float(np.sum((x[i] - x[j]) ** 2))
            gram[i, j] = np.exp(-d2 / (2.0 * sigma_sq))
    return gram


def median_sq_dist_oracle(x: np.ndarray) -> float:
    """Median of the pairwise squared distances over unordered pairs i < j."""
    dists = []
    for i in range(x.shape[0]):
        for j in range(i + 1, x.shape[0]):
            dists.append(float(np.sum((x[i] - x[j]) ** 2)))
    return float(np.median(dists))


def hsic_double_sum_oracle(k: np.ndarray, l: np.ndarray) -> float:
    """Biased HSIC estimate written as the explicit O(n^2) double sum.

    (n-1)^{-2} [ sum_ij K_ij L_ij - (2/n) sum_i (sum_j K_ij)(sum_j L_ij)
                 + (1/n^2) (sum K)(sum L) ]
    """
    n = k.shape[0]
    term1 = 0.0
    for i in range(n):
        for j in range(n):
            term1 += k[i, j] * l[i, j]
    term2 = 0.0
    for i in range(n):
        krow = sum(k[i, j] for j in range(n))
        lrow = sum(l[i, j] for j in range(n))
        term2 += krow * lrow
    term2 *= 2.0 / n
    term3 = k.sum() * l.sum() / (n * n)
    return (term1 - term2 + term3) / (n - 1) ** 2


def conditional_hsic_oracle(u: np.ndarray, s: np.ndarray, labels: np.ndarray,
                            min_class_count: int = 2,
                            bandwidth: float | None = None,
                            bandwidth_floor: float = 1e-6) -> float:
    """Loop implementation of the class-conditional HSIC average."""
    total, weight = 0.0, 0
    for cls in sorted(set(int(v) for v in labels)):
        idx = np.flatnonzero(labels == cls)
        n_c = idx.size
        if n_c < min_class_count:
            continue
        uc, sc = u[idx], s[idx]
        if bandwidth is None:
            sig_u = max(median_sq_dist_oracle(uc), bandwidth_floor)
            sig_s = max(median_sq_dist_oracle(sc), bandwidth_floor)
        else:
            sig_u = sig_s = bandwidth
        k = rbf_gram_oracle(uc, sig_u)
        l = rbf_gram_oracle(sc, sig_s)
        total += n_c * hsic_double_sum_oracle(k, l)
        weight += n_c
    return total / weight if weight else 0.0
