"""Metric-learning objectives: hinged triplet loss with mining, proxy-NCA.

The triplet hinge is applied explicitly: without it the objective is unbounded
below. Triplet distances default to raw squared Euclidean; proxy-NCA distances
are squared Euclidean on L2-normalized vectors scaled by proxy_scale. Both are
switchable through LossConfig.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

MININGS = ("batch_hard", "all_valid")
REDUCTIONS = ("mean_active", "mean_all", "sum")


@dataclass
class LossConfig:
    margin_alpha: float = 0.3
    mining: str = "batch_hard"
    proxy_scale: float = 3.0
    num_proxies: int = 0
    normalize_triplet: bool = False
    reduction: str = "mean_active"

    def validate(self) -> None:
        if self.margin_alpha < 0:
            raise ValueError("margin_alpha must be nonnegative")
        if self.mining not in MININGS:
            raise ValueError(f"unknown mining {self.mining!r}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if self.proxy_scale <= 0:
            raise ValueError("proxy_scale must be positive")


class ProxyBank(nn.Module):
    """One trainable proxy vector per training class; unused at inference."""

    def __init__(self, num_proxies: int, dim: int, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.proxies = nn.Parameter(
            torch.randn(num_proxies, dim, generator=gen) / dim ** 0.5)

    @property
    def num_proxies(self) -> int:
        return self.proxies.shape[0]


def pairwise_sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    diff = a.unsqueeze(1) - b.unsqueeze(0)
    return (diff * diff).sum(-1)


def _reduce(hinged: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "sum":
        return hinged.sum()
    if reduction == "mean_all":
        return hinged.mean() if hinged.numel() else hinged.sum()
    active = (hinged > 0).sum()
    if active == 0:
        return hinged.sum() * 0.0
    return hinged.sum() / active


def triplet_loss(embeddings: torch.Tensor, identities: torch.Tensor,
                 config: LossConfig) -> torch.Tensor:
    """Hinged triplet loss over mined triplets of an identity-balanced batch.

    batch_hard picks each anchor's hardest positive and hardest negative;
    all_valid enumerates every (a, p, n) with id(a)=id(p)!=id(n), a != p.
    """
    config.validate()
    identities = identities.reshape(-1)
    if embeddings.shape[0] != identities.shape[0]:
        raise ValueError("embeddings and identities length mismatch")
    if identities.unique().numel() < 2:
        raise ValueError("triplet loss needs at least 2 identities in a batch")
    if config.normalize_triplet:
        embeddings = nn.functional.normalize(embeddings, p=2, dim=1)
    d = pairwise_sq_dists(embeddings, embeddings)
    same = identities.unsqueeze(0) == identities.unsqueeze(1)
    eye = torch.eye(len(identities), dtype=torch.bool, device=d.device)

    if config.mining == "batch_hard":
        pos_mask = same & ~eye
        if not pos_mask.any(dim=1).all():
            # an anchor with no distinct positive contributes d_ap = 0
            pos_mask = pos_mask | (eye & ~pos_mask.any(dim=1, keepdim=True))
        d_ap = torch.where(pos_mask, d, torch.full_like(d, -torch.inf)).amax(dim=1)
        d_an = torch.where(~same, d, torch.full_like(d, torch.inf)).amin(dim=1)
        hinged = torch.clamp(d_ap - d_an + config.margin_alpha, min=0.0)
    else:
        a_idx, p_idx, n_idx = [], [], []
        n = len(identities)
        for a in range(n):
            for p in range(n):
                if a == p or identities[a] != identities[p]:
                    continue
                for neg in range(n):
                    if identities[neg] != identities[a]:
                        a_idx.append(a), p_idx.append(p), n_idx.append(neg)
        hinged = torch.clamp(
            d[a_idx, p_idx] - d[a_idx, n_idx] + config.margin_alpha, min=0.0)
    return _reduce(hinged, config.reduction)


def proxy_nca_loss(embeddings: torch.Tensor, class_labels: torch.Tensor,
                   bank: ProxyBank, config: LossConfig) -> torch.Tensor:
    """Proxy-NCA: attract each sample to its class proxy, repel the others.

    loss_i = -log( exp(-d(x_i, p_y)) / sum_{z != y} exp(-d(x_i, p_z)) )
    with d the squared Euclidean distance between L2-normalized vectors
    scaled by proxy_scale. Gradients flow to embeddings and proxies.
    """
    config.validate()
    class_labels = class_labels.reshape(-1)
    if class_labels.numel() and (class_labels.min() < 0
                                 or class_labels.max() >= bank.num_proxies):
        raise ValueError("class label out of proxy range")
    x = nn.functional.normalize(embeddings, p=2, dim=1) * config.proxy_scale
    p = nn.functional.normalize(bank.proxies, p=2, dim=1) * config.proxy_scale
    d = pairwise_sq_dists(x, p)  # N x num_proxies
    pos = d.gather(1, class_labels.unsqueeze(1)).squeeze(1)
    neg_mask = torch.ones_like(d, dtype=torch.bool)
    neg_mask.scatter_(1, class_labels.unsqueeze(1), False)
    neg_lse = torch.logsumexp(
        torch.where(neg_mask, -d, torch.full_like(d, -torch.inf)), dim=1)
    return (pos + neg_lse).mean()


def nearest_proxy(embeddings: torch.Tensor, bank: ProxyBank) -> torch.Tensor:
    """Classify by nearest proxy on the normalized sphere (gate inference)."""
    x = nn.functional.normalize(embeddings, p=2, dim=1)
    p = nn.functional.normalize(bank.proxies, p=2, dim=1)
    return pairwise_sq_dists(x, p).argmin(dim=1)


@dataclass
class GradientCheckReport:
    max_rel_error: float
    tolerance: float
    passed: bool
    per_input: dict[str, float]


def gradient_check(loss_fn, inputs: dict[str, torch.Tensor],
                   tolerance: float = 1e-4,
                   h: float = 1e-5) -> GradientCheckReport:
    """Central finite differences vs autograd, in double precision.

    loss_fn is called as loss_fn(**inputs) and must return a scalar tensor.
    """
    inputs = {k: v.detach().double().requires_grad_(True)
              for k, v in inputs.items()}
    loss = loss_fn(**inputs)
    grads = torch.autograd.grad(loss, list(inputs.values()), allow_unused=True)
    per_input: dict[str, float] = {}
    for (name, tensor), grad in zip(inputs.items(), grads):
        analytic = (torch.zeros_like(tensor) if grad is None else grad)
        flat = tensor.detach().flatten()
        numeric = torch.zeros_like(flat)
        for i in range(flat.numel()):
            for sign in (1.0, -1.0):
                flat[i] += sign * h
                with torch.no_grad():
                    val = loss_fn(**inputs).item()
                numeric[i] += sign * val / (2 * h)
                flat[i] -= sign * h
        a, n = analytic.flatten(), numeric
        denom = torch.clamp(torch.maximum(a.abs(), n.abs()), min=1e-6)
        per_input[name] = float(((a - n).abs() / denom).max())
    worst = max(per_input.values()) if per_input else 0.0
    return GradientCheckReport(
        max_rel_error=worst, tolerance=tolerance,
        passed=worst < tolerance, per_input=per_input)
