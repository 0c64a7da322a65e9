"""SSL objectives (VICReg, InfoNCE, BYOL) and the WERank weight penalty."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node

VICREG_STD_EPS = 1e-4
_MASKED_LOGIT = -1e9


@dataclass
class WERankConfig:
    """Per-layer WERank coefficients.

    ``variant`` is ``"frobenius"`` (||G - I||_F) or ``"entrywise_l1"``
    (sum |G - I|). ``apply_mask`` defaults to every layer.
    """

    alphas: list[float]
    variant: str = "frobenius"
    normalize_by_d2: bool = True
    apply_mask: Optional[list[bool]] = None

    def __post_init__(self):
        self.alphas = [float(a) for a in self.alphas]
        if any(a < 0 for a in self.alphas):
            raise ValueError("WERank coefficients must be non-negative")
        if self.variant not in ("frobenius", "entrywise_l1"):
            raise ValueError(f"unknown WERank variant {self.variant!r}")
        if self.apply_mask is None:
            self.apply_mask = [True] * len(self.alphas)
        self.apply_mask = [bool(m) for m in self.apply_mask]
        if len(self.apply_mask) != len(self.alphas):
            raise ValueError("apply_mask and alphas differ in length")

    @classmethod
    def uniform(cls, alpha: float, n_layers: int, **kwargs) -> "WERankConfig":
        return cls(alphas=[alpha] * n_layers, **kwargs)

    @property
    def inactive(self) -> bool:
        return all(a == 0 or not m for a, m in zip(self.alphas, self.apply_mask))


@dataclass
class VicregConfig:
    """VICReg weights; ``inv_reduction`` picks how the invariance term averages.

    ``"row"`` is the mean over samples of the squared row distance;
    ``"entry"`` also divides by the embedding width (elementwise MSE).
    """

    inv_coeff: float = 10.0
    var_coeff: float = 10.0
    cov_coeff: float = 1.0
    gamma: float = 1.0
    inv_reduction: str = "row"

    def __post_init__(self):
        if min(self.inv_coeff, self.var_coeff, self.cov_coeff) < 0:
            raise ValueError("VICReg coefficients must be non-negative")
        if self.inv_reduction not in ("row", "entry"):
            raise ValueError(f"unknown inv_reduction {self.inv_reduction!r}")


@dataclass
class InfoNceConfig:
    temperature: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def gram_of_smaller_side(w: Node) -> Node:
    """W^T W when d_in >= d_out, else W W^T (weights map rows: X @ W)."""
    d_in, d_out = w.shape
    return w.T @ w if d_in >= d_out else w @ w.T


def werank_layer(w: Node, variant: str = "frobenius", normalize_by_d2: bool = False) -> Node:
    g = gram_of_smaller_side(w)
    dev = g - ad.const(np.eye(g.shape[0]))
    term = ad.frobenius(dev) if variant == "frobenius" else ad.sum_all(ad.abs_(dev))
    if normalize_by_d2:
        d = max(w.shape)
        term = ad.scale(term, 1.0 / d ** 2)
    return term


def werank(weights: Sequence[Node], cfg: WERankConfig) -> Node:
    """Sum over layers of alpha_l times the gram-to-identity distance."""
    if len(weights) != len(cfg.alphas):
        raise ValueError(f"{len(cfg.alphas)} coefficients for {len(weights)} weight layers")
    total = ad.const(np.zeros((1, 1)))
    for w, alpha, on in zip(weights, cfg.alphas, cfg.apply_mask):
        if not on or alpha == 0:
            continue  # keeps alpha = 0 runs on exactly the unregularized graph
        total = total + ad.scale(werank_layer(w, cfg.variant, cfg.normalize_by_d2), alpha)
    return total


def total_loss(ssl: Node, weights: Sequence[Node], cfg: Optional[WERankConfig]) -> Node:
    if cfg is None:
        return ssl
    return ssl + werank(weights, cfg)


def _offdiag_cov_penalty(z: Node) -> Node:
    n, m = z.shape
    centered = z - ad.col_mean(z)
    cov = ad.scale(centered.T @ centered, 1.0 / n)
    return ad.scale(ad.sum_all(ad.square(ad.offdiag(cov))), 1.0 / m)


def _variance_hinge(z: Node, gamma: float) -> Node:
    std = ad.sqrt(ad.col_var(z) + VICREG_STD_EPS)
    return ad.mean_all(ad.relu(ad.const(np.full((1, 1), gamma)) - std))


def vicreg_terms(z1: Node, z2: Node, cfg: VicregConfig) -> tuple[Node, Node, Node]:
    if z1.shape != z2.shape:
        raise ValueError(f"view shapes differ: {z1.shape} vs {z2.shape}")
    if z1.shape[0] < 2:
        raise ValueError("VICReg needs at least two samples")
    denom = z1.shape[0] * (z1.shape[1] if cfg.inv_reduction == "entry" else 1)
    inv = ad.scale(ad.sum_all(ad.square(z1 - z2)), 1.0 / denom)
    var = ad.scale(_variance_hinge(z1, cfg.gamma) + _variance_hinge(z2, cfg.gamma), 0.5)
    cov = _offdiag_cov_penalty(z1) + _offdiag_cov_penalty(z2)
    return inv, var, cov


def vicreg_loss(z1: Node, z2: Node, cfg: VicregConfig) -> Node:
    inv, var, cov = vicreg_terms(z1, z2, cfg)
    return (ad.scale(inv, cfg.inv_coeff) + ad.scale(var, cfg.var_coeff)
            + ad.scale(cov, cfg.cov_coeff))


def infonce_loss(z1: Node, z2: Node, cfg: InfoNceConfig) -> Node:
    """Symmetric NT-Xent over 2N anchors with cosine similarity."""
    if z1.shape != z2.shape:
        raise ValueError(f"view shapes differ: {z1.shape} vs {z2.shape}")
    n = z1.shape[0]
    if n < 2:
        raise ValueError("InfoNCE needs at least two samples")
    z = ad.row_normalize(ad.concat_rows(z1, z2))
    logits = ad.scale(z @ z.T, 1.0 / cfg.temperature)
    logits = logits + ad.const(np.eye(2 * n) * _MASKED_LOGIT)
    pos = np.zeros((2 * n, 2 * n))
    idx = np.arange(2 * n)
    pos[idx, (idx + n) % (2 * n)] = 1.0
    positive = ad.sum_all(logits * ad.const(pos))
    return ad.scale(ad.sum_all(ad.row_logsumexp(logits)) - positive, 1.0 / (2 * n))


def _mean_cosine_distance(p: Node, t: Node) -> Node:
    cos = ad.row_sum(ad.row_normalize(p) * ad.row_normalize(t))
    return ad.mean_all(ad.const(np.full((1, 1), 2.0)) - ad.scale(cos, 2.0))


def byol_loss(p1: Node, t2: Node, p2: Node, t1: Node) -> Node:
    """Symmetric BYOL regression loss.

    Each direction is the mean of ``2 - 2 cos``; the two directions are
    averaged and the result halved, so it ranges over [0, 2].
    """
    if p1.shape != t2.shape or p2.shape != t1.shape:
        raise ValueError("prediction and target shapes differ")
    both = _mean_cosine_distance(p1, t2) + _mean_cosine_distance(p2, t1)
    return ad.scale(both, 0.25)
