"""Training criteria: positive-weighted BCE for AUs and focal loss for expressions.

Both losses are reduced by the arithmetic mean (over AU components and batch
for BCE, over batch for focal). Probabilities are clamped to ``EPS`` before
taking logs so saturated predictions stay finite.

The ``*_logit_grad`` helpers give closed-form derivatives with respect to the
pre-activation logits; they are used to cross-check autograd.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import NUM_AUS, NUM_EXPR
from .errors import ContractError

EPS = 1e-7


@dataclass
class BCEParams:
    pos_weight: np.ndarray

    def __post_init__(self):
        self.pos_weight = np.asarray(self.pos_weight, dtype=np.float64)
        if self.pos_weight.shape != (NUM_AUS,) or not np.all(self.pos_weight > 0):
            raise ContractError(f"pos_weight must be {NUM_AUS} positive values")

    @classmethod
    def uniform(cls) -> "BCEParams":
        return cls(np.ones(NUM_AUS))


@dataclass
class FocalParams:
    alpha: np.ndarray
    gamma: float = 2.0

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.shape != (NUM_EXPR,) or not np.all(self.alpha > 0):
            raise ContractError(f"alpha must be {NUM_EXPR} positive values")
        if self.gamma < 0:
            raise ContractError("gamma must be non-negative")

    @classmethod
    def uniform(cls, gamma: float = 2.0) -> "FocalParams":
        return cls(np.ones(NUM_EXPR), gamma)


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    dtype = like.dtype if like is not None else None
    device = like.device if like is not None else None
    if isinstance(x, torch.Tensor):
        return x.to(dtype=dtype or x.dtype, device=device or x.device)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64, device=device)


def _bce_terms(log_p, log_1mp, targets, pos_weight):
    return -(pos_weight * targets * log_p + (1 - targets) * log_1mp)


def weighted_bce(probs, targets, params: BCEParams, reduction: str = "mean") -> torch.Tensor:
    """``-[w_i t_i log p_i + (1 - t_i) log(1 - p_i)]`` averaged over every term.

    ``probs`` and ``targets`` have shape (12,) or (N, 12).
    """
    probs = _as_tensor(probs)
    targets = _as_tensor(targets, probs)
    if probs.shape != targets.shape or probs.shape[-1] != NUM_AUS:
        raise ContractError(f"expected matching (..., {NUM_AUS}) shapes, got "
                            f"{tuple(probs.shape)} and {tuple(targets.shape)}")
    w = _as_tensor(params.pos_weight, probs)
    p = probs.clamp(EPS, 1 - EPS)
    terms = _bce_terms(torch.log(p), torch.log1p(-p), targets, w)
    return _reduce(terms, reduction)


def weighted_bce_with_logits(logits: torch.Tensor, targets: torch.Tensor, params: BCEParams,
                             reduction: str = "mean") -> torch.Tensor:
    """Same value as ``weighted_bce(sigmoid(logits), ...)``, evaluated stably."""
    if logits.shape != targets.shape or logits.shape[-1] != NUM_AUS:
        raise ContractError("logits/targets shape mismatch")
    w = _as_tensor(params.pos_weight, logits)
    lo, hi = np.log(EPS), np.log1p(-EPS)
    log_p = F.logsigmoid(logits).clamp(lo, hi)
    log_1mp = F.logsigmoid(-logits).clamp(lo, hi)
    return _reduce(_bce_terms(log_p, log_1mp, targets.to(logits.dtype), w), reduction)


def _focal_from_log_pt(log_pt, targets, params: FocalParams, like):
    alpha = _as_tensor(params.alpha, like)[targets]
    pt = log_pt.exp()
    return -alpha * (1 - pt).clamp_min(0) ** params.gamma * log_pt


def focal_loss(probs, target, params: FocalParams, reduction: str = "mean") -> torch.Tensor:
    """``-alpha_t (1 - p_t)^gamma log p_t`` for a (7,) distribution or an (N, 7) batch."""
    probs = _as_tensor(probs)
    target = torch.as_tensor(target, dtype=torch.long, device=probs.device)
    single = probs.dim() == 1
    if single:
        probs, target = probs[None], target.reshape(1)
    if probs.shape[-1] != NUM_EXPR or target.shape != probs.shape[:1]:
        raise ContractError("probs must be (N, 7) with one target per row")
    if torch.any((target < 0) | (target >= NUM_EXPR)):
        raise ContractError(f"target out of range [0, {NUM_EXPR - 1}]")
    pt = probs.gather(1, target[:, None])[:, 0].clamp(EPS, 1.0)
    out = _focal_from_log_pt(torch.log(pt), target, params, probs)
    return _reduce(out[0] if single else out, reduction)


def focal_loss_with_logits(logits: torch.Tensor, target: torch.Tensor, params: FocalParams,
                           reduction: str = "mean") -> torch.Tensor:
    if logits.dim() != 2 or logits.shape[1] != NUM_EXPR:
        raise ContractError("logits must be (N, 7)")
    target = target.long()
    if torch.any((target < 0) | (target >= NUM_EXPR)):
        raise ContractError(f"target out of range [0, {NUM_EXPR - 1}]")
    log_pt = F.log_softmax(logits, dim=1).gather(1, target[:, None])[:, 0].clamp_min(np.log(EPS))
    return _reduce(_focal_from_log_pt(log_pt, target, params, logits), reduction)


def _reduce(x: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return x.mean()
    if reduction == "sum":
        return x.sum()
    if reduction == "none":
        return x
    raise ContractError(f"unknown reduction {reduction!r}")


# closed-form gradients (numpy, float64)

def weighted_bce_logit_grad(logits: np.ndarray, targets: np.ndarray, pos_weight: np.ndarray) -> np.ndarray:
    """d(mean weighted BCE)/d logits for unsaturated inputs."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    p = 1.0 / (1.0 + np.exp(-z))
    return (-np.asarray(pos_weight) * t * (1 - p) + (1 - t) * p) / z.size


def focal_logit_grad(logits: np.ndarray, targets: np.ndarray, alpha: np.ndarray, gamma: float) -> np.ndarray:
    """d(mean focal loss)/d logits for an (N, 7) batch, with softmax probabilities."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.int64)
    n = z.shape[0]
    e = np.exp(z - z.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    pt = p[np.arange(n), t]
    a = np.asarray(alpha)[t]
    one_m = 1 - pt
    # dFL/dp_t
    modulating_grad = gamma * one_m ** (gamma - 1) * np.log(pt) if gamma > 0 else 0.0
    d_pt = -a * (one_m ** gamma / pt - modulating_grad)
    onehot = np.zeros_like(p)
    onehot[np.arange(n), t] = 1.0
    return (d_pt * pt)[:, None] * (onehot - p) / n
