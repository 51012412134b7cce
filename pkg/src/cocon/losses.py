"""Loss terms for cooperative-contrastive training.

All functions are pure and differentiable. They operate on embedding tensors
only and know nothing about encoders or data. Shapes follow the channels-last
convention used across the package: dense latent maps are ``(B, S, H, W, D)``
and pooled per-instance embeddings are ``(K, D)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Literal, Sequence

import torch
import torch.nn.functional as F

DEFAULT_TAU = 0.005
DEFAULT_ALPHA = 1.0
DEFAULT_LAMBDA = 10.0

Metric = Literal["cosine01", "dot"]
ABLATIONS = ("cpc", "sim_cpc", "sync_cpc", "cocon")


class ContractViolation(ValueError):
    """Inputs break a structural precondition (shapes, ids, norms)."""


class ParameterError(ValueError):
    """A scalar hyper-parameter is out of its valid range."""


class NormalizationError(ValueError):
    """A vector with (numerically) zero norm cannot be normalized."""


def l2_normalize(x: torch.Tensor, dim: int = -1, eps: float = 1e-12) -> torch.Tensor:
    norm = x.norm(dim=dim, keepdim=True)
    if bool((norm <= eps).any()):
        raise NormalizationError("cannot normalize a zero-norm vector")
    return x / norm


@dataclass
class DensePredictionBatch:
    """Predicted and target latent maps for the predictive NCE task."""

    predicted: torch.Tensor
    target: torch.Tensor
    temperature: float = DEFAULT_TAU

    def __post_init__(self):
        if self.predicted.shape != self.target.shape:
            raise ContractViolation(
                f"predicted {tuple(self.predicted.shape)} != target {tuple(self.target.shape)}"
            )
        if self.predicted.dim() != 5:
            raise ContractViolation("expected tensors of shape (B, S, H, W, D)")
        if not self.temperature > 0:
            raise ParameterError(f"temperature must be > 0, got {self.temperature}")


@dataclass
class ViewEmbeddingBatch:
    """One pooled, unit-norm embedding per instance for a single view."""

    view_id: str
    h: torch.Tensor
    instance_ids: list = field(default_factory=list)

    def __post_init__(self):
        if self.h.dim() != 2:
            raise ContractViolation("h must have shape (K, D)")
        if not self.instance_ids:
            self.instance_ids = list(range(self.h.shape[0]))
        if len(self.instance_ids) != self.h.shape[0]:
            raise ContractViolation("one instance id per row is required")
        if len(set(self.instance_ids)) != len(self.instance_ids):
            raise ContractViolation("instance_ids must be unique within a batch")
        norms = self.h.detach().norm(dim=1)
        if bool(((norms - 1.0).abs() > 1e-5).any()):
            raise ContractViolation("rows of h must be unit-L2-normalized")

    @classmethod
    def from_raw(cls, view_id, h, instance_ids=None):
        return cls(view_id, l2_normalize(h, dim=1), list(instance_ids or []))


@dataclass(frozen=True)
class LossWeights:
    alpha: float = DEFAULT_ALPHA
    lambda_: float = DEFAULT_LAMBDA
    mu_mode: Literal["auto_balance", "fixed"] = "auto_balance"
    mu_value: float = 1.0
    tau: float = DEFAULT_TAU
    metric: Metric = "cosine01"

    def __post_init__(self):
        if self.alpha < 0 or self.lambda_ < 0:
            raise ParameterError("alpha and lambda must be nonnegative")
        if self.mu_mode not in ("auto_balance", "fixed"):
            raise ParameterError(f"unknown mu_mode {self.mu_mode!r}")
        if self.mu_mode == "fixed" and self.mu_value < 0:
            raise ParameterError("fixed mu must be nonnegative")
        if not self.tau > 0:
            raise ParameterError("tau must be > 0")
        if self.metric not in ("cosine01", "dot"):
            raise ParameterError(f"unknown metric {self.metric!r}")


def _scalar(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


@dataclass
class LossReport:
    """Per-term values of one objective evaluation.

    ``total`` keeps its graph so it can be back-propagated; ``to_record``
    flattens everything to floats for the metrics log.
    """

    total: torch.Tensor
    cpc: torch.Tensor
    cpc_per_view: dict
    sync: torch.Tensor
    sim: torch.Tensor
    coop: torch.Tensor
    tau: float
    alpha: float
    lambda_: float
    mu: float
    ablation: str = "cocon"

    def to_record(self) -> dict:
        rec = {
            "total": _scalar(self.total),
            "cpc": _scalar(self.cpc),
            "sync": _scalar(self.sync),
            "sim": _scalar(self.sim),
            "coop": _scalar(self.coop),
            "tau": self.tau,
            "alpha": self.alpha,
            "lambda": self.lambda_,
            "mu": self.mu,
        }
        for view, value in self.cpc_per_view.items():
            rec[f"cpc/{view}"] = _scalar(value)
        return rec


# --------------------------------------------------------------------------
# Predictive NCE
# --------------------------------------------------------------------------


def cpc_nce_loss(batch: DensePredictionBatch) -> torch.Tensor:
    """Mean cross-entropy of each predicted cell against every target cell.

    Every (clip, step, h, w) target is a candidate; the one at the same index
    as the prediction is the positive, all others are negatives.
    """
    pred = l2_normalize(batch.predicted, dim=-1)
    target = l2_normalize(batch.target, dim=-1)
    d = pred.shape[-1]
    pred = pred.reshape(-1, d)
    target = target.reshape(-1, d)
    logits = pred @ target.t() / batch.temperature
    labels = torch.arange(logits.shape[0], device=logits.device)
    return F.cross_entropy(logits, labels)


# --------------------------------------------------------------------------
# Cooperative terms
# --------------------------------------------------------------------------


def cosine_distance(u: torch.Tensor, v: torch.Tensor, metric: Metric = "cosine01") -> torch.Tensor:
    """Distance between unit vectors along the last axis.

    ``cosine01`` maps the cosine to [0, 1] as (1 - u.v) / 2. ``dot`` returns
    the raw dot product.
    """
    if bool((u.detach().norm(dim=-1) == 0).any()) or bool((v.detach().norm(dim=-1) == 0).any()):
        raise NormalizationError("zero-norm input to cosine_distance")
    dot = (u * v).sum(-1)
    if metric == "dot":
        return dot
    return (1.0 - dot) / 2.0


def _pairwise_distance(a: torch.Tensor, b: torch.Tensor, metric: Metric) -> torch.Tensor:
    dot = a @ b.t()
    if metric == "dot":
        return dot
    return (1.0 - dot) / 2.0


def similarity_matrix(batch: ViewEmbeddingBatch, metric: Metric = "cosine01") -> torch.Tensor:
    """K x K distance matrix of one view; symmetric with a zero diagonal."""
    w = _pairwise_distance(batch.h, batch.h, metric)
    w = 0.5 * (w + w.t())
    off = 1.0 - torch.eye(w.shape[0], dtype=w.dtype, device=w.device)
    return w * off


def _check_views(views: Sequence[ViewEmbeddingBatch]):
    if len(views) < 2:
        raise ContractViolation("cooperative losses need at least two views")
    ids = list(views[0].instance_ids)
    for v in views[1:]:
        if list(v.instance_ids) != ids:
            raise ContractViolation(f"view {v.view_id!r} is not aligned by instance_ids")
        if v.h.shape != views[0].h.shape:
            raise ContractViolation("all views must share (K, D)")


def sync_loss(views: Sequence[ViewEmbeddingBatch], metric: Metric = "cosine01") -> torch.Tensor:
    """Mean squared disagreement of per-view distance matrices.

    Averaged over unordered view pairs and ordered off-diagonal instance pairs.
    """
    _check_views(views)
    k = views[0].h.shape[0]
    mats = [similarity_matrix(v, metric) for v in views]
    pairs = list(itertools.combinations(range(len(views)), 2))
    if k < 2:
        return mats[0].sum() * 0.0
    total = sum(((mats[i] - mats[j]) ** 2).sum() for i, j in pairs)
    return total / (len(pairs) * k * (k - 1))


def sim_loss(views: Sequence[ViewEmbeddingBatch], weights: LossWeights = LossWeights()):
    """Cross-view hinge loss; returns ``(loss, mu_used)``.

    For each unordered view pair the positive term is the mean distance of the
    same instance across the two views, and the negative term the mean hinge
    ``max(0, 1 - D)`` over different instances. The negative mean is scaled by
    ``mu_value`` in fixed mode and by 1 under auto-balance, where both
    components carry equal weight. The reported ``mu_used`` is the equivalent
    multiplier on the raw sums (n_pos / n_neg under auto-balance).
    """
    _check_views(views)
    k = views[0].h.shape[0]
    n_pos, n_neg = k, k * (k - 1)
    if weights.mu_mode == "auto_balance":
        mu_mean = 1.0 if n_neg else 0.0
        mu_used = n_pos / n_neg if n_neg else 0.0
    else:
        mu_mean = weights.mu_value
        mu_used = weights.mu_value * n_pos / n_neg if n_neg else 0.0

    off = 1.0 - torch.eye(k, dtype=views[0].h.dtype, device=views[0].h.device)
    total = views[0].h.sum() * 0.0
    for i, j in itertools.combinations(range(len(views)), 2):
        dist = _pairwise_distance(views[i].h, views[j].h, weights.metric)
        pos = torch.diagonal(dist).mean()
        term = pos
        if n_neg:
            neg = (torch.clamp(1.0 - dist, min=0.0) * off).sum() / n_neg
            term = term + mu_mean * neg
        total = total + term
    return total, mu_used


def coop_loss(views: Sequence[ViewEmbeddingBatch], weights: LossWeights = LossWeights()) -> dict:
    """``sync + alpha * sim`` with the parts kept for reporting."""
    sync = sync_loss(views, weights.metric)
    sim, mu = sim_loss(views, weights)
    return {"sync": sync, "sim": sim, "coop": sync + weights.alpha * sim, "mu": mu}


def cocon_loss(
    cpc_terms: dict,
    coop_term: dict | torch.Tensor | float,
    weights: LossWeights = LossWeights(),
    ablation: str = "cocon",
) -> LossReport:
    """Combine per-view CPC losses with the cooperative term.

    ``ablation`` selects which cooperative part ``lambda`` multiplies:
    ``cocon`` uses sync + alpha*sim, ``sim_cpc`` sim only, ``sync_cpc`` sync
    only and ``cpc`` none.
    """
    if not cpc_terms:
        raise ContractViolation("at least one per-view cpc term is required")
    if ablation not in ABLATIONS:
        raise ParameterError(f"unknown ablation {ablation!r}")
    cpc = sum(torch.as_tensor(v) for v in cpc_terms.values())
    cpc = torch.as_tensor(cpc)
    zero = cpc * 0.0
    if isinstance(coop_term, dict):
        sync = torch.as_tensor(coop_term.get("sync", zero))
        sim = torch.as_tensor(coop_term.get("sim", zero))
        coop = torch.as_tensor(coop_term.get("coop", sync + weights.alpha * sim))
        mu = float(coop_term.get("mu", float("nan")))
    else:
        sync = sim = zero
        coop = torch.as_tensor(coop_term)
        mu = float("nan")

    if ablation == "cocon":
        total = cpc + weights.lambda_ * coop
    elif ablation == "sim_cpc":
        total = cpc + weights.lambda_ * sim
    elif ablation == "sync_cpc":
        total = cpc + weights.lambda_ * sync
    else:
        total = cpc
    return LossReport(
        total=total,
        cpc=cpc,
        cpc_per_view=dict(cpc_terms),
        sync=sync,
        sim=sim,
        coop=coop,
        tau=weights.tau,
        alpha=weights.alpha,
        lambda_=weights.lambda_,
        mu=mu,
        ablation=ablation,
    )


def ablation_total(ablation: str, cpc: float, sync: float, sim: float, weights: LossWeights) -> float:
    """Recompute an ablation's objective from logged scalar sub-terms."""
    if ablation == "cocon":
        return cpc + weights.lambda_ * (sync + weights.alpha * sim)
    if ablation == "sim_cpc":
        return cpc + weights.lambda_ * sim
    if ablation == "sync_cpc":
        return cpc + weights.lambda_ * sync
    if ablation == "cpc":
        return cpc
    raise ParameterError(f"unknown ablation {ablation!r}")
