"""Similarity distributions over the bank, contrastive and DDM losses.

Every query is scored against ``K + 1`` candidates: its positive key in slot
0 followed by the ``K`` bank entries. A :class:`SimilarityDistribution` keeps
the temperature-scaled logits over those slots; probabilities and
log-probabilities are derived with a max-subtracted softmax.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor

MODES = ("clsa", "one_hot_ddm", "strong_query_contrastive", "strong_query_and_key", "baseline")


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.2
    beta: float = 1.0
    mode: str = "clsa"
    tau_ddm: float | None = None  # defaults to ``tau``
    ddm_reduction: str = "sum"  # over strong crops: "sum" or "mean"

    def __post_init__(self):
        if self.tau <= 0 or (self.tau_ddm is not None and self.tau_ddm <= 0):
            raise ValueError("temperatures must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.ddm_reduction not in ("sum", "mean"):
            raise ValueError("ddm_reduction must be 'sum' or 'mean'")

    @property
    def ddm_tau(self) -> float:
        return self.tau if self.tau_ddm is None else self.tau_ddm


@dataclass(frozen=True)
class SimilarityDistribution:
    logits: Tensor  # (..., K + 1), positive first, already divided by tau
    tau: float

    @property
    def probs(self) -> Tensor:
        return torch.softmax(self.logits, dim=-1)

    @property
    def log_probs(self) -> Tensor:
        return torch.log_softmax(self.logits, dim=-1)

    @property
    def p_pos(self) -> Tensor:
        return self.probs[..., 0]

    @property
    def p_neg(self) -> Tensor:
        return self.probs[..., 1:]

    @property
    def support_size(self) -> int:
        return self.logits.shape[-1]


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity along the last dimension."""
    a = a if torch.is_tensor(a) else torch.as_tensor(a, dtype=torch.float64)
    b = b if torch.is_tensor(b) else torch.as_tensor(b, dtype=a.dtype)
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    if torch.any(na == 0) or torch.any(nb == 0):
        raise ValueError("cosine similarity is undefined for zero vectors")
    return (a * b).sum(-1) / (na * nb)


def similarity_logits(query: Tensor, positive: Tensor, bank: Tensor, tau: float) -> Tensor:
    """``[sim(q, pos), sim(q, bank_1), ..., sim(q, bank_K)] / tau``."""
    q = F.normalize(query, dim=-1)
    pos = F.normalize(positive, dim=-1)
    neg = F.normalize(bank.to(q.dtype), dim=-1)
    l_pos = (q * pos).sum(-1, keepdim=True)
    l_neg = q @ neg.T
    return torch.cat([l_pos, l_neg], dim=-1) / tau


def conditional_distribution(query: Tensor, positive: Tensor, bank: Tensor, tau: float) -> SimilarityDistribution:
    if tau <= 0:
        raise ValueError("tau must be positive")
    return SimilarityDistribution(similarity_logits(query, positive, bank, tau), tau)


def contrastive_loss(queries: Tensor, keys: Tensor, bank: Tensor, tau: float) -> Tensor:
    """Mean over the batch of ``-log p(positive | query)``."""
    dist = conditional_distribution(queries, keys, bank, tau)
    return -dist.log_probs[..., 0].mean()


def _probs_and_logs(dist) -> tuple[Tensor, Tensor]:
    if isinstance(dist, SimilarityDistribution):
        return dist.probs, dist.log_probs
    p = torch.as_tensor(dist)
    return p, torch.log(p)


def ddm_loss(weak, strong) -> Tensor:
    """Cross-entropy of the strong distribution against the weak one.

    The weak distribution is a fixed target: no gradient flows into it.
    Both arguments may be :class:`SimilarityDistribution` objects or
    probability tensors of shape ``(..., K + 1)``.
    """
    p_weak, _ = _probs_and_logs(weak)
    _, log_strong = _probs_and_logs(strong)
    if p_weak.shape[-1] != log_strong.shape[-1]:
        raise ValueError(
            f"support size mismatch: {p_weak.shape[-1]} vs {log_strong.shape[-1]}"
        )
    ce = -(p_weak.detach() * log_strong).sum(-1)
    return ce.mean()


@dataclass
class ViewEmbeddings:
    """Embeddings of one batch: weak query, key, and one strong query per crop size."""

    query: Tensor
    key: Tensor
    strong: list[Tensor] = field(default_factory=list)
    strong_key: Tensor | None = None


def total_loss(views: ViewEmbeddings, bank: Tensor, cfg: LossConfig) -> tuple[Tensor, dict]:
    """Contrastive loss plus ``beta`` times the DDM loss summed over strong crops.

    ``cfg.mode`` routes the strong views:

    * ``clsa`` -- DDM with the weak query's distribution as soft target.
    * ``one_hot_ddm`` -- DDM target replaced by the one-hot positive, i.e. a
      contrastive loss on each strong query.
    * ``strong_query_contrastive`` -- the strong view replaces the weak query.
    * ``strong_query_and_key`` -- strong query against a strong key.
    * ``baseline`` -- contrastive loss on weak views only.
    """
    mode = cfg.mode
    needs_strong = mode != "baseline"
    if needs_strong and not views.strong:
        raise ValueError(f"mode {mode!r} needs at least one strong view")
    if mode == "strong_query_and_key" and views.strong_key is None:
        raise ValueError("mode 'strong_query_and_key' needs a strong key view")

    key = views.key.detach()
    diag: dict = {}
    ddm_terms: list[Tensor] = []

    if mode == "strong_query_contrastive":
        terms = [contrastive_loss(z, key, bank, cfg.tau) for z in views.strong]
        loss_c = torch.stack(terms).mean()
    elif mode == "strong_query_and_key":
        skey = views.strong_key.detach()
        terms = [contrastive_loss(z, skey, bank, cfg.tau) for z in views.strong]
        loss_c = torch.stack(terms).mean()
    else:
        weak = conditional_distribution(views.query, key, bank, cfg.tau)
        loss_c = -weak.log_probs[..., 0].mean()
        diag["p_pos_mean"] = weak.p_pos.mean().item()
        if mode in ("clsa", "one_hot_ddm"):
            tau_d = cfg.ddm_tau
            weak_d = weak if tau_d == cfg.tau else conditional_distribution(views.query, key, bank, tau_d)
            p_strong = []
            for z in views.strong:
                strong = conditional_distribution(z, key, bank, tau_d)
                if mode == "clsa":
                    ddm_terms.append(ddm_loss(weak_d, strong))
                else:
                    ddm_terms.append(-strong.log_probs[..., 0].mean())
                p_strong.append(strong.p_pos.mean().item())
            diag["p_pos_strong_mean"] = p_strong

    loss = loss_c
    if ddm_terms:
        loss_d = torch.stack(ddm_terms)
        loss_d = loss_d.sum() if cfg.ddm_reduction == "sum" else loss_d.mean()
        if cfg.beta != 0:
            loss = loss_c + cfg.beta * loss_d
        diag["loss_ddm"] = [t.item() for t in ddm_terms]
    else:
        diag["loss_ddm"] = [0.0] * max(1, len(views.strong))
    diag["loss_contrastive"] = loss_c.item()
    diag["loss_total"] = loss.item()
    return loss, diag
