"""Loss functions for every training mode, with their reported components."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

EPS = 1e-12


class ContractError(ValueError):
    pass


@dataclass
class LossReport:
    recon_nll: float = 0.0
    kl_per_example: float = 0.0
    kl_aggregated: float = 0.0
    bow_loss: float = 0.0
    mono_loss: float = 0.0
    prior_fit: float = 0.0
    total: float = 0.0
    anneal_weight: float = 1.0

    def as_dict(self) -> dict:
        return asdict(self)


# -- plain numpy references ------------------------------------------------------
def _check_simplex(v: np.ndarray, name: str) -> None:
    if np.any(v < -1e-12) or np.any(np.abs(v.sum(-1) - 1.0) > 1e-6):
        raise ContractError(f"{name} is not a probability vector")


def categorical_kl(q, p) -> float:
    """KL(q ∥ p) in nats with 0·log 0 = 0 and p floored at 1e-12."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    _check_simplex(q, "q")
    _check_simplex(p, "p")
    terms = np.where(q > 0, q * (np.log(np.where(q > 0, q, 1.0)) - np.log(np.maximum(p, EPS))), 0.0)
    return float(terms.sum())


def kl_matrix(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Elementwise KL over the last axis for stacked distributions."""
    logq = np.log(np.where(q > 0, q, 1.0))
    return np.where(q > 0, q * (logq - np.log(np.maximum(p, EPS))), 0.0).sum(-1)


def aggregated_kl_np(posteriors: np.ndarray, priors: np.ndarray) -> float:
    """Σ_k KL(mean_n q_k ∥ mean_n p_k) for N x K x C arrays."""
    return float(kl_matrix(posteriors.mean(0), priors.mean(0)).sum())


def mean_kl_np(posteriors: np.ndarray, priors: np.ndarray) -> float:
    """mean_n Σ_k KL(q_nk ∥ p_nk)."""
    return float(kl_matrix(posteriors, priors).sum(-1).mean())


# -- differentiable terms ----------------------------------------------------------
def categorical_kl_tensor(post_logits: Tensor, prior_logits: Tensor) -> Tensor:
    """Per-example Σ_k KL(q_k ∥ p_k) (shape N) from logits, computed stably."""
    logq = ad.log_softmax(post_logits, axis=-1)
    logp = ad.log_softmax(prior_logits, axis=-1)
    q = ad.exp(logq)
    return (q * (logq - logp)).sum(axis=(1, 2))


def aggregated_kl(post_logits: Tensor, prior_logits: Tensor) -> Tensor:
    """Σ_k KL(mean_n q_k ∥ mean_n p_k) as a differentiable scalar."""
    qbar = ad.softmax(post_logits, axis=-1).mean(axis=0)
    pbar = ad.softmax(prior_logits, axis=-1).mean(axis=0)
    return (qbar * (ad.log(qbar + EPS) - ad.log(pbar + EPS))).sum()


def prior_fit_loss(post_logits: Tensor, prior_logits: Tensor) -> Tensor:
    """mean_n Σ_k KL(q ∥ p) with q held constant: trains only the prior side."""
    return categorical_kl_tensor(Tensor(post_logits.data), prior_logits).mean()


def recon_nll(token_log_probs: Tensor, mask: np.ndarray) -> Tensor:
    """Masked mean negative log-likelihood per target token."""
    m = mask.astype(np.float64)
    return -(token_log_probs * Tensor(m)).sum() * (1.0 / m.sum())


def bow_loss(bow_dist: Tensor, bow_targets: np.ndarray, degenerate: np.ndarray | None = None) -> Tensor:
    """-mean_n Σ_i p_i log p̂(i | z); degenerate target rows are skipped."""
    keep = np.ones(bow_targets.shape[0], dtype=bool) if degenerate is None else ~degenerate
    if not keep.any():
        return Tensor(0.0)
    targets = np.where(keep[:, None], bow_targets, 0.0)
    ce = -(Tensor(targets) * ad.log(bow_dist + EPS)).sum()
    return ce * (1.0 / keep.sum())


def gaussian_kl(mu_q: Tensor, logvar_q: Tensor, mu_p: Tensor, logvar_p: Tensor) -> Tensor:
    """Closed-form KL between diagonal Gaussians, summed over dims; shape N."""
    diff = mu_q - mu_p
    term = (logvar_p - logvar_q) + (ad.exp(logvar_q) + diff * diff) / ad.exp(logvar_p) - 1.0
    return term.sum(axis=-1) * 0.5


def kl_anneal(step: int, schedule: str = "linear", ramp_steps: int = 1000) -> float:
    """KL weight: ``min(1, step / ramp_steps)`` for linear, 1 for none."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if schedule == "none":
        return 1.0
    if schedule != "linear":
        raise ValueError(f"unknown anneal schedule {schedule!r}")
    if ramp_steps <= 0:
        raise ValueError("linear annealing needs ramp_steps > 0")
    return min(1.0, step / ramp_steps)


# -- full objectives ------------------------------------------------------------------
def cvae_elbo_loss(token_log_probs: Tensor, tgt_mask: np.ndarray, post_logits: Tensor,
                   prior_logits: Tensor, anneal_weight: float) -> tuple[Tensor, LossReport]:
    """recon + w · mean_n Σ_k KL(q ∥ p)."""
    rec = recon_nll(token_log_probs, tgt_mask)
    kl = categorical_kl_tensor(post_logits, prior_logits).mean()
    total = rec + kl * anneal_weight
    agg = aggregated_kl(post_logits, prior_logits)
    return total, LossReport(rec.item(), kl.item(), agg.item(), total=total.item(), anneal_weight=anneal_weight)


def micvae_loss(token_log_probs: Tensor, tgt_mask: np.ndarray, post_logits: Tensor,
                prior_logits: Tensor) -> tuple[Tensor, LossReport]:
    """recon + Σ_k KL(aggregated posterior ∥ aggregated prior); no annealing."""
    rec = recon_nll(token_log_probs, tgt_mask)
    agg = aggregated_kl(post_logits, prior_logits)
    total = rec + agg
    with ad.no_grad():
        kl = categorical_kl_tensor(post_logits, prior_logits).mean()
    return total, LossReport(rec.item(), kl.item(), agg.item(), total=total.item(), anneal_weight=1.0)


def mono_loss(bow_dist: Tensor, bow_targets: np.ndarray, degenerate: np.ndarray,
              post_logits: Tensor, prior_logits: Tensor) -> tuple[Tensor, LossReport]:
    """BoW reconstruction of x from z plus aggregated KL (minimised form)."""
    rec = bow_loss(bow_dist, bow_targets, degenerate)
    agg = aggregated_kl(post_logits, prior_logits)
    total = rec + agg
    return total, LossReport(kl_aggregated=agg.item(), mono_loss=total.item(), total=total.item())


def vnmt_loss(token_log_probs: Tensor, tgt_mask: np.ndarray, post, prior,
              anneal_weight: float) -> tuple[Tensor, LossReport]:
    """recon + w · closed-form Gaussian KL (VNMT baseline)."""
    rec = recon_nll(token_log_probs, tgt_mask)
    kl = gaussian_kl(post.mu, post.logvar, prior.mu, prior.logvar).mean()
    total = rec + kl * anneal_weight
    return total, LossReport(rec.item(), kl.item(), total=total.item(), anneal_weight=anneal_weight)


def nonlatent_loss(token_log_probs: Tensor, tgt_mask: np.ndarray) -> tuple[Tensor, LossReport]:
    rec = recon_nll(token_log_probs, tgt_mask)
    return rec, LossReport(rec.item(), total=rec.item())
