"""Posterior-collapse diagnostics computed on held-out pairs."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .corpus import SeqBatch, SentencePair, fixed_batches, make_batch
from .model import LatentSample, TranslationCVAE
from .objectives import aggregated_kl_np, bow_loss, gaussian_kl, mean_kl_np

METRICS_FIELDS = ("step", "kl", "mi_zx", "mi_zy", "kl_aggregated", "nll_per_token", "bow_loss", "anneal_weight")


@dataclass
class CollapseMetrics:
    step: int
    kl: float
    mi_zx: float
    mi_zy: float
    kl_aggregated: float
    nll_per_token: float
    bow_loss: float = float("nan")
    anneal_weight: float = float("nan")

    def row(self) -> dict:
        return asdict(self)


def entropy(p: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats over the last axis."""
    logp = np.log(np.where(p > 0, p, 1.0))
    return -(p * logp).sum(-1)


def mi_estimate(posteriors: np.ndarray) -> float:
    """Plug-in MI between latent and example index under p_D = 1/N.

    Σ_k [ H(mean_n q_k) - mean_n H(q_k) ] for an N x K x C array.
    """
    q = np.asarray(posteriors, dtype=np.float64)
    if q.ndim == 2:
        q = q[:, None, :]
    mi = entropy(q.mean(0)) - entropy(q).mean(0)
    return float(max(mi.sum(), 0.0))


def decomposition_check(posteriors: np.ndarray, shared_prior: np.ndarray) -> float:
    """|mean KL(q_n ∥ p) - MI - KL(q̄ ∥ p)| for a prior shared by all examples.

    ``shared_prior`` is K x C (one row per latent) or C for K = 1.
    """
    q = np.asarray(posteriors, dtype=np.float64)
    if q.ndim == 2:
        q = q[:, None, :]
    p = np.broadcast_to(np.asarray(shared_prior, dtype=np.float64).reshape(1, q.shape[1], q.shape[2]), q.shape)
    mean_kl = mean_kl_np(q, p)
    mi = float((entropy(q.mean(0)) - entropy(q).mean(0)).sum())  # unclipped for the identity
    return abs(mean_kl - mi - aggregated_kl_np(q, p))


# -- model-based metrics -----------------------------------------------------------
def _posterior_probs(model: TranslationCVAE, batch: SeqBatch):
    """q(z|y), q(z|x) and p(z|x) probabilities for one batch (categorical latents)."""
    hx = model.encode(batch.src_ids, batch.src_mask)
    hy = model.encode(batch.tgt_ids, batch.tgt_mask)
    states, mask = posterior_view(model, hx, batch.src_mask, hy, batch.tgt_mask)
    q_y = model.infer_latent_logits(states, mask, "posterior")
    q_x = model.infer_latent_logits(hx, batch.src_mask, "posterior")
    p_x = model.infer_latent_logits(hx, batch.src_mask, "prior")
    return hx, q_y, q_x, p_x


def posterior_view(model: TranslationCVAE, hx: Tensor, src_mask, hy: Tensor, tgt_mask):
    """States the posterior networks attend over: y alone or x and y concatenated."""
    if model.cfg.posterior_inputs == "y":
        return hy, tgt_mask
    return ad.concat([hx, hy], axis=1), np.concatenate([src_mask, tgt_mask], axis=1)


def batch_nll(model: TranslationCVAE, batch: SeqBatch) -> tuple[float, int]:
    """Summed NLL and token count with the noise-free posterior-mean latent."""
    c = model.cfg
    with no_grad():
        hx = model.encode(batch.src_ids, batch.src_mask)
        latent = None
        if c.latent == "categorical":
            hy = model.encode(batch.tgt_ids, batch.tgt_mask)
            states, mask = posterior_view(model, hx, batch.src_mask, hy, batch.tgt_mask)
            q = model.infer_latent_logits(states, mask, "posterior")
            latent = model.latent_from_values(ad.softmax(q.logits, -1))
        elif c.latent == "gaussian":
            hy = model.encode(batch.tgt_ids, batch.tgt_mask)
            g = model.gaussian_params(hy, batch.tgt_mask, "posterior")
            latent = LatentSample(None, g.mu)
        lp = model.token_log_probs(batch.tgt_ids[:, :-1], batch.tgt_ids[:, 1:], hx, batch.src_mask, latent)
    m = batch.tgt_mask[:, 1:]
    return float(-(lp.data * m).sum()), int(m.sum())


def eval_nll(model: TranslationCVAE, pairs: Sequence[SentencePair], batch_size: int = 64) -> float:
    """Masked mean NLL per token over ``pairs`` (eval mode)."""
    total, count = 0.0, 0
    for b in fixed_batches(pairs, batch_size, model.cfg.vocab_size):
        s, n = batch_nll(model, b)
        total += s
        count += n
    return total / count


def collapse_metrics(model: TranslationCVAE, pairs: Sequence[SentencePair], step: int = 0,
                     batch_size: int = 64, anneal_weight: float = float("nan")) -> tuple[CollapseMetrics, float]:
    """Collapse metrics averaged over fixed-size batches, plus max decomposition residual.

    The residual uses each batch's mean prior as the shared prior.
    """
    c = model.cfg
    nll = eval_nll(model, pairs, batch_size)
    if c.latent != "categorical":
        kl = float("nan")
        if c.latent == "gaussian":
            kls = []
            with no_grad():
                for b in fixed_batches(pairs, batch_size, c.vocab_size):
                    hx = model.encode(b.src_ids, b.src_mask)
                    hy = model.encode(b.tgt_ids, b.tgt_mask)
                    q = model.gaussian_params(hy, b.tgt_mask, "posterior")
                    p = model.gaussian_params(hx, b.src_mask, "prior")
                    kls.append(float(gaussian_kl(q.mu, q.logvar, p.mu, p.logvar).data.mean()))
            kl = float(np.mean(kls))
        nan = float("nan")
        return CollapseMetrics(step, kl, nan, nan, nan, nll, nan, anneal_weight), 0.0
    kls, mzx, mzy, aggs, bows, residual = [], [], [], [], [], 0.0
    with no_grad():
        for b in fixed_batches(pairs, batch_size, c.vocab_size):
            _, q_y, q_x, p_x = _posterior_probs(model, b)
            qy, qx, px = q_y.probs, q_x.probs, p_x.probs
            kls.append(mean_kl_np(qy, px))
            aggs.append(aggregated_kl_np(qy, px))
            mzy.append(mi_estimate(qy))
            mzx.append(mi_estimate(qx))
            residual = max(residual, decomposition_check(qy, px.mean(0)))
            if model.uses_mixture:
                bow = model.bow_dist(model.latent_from_values(Tensor(qy)))
                bows.append(bow_loss(bow, b.bow_targets, b.bow_degenerate).item())
    m = CollapseMetrics(step, float(np.mean(kls)), float(np.mean(mzx)), float(np.mean(mzy)),
                        float(np.mean(aggs)), nll, float(np.mean(bows)) if bows else float("nan"), anneal_weight)
    return m, residual


def append_metrics_csv(path: Path, metrics: CollapseMetrics) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
        if new:
            w.writeheader()
        w.writerow({k: _fmt(v) for k, v in metrics.row().items()})


def _fmt(v):
    return v if isinstance(v, int) else repr(float(v))


def read_metrics_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


# -- latent inspection -------------------------------------------------------------
def posterior_table(model: TranslationCVAE, pairs: Sequence[SentencePair], side: str = "y",
                    batch_size: int = 64) -> np.ndarray:
    """Posterior probabilities N x K x C for each pair (from y, or from x alone)."""
    out = []
    with no_grad():
        for b in fixed_batches(pairs, batch_size, model.cfg.vocab_size):
            _, q_y, q_x, _ = _posterior_probs(model, b)
            out.append((q_y if side == "y" else q_x).probs)
    return np.concatenate(out, axis=0)


def dump_latents(model: TranslationCVAE, corpus_a: Sequence[SentencePair], corpus_b: Sequence[SentencePair],
                 out_path: Path, labels: tuple[str, str] = ("a", "b")) -> int:
    """Write one CSV row per (sentence, latent) with its C posterior probabilities.

    The posterior is taken from each sentence's source side alone, so
    monolingual corpora can be compared. Returns the number of data rows.
    """
    C = model.cfg.C
    rows = 0
    with open(out_path, "w", newline="") as fh:
        fh.write(f"# corpus_labels={labels[0]},{labels[1]}\n")
        w = csv.writer(fh)
        w.writerow(["corpus_label", "sentence_id", "k"] + [f"p{c}" for c in range(C)])
        for label, corpus in zip(labels, (corpus_a, corpus_b)):
            probs = posterior_table(model, corpus, side="x")
            for n, per_k in enumerate(probs):
                for k, p in enumerate(per_k):
                    w.writerow([label, n, k] + [repr(float(v)) for v in p])
                    rows += 1
    return rows


def decode_diversity(model: TranslationCVAE, pairs: Sequence[SentencePair], n_samples: int = 10,
                     seed: int = 0, max_len: int = 24) -> float:
    """Fraction of sources whose greedy decodes differ across prior resamples of z."""
    batch = make_batch(pairs, None, model.cfg.vocab_size)[0]
    rng = np.random.default_rng(seed)
    outputs = [[tuple(h.ids) for h in model.greedy_decode(batch.src_ids, batch.src_mask, rng, max_len)]
               for _ in range(n_samples)]
    distinct = [len({o[n] for o in outputs}) for n in range(batch.size)]
    return float(np.mean([d >= 2 for d in distinct]))


def mode_probe_accuracy(model: TranslationCVAE, pairs: Sequence[SentencePair], seed: int = 0) -> float:
    """Held-out accuracy of a logistic probe predicting the generating mode from q(z|y)."""
    from sklearn.linear_model import LogisticRegression

    probs = posterior_table(model, pairs, side="y")
    X = probs.reshape(len(probs), -1)
    y = np.array([p.mode for p in pairs])
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(y))
    cut = len(y) // 2
    tr, te = idx[:cut], idx[cut:]
    clf = LogisticRegression(max_iter=2000)
    clf.fit(X[tr], y[tr])
    return float(clf.score(X[te], y[te]))


def per_latent_mean_l1(path: Path) -> list[float]:
    """L1 distance between the two corpora's mean posteriors, per latent k."""
    data: dict[tuple[str, int], list[np.ndarray]] = {}
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    reader = csv.reader(lines)
    next(reader)
    for row in reader:
        data.setdefault((row[0], int(row[2])), []).append(np.array(row[3:], dtype=float))
    labels = sorted({k[0] for k in data})
    ks = sorted({k[1] for k in data})
    return [float(np.abs(np.mean(data[(labels[0], k)], 0) - np.mean(data[(labels[1], k)], 0)).sum()) for k in ks]


def ln_bound(n: int, K: int, C: int) -> float:
    return math.log(min(n, C)) * K
