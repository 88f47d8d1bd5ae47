"""Training loop with per-step parameter masks and an inverse-sqrt Adam schedule.

Each step may run up to three masked updates, depending on the mode.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import objectives as obj
from .autodiff import Tensor
from .bleu import corpus_bleu
from .corpus import (SentencePair, Vocab, make_batch, make_mono_batch, word_dropout)
from .diagnostics import append_metrics_csv, collapse_metrics, posterior_view
from .model import ModelConfig, TranslationCVAE, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

MODES = ("nonlatent", "vnmt", "dcvae", "micvae", "micvae_bow", "dcvae_bow")
STEP_GROUPS = {
    "supervised": ("enc", "infer", "dec", "bow"),
    "bow": ("enc", "infer", "bow"),
    "mono": ("enc", "infer"),
}
LOSS_FIELDS = ("step", "kind", "recon_nll", "kl_per_example", "kl_aggregated", "bow_loss", "mono_loss",
               "prior_fit", "total", "anneal_weight", "lr")


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "micvae_bow"
    steps: int = 2000
    warmup_steps: int = 400
    lr: float = 0.5  # scales d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    weight_decay: float = 0.001
    max_tokens: int = 2048
    word_dropout: float = 0.4
    anneal: str = "linear"
    anneal_steps: int = 1000
    self_training: bool = False
    mono_ratio: int = 1
    eval_every: int = 100
    eval_batch_size: int = 64
    divergence_patience: int = 200
    prior_fit: bool = True  # micvae modes: also fit p(z|x) to a stop-gradient q(z|y)
    seed: int = 0
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; valid modes: {', '.join(MODES)}")
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.anneal == "linear" and self.anneal_steps <= 0:
            raise ValueError("linear annealing needs anneal_steps > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def uses_bow(self) -> bool:
        return self.mode in ("micvae_bow", "dcvae_bow")


def model_config_for(cfg: TrainConfig, vocab_size: int) -> ModelConfig:
    latent = {"nonlatent": "none", "vnmt": "gaussian"}.get(cfg.mode, "categorical")
    overrides = dict(cfg.model)
    if not cfg.uses_bow:
        overrides["lambda_mix"] = 0.0
    return ModelConfig(vocab_size=vocab_size, latent=latent, **overrides)


def lr_at(step: int, cfg: TrainConfig, d_model: int) -> float:
    step = max(step, 1)
    return cfg.lr * d_model ** -0.5 * min(step ** -0.5, step * cfg.warmup_steps ** -1.5)


def gradient_mask(step_kind: str, params) -> list[str]:
    """Names of the parameters a step of ``step_kind`` may update."""
    if step_kind not in STEP_GROUPS:
        raise ValueError(f"unknown step kind {step_kind!r}")
    return params.names(STEP_GROUPS[step_kind])


class Adam:
    """Adam with bias correction and decoupled weight decay.

    Each parameter keeps its own update count so masked steps do not advance
    the bias correction of parameters they leave untouched.
    """

    def __init__(self, beta1=0.9, beta2=0.98, eps=1e-8, weight_decay=0.0):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            p = params[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
                self.t[name] = 0
            v = self.v[name]
            self.t[name] += 1
            t = self.t[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p.data = p.data - lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data)

    def state(self) -> tuple[dict, dict, dict]:
        return ({n: a.copy() for n, a in self.m.items()}, {n: a.copy() for n, a in self.v.items()}, dict(self.t))

    def load_state(self, m: dict, v: dict, t: dict) -> None:
        self.m = {n: np.array(a) for n, a in m.items()}
        self.v = {n: np.array(a) for n, a in v.items()}
        self.t = {n: int(x) for n, x in t.items()}


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int, lr: float,
              beta1=0.9, beta2=0.98, eps=1e-8, weight_decay=0.0):
    """Functional single-tensor Adam update; returns (param, m, v)."""
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    mhat = m / (1 - beta1 ** step)
    vhat = v / (1 - beta2 ** step)
    return param - lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * param), m, v


def _hash_pairs(pairs: Sequence[SentencePair]) -> str:
    h = hashlib.sha256()
    for p in pairs:
        h.update(json.dumps([p.src, p.tgt]).encode())
    return h.hexdigest()[:16]


class Trainer:
    """Owns the model, optimizer and RNG; one ``step()`` applies every update the mode calls for."""

    def __init__(self, cfg: TrainConfig, vocab: Vocab, bitext: Sequence[SentencePair],
                 mono: Sequence[Sequence[int]] | None = None, valid: Sequence[SentencePair] | None = None,
                 model: TranslationCVAE | None = None):
        self.cfg = cfg
        self.vocab = vocab
        self.bitext = list(bitext)
        self.mono = list(mono) if mono else []
        if cfg.self_training and not self.mono:
            raise ValueError("self_training needs monolingual data")
        self.valid = list(valid) if valid else self.bitext[: min(256, len(self.bitext))]
        self.model = model or TranslationCVAE(model_config_for(cfg, len(vocab)), seed=cfg.seed)
        self.adam = Adam(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
        self.rng = np.random.default_rng(cfg.seed + 1)
        self.step_count = 0
        self.skipped_nan = 0
        self.skipped_long = 0
        self.initial_nll: float | None = None
        self.bad_streak = 0
        self.last_reports: dict[str, obj.LossReport] = {}

    # -- data ----------------------------------------------------------------
    def _sample_pairs(self, pool: Sequence, cost) -> list:
        budget, out = self.cfg.max_tokens, []
        order = self.rng.permutation(len(pool))
        for i in order:
            c = cost(pool[i])
            if c > budget and not out:
                continue
            if c > budget:
                break
            out.append(pool[i])
            budget -= c
        return out

    def sample_batch(self):
        pairs = self._sample_pairs(self.bitext, lambda p: max(len(p.src), len(p.tgt)))
        batch, skipped = make_batch(pairs, self.cfg.max_tokens, len(self.vocab))
        self.skipped_long += skipped
        return batch

    def sample_mono(self):
        sents = self._sample_pairs(self.mono, len)
        return make_mono_batch(sents, len(self.vocab))

    # -- losses --------------------------------------------------------------
    def anneal_weight(self) -> float:
        if self.cfg.mode in ("micvae", "micvae_bow"):
            return 1.0
        return obj.kl_anneal(self.step_count, self.cfg.anneal, self.cfg.anneal_steps)

    def supervised_loss(self, batch) -> tuple[Tensor, obj.LossReport]:
        m, cfg, rng = self.model, self.cfg, self.rng
        hx = m.encode(batch.src_ids, batch.src_mask, True, rng)
        dec_in = word_dropout(batch.tgt_ids[:, :-1], cfg.word_dropout, rng, True)
        labels, lmask = batch.tgt_ids[:, 1:], batch.tgt_mask[:, 1:]
        if m.cfg.latent == "none":
            lp = m.token_log_probs(dec_in, labels, hx, batch.src_mask, None, True, rng)
            return obj.nonlatent_loss(lp, lmask)
        hy = m.encode(batch.tgt_ids, batch.tgt_mask, True, rng)
        if m.cfg.latent == "gaussian":
            q = m.gaussian_params(hy, batch.tgt_mask, "posterior")
            p = m.gaussian_params(hx, batch.src_mask, "prior")
            lp = m.token_log_probs(dec_in, labels, hx, batch.src_mask, m.sample_gaussian(q, rng), True, rng)
            return obj.vnmt_loss(lp, lmask, q, p, self.anneal_weight())
        states, smask = posterior_view(m, hx, batch.src_mask, hy, batch.tgt_mask)
        q = m.infer_latent_logits(states, smask, "posterior")
        p = m.infer_latent_logits(hx, batch.src_mask, "prior")
        z = m.sample_gumbel_softmax(q, rng=rng)
        lp = m.token_log_probs(dec_in, labels, hx, batch.src_mask, z, True, rng)
        if cfg.mode.startswith("micvae"):
            loss, rep = obj.micvae_loss(lp, lmask, q.logits, p.logits)
            if cfg.prior_fit:
                fit = obj.prior_fit_loss(q.logits, p.logits)
                loss = loss + fit
                rep.prior_fit, rep.total = fit.item(), loss.item()
            return loss, rep
        return obj.cvae_elbo_loss(lp, lmask, q.logits, p.logits, self.anneal_weight())

    def bow_step_loss(self, batch) -> tuple[Tensor, obj.LossReport]:
        m, rng = self.model, self.rng
        hy = m.encode(batch.tgt_ids, batch.tgt_mask, True, rng)
        if m.cfg.posterior_inputs == "y":
            states, smask = hy, batch.tgt_mask
        else:
            hx = m.encode(batch.src_ids, batch.src_mask, True, rng)
            states, smask = posterior_view(m, hx, batch.src_mask, hy, batch.tgt_mask)
        q = m.infer_latent_logits(states, smask, "posterior")
        z = m.sample_gumbel_softmax(q, rng=rng)
        loss = obj.bow_loss(m.bow_dist(z), batch.bow_targets, batch.bow_degenerate)
        return loss, obj.LossReport(bow_loss=loss.item(), total=loss.item())

    def mono_step_loss(self, mono) -> tuple[Tensor, obj.LossReport]:
        m, rng = self.model, self.rng
        hx = m.encode(mono.src_ids, mono.src_mask, True, rng)
        q = m.infer_latent_logits(hx, mono.src_mask, "posterior")
        p = m.infer_latent_logits(hx, mono.src_mask, "prior")
        z = m.sample_gumbel_softmax(q, rng=rng)
        return obj.mono_loss(m.bow_dist(z), mono.bow_targets, mono.bow_degenerate, q.logits, p.logits)

    # -- updates -------------------------------------------------------------
    def apply(self, loss: Tensor, kind: str, lr: float) -> bool:
        P = self.model.params
        P.zero_grad()
        loss.backward()
        grads = {}
        for name in gradient_mask(kind, P):
            g = P[name].grad
            if g is not None:
                grads[name] = g
        P.zero_grad()
        if not np.isfinite(loss.data).all() or any(not np.isfinite(g).all() for g in grads.values()):
            self.skipped_nan += 1
            logger.warning("non-finite %s loss/gradient at step %d; update skipped", kind, self.step_count)
            return False
        self.adam.step(P.tensors, grads, lr)
        return True

    def step(self) -> dict[str, obj.LossReport]:
        cfg = self.cfg
        self.step_count += 1
        lr = lr_at(self.step_count, cfg, self.model.cfg.d_model)
        batch = self.sample_batch()
        reports = {}
        loss, rep = self.supervised_loss(batch)
        self.apply(loss, "supervised", lr)
        reports["supervised"] = rep
        if cfg.uses_bow:
            loss, rep = self.bow_step_loss(batch)
            self.apply(loss, "bow", lr)
            reports["bow"] = rep
        if cfg.self_training:
            for _ in range(cfg.mono_ratio):
                loss, rep = self.mono_step_loss(self.sample_mono())
                self.apply(loss, "mono", lr)
                reports["mono"] = rep
        self._guard(reports["supervised"].recon_nll)
        self.last_reports = reports
        return reports

    def _guard(self, nll: float) -> None:
        if self.initial_nll is None:
            self.initial_nll = nll
            return
        self.bad_streak = self.bad_streak + 1 if nll > 2 * self.initial_nll else 0
        if self.bad_streak >= self.cfg.divergence_patience:
            raise DivergenceError(f"NLL above twice its initial value for {self.bad_streak} steps "
                                  f"(step {self.step_count}, nll {nll:.4f}, initial {self.initial_nll:.4f})")

    def evaluate(self):
        return collapse_metrics(self.model, self.valid, self.step_count, self.cfg.eval_batch_size,
                                self.anneal_weight())

    # -- persistence ---------------------------------------------------------
    def save(self, path: Path) -> None:
        m, v, t = self.adam.state()
        extra = {
            "step": self.step_count,
            "train_config": self.cfg.to_dict(),
            "train_config_hash": self.cfg.digest(),
            "rng_state": self.rng.bit_generator.state,
            "adam_t": t,
            "skipped_nan": self.skipped_nan,
            "skipped_long": self.skipped_long,
            "initial_nll": self.initial_nll,
            "bad_streak": self.bad_streak,
        }
        save_checkpoint(path, self.model, self.vocab, extra, {"adam_m": m, "adam_v": v})

    @classmethod
    def resume(cls, path: Path, bitext, mono=None, valid=None) -> "Trainer":
        model, vocab, extra, arrays = load_checkpoint(path)
        cfg = TrainConfig.from_dict(extra["train_config"])
        if cfg.digest() != extra["train_config_hash"]:
            raise ValueError("train config hash mismatch")
        tr = cls(cfg, vocab, bitext, mono, valid, model=model)
        tr.adam.load_state(arrays.get("adam_m", {}), arrays.get("adam_v", {}), extra["adam_t"])
        tr.rng.bit_generator.state = extra["rng_state"]
        tr.step_count = extra["step"]
        tr.skipped_nan = extra["skipped_nan"]
        tr.skipped_long = extra["skipped_long"]
        tr.initial_nll = extra["initial_nll"]
        tr.bad_streak = extra["bad_streak"]
        return tr


def _loss_rows(step: int, reports: dict[str, obj.LossReport], lr: float):
    for kind, rep in reports.items():
        row = {"step": step, "kind": kind, "lr": repr(lr)}
        row.update({k: repr(float(v)) for k, v in rep.as_dict().items()})
        yield row


def train(bitext: Sequence[SentencePair], vocab: Vocab, cfg: TrainConfig, out_dir: Path | None = None,
          mono: Sequence[Sequence[int]] | None = None, valid: Sequence[SentencePair] | None = None,
          trainer: Trainer | None = None) -> Trainer:
    """Run ``cfg.steps`` steps; write metrics.csv, losses.csv, checkpoint and manifest to ``out_dir``."""
    tr = trainer or Trainer(cfg, vocab, bitext, mono, valid)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        for name in ("metrics.csv", "losses.csv"):
            (out / name).unlink(missing_ok=True)
    t0 = time.time()
    loss_fh = open(out / "losses.csv", "w", newline="") if out is not None else None
    writer = csv.DictWriter(loss_fh, fieldnames=LOSS_FIELDS) if loss_fh else None
    if writer:
        writer.writeheader()
    history = []
    try:
        if tr.step_count == 0:
            history.append(_eval(tr, out))
        while tr.step_count < cfg.steps:
            reports = tr.step()
            if writer:
                for row in _loss_rows(tr.step_count, reports, lr_at(tr.step_count, cfg, tr.model.cfg.d_model)):
                    writer.writerow(row)
            if tr.step_count % cfg.eval_every == 0 or tr.step_count == cfg.steps:
                history.append(_eval(tr, out))
    finally:
        if loss_fh:
            loss_fh.close()
    tr.history = history
    if out is not None:
        tr.save(out / "checkpoint.json")
        final = {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
                 for k, v in (history[-1].row() if history else {}).items()}
        manifest = {
            "command": "train",
            "version": __version__,
            "config": cfg.to_dict(),
            "config_hash": cfg.digest(),
            "seed": cfg.seed,
            "inputs": {"bitext": _hash_pairs(tr.bitext), "valid": _hash_pairs(tr.valid),
                       "mono": hashlib.sha256(json.dumps(tr.mono).encode()).hexdigest()[:16]},
            "outputs": {"checkpoint": str(out / "checkpoint.json"), "metrics": str(out / "metrics.csv"),
                        "losses": str(out / "losses.csv")},
            "final_metrics": final,
            "skipped_nan_steps": tr.skipped_nan,
            "skipped_long_pairs": tr.skipped_long,
            "wall_clock_s": time.time() - t0,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=float, allow_nan=False))
    return tr


def read_losses(path: Path) -> list[dict[str, str]]:
    """Rows of a losses.csv written by :func:`train`."""
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _eval(tr: Trainer, out: Path | None):
    metrics, residual = tr.evaluate()
    logger.info("step %d nll %.4f kl %.4f mi_zy %.4f residual %.2e", metrics.step, metrics.nll_per_token,
                metrics.kl, metrics.mi_zy, residual)
    if out is not None:
        append_metrics_csv(out / "metrics.csv", metrics)
    return metrics


def translate_pairs(model: TranslationCVAE, vocab: Vocab, pairs: Sequence[SentencePair], seed: int = 0,
                    beam: int = 0, max_len: int = 32, batch_size: int = 64) -> list[list[str]]:
    """Decode the source side of ``pairs`` into token strings; ``beam=0`` is greedy."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i: i + batch_size]
        b = make_batch(chunk, None, len(vocab))[0]
        if beam == 0:
            hyps = model.greedy_decode(b.src_ids, b.src_mask, rng, max_len)
        else:
            hyps = model.beam_decode(b.src_ids, b.src_mask, rng, beam, max_len)
        out.extend(vocab.decode(h.ids) for h in hyps)
    return out


def evaluate_bleu(model: TranslationCVAE, vocab: Vocab, pairs: Sequence[SentencePair], seed: int = 0,
                  beam: int = 0) -> tuple[float, list[list[str]]]:
    hyps = translate_pairs(model, vocab, pairs, seed, beam)
    refs = [vocab.decode(p.tgt) for p in pairs]
    return corpus_bleu(hyps, refs), hyps
