"""Tiny Transformer CVAE: encoder, K categorical inference networks, latent
conditioned decoder with a mixture-of-softmaxes output, and the BoW head."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .corpus import BOS, EOS, PAD, Vocab

GROUPS = ("enc", "infer", "dec", "bow")
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 2
    ffn_dim: int = 64
    K: int = 4
    C: int = 16
    tau: float = 1.0
    lambda_mix: float = 0.1
    latent: str = "categorical"  # categorical | gaussian | none
    posterior_inputs: str = "y"  # y | xy-concat
    dropout: float = 0.0
    max_positions: int = 128
    latent_init_scale: float = 0.1  # std multiplier for the latent embeddings at init

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.K < 1 or self.C < 2:
            raise ValueError("need K >= 1 latent variables with C >= 2 categories")
        if not 0.0 <= self.lambda_mix < 1.0:
            raise ValueError("lambda_mix must lie in [0, 1)")
        if self.latent_init_scale < 0:
            raise ValueError("latent_init_scale must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.latent not in ("categorical", "gaussian", "none"):
            raise ValueError(f"unknown latent type {self.latent!r}")
        if self.posterior_inputs not in ("y", "xy-concat"):
            raise ValueError(f"unknown posterior_inputs {self.posterior_inputs!r}")


class Params:
    """Named trainable tensors, each owned by exactly one group.

    Groups: ``enc`` (token embeddings + encoder), ``infer`` (posterior/prior
    networks and latent embeddings), ``dec`` (decoder), ``bow`` (BoW head).
    """

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.groups: dict[str, str] = {}

    def add(self, name: str, group: str, value: np.ndarray) -> Tensor:
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        if name in self.tensors:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True)
        self.tensors[name] = t
        self.groups[name] = group
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    def names(self, groups=None) -> list[str]:
        return [n for n in self.tensors if groups is None or self.groups[n] in groups]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.tensors):
            raise CheckpointError("parameter names do not match the model")
        for n, v in state.items():
            if v.shape != self.tensors[n].shape:
                raise CheckpointError(f"shape mismatch for {n}: {v.shape} vs {self.tensors[n].shape}")
            self.tensors[n].data = np.array(v, dtype=np.float64)

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())


@dataclass
class LatentPosterior:
    logits: Tensor  # N x K x C
    source: str  # posterior | prior

    @property
    def probs(self) -> np.ndarray:
        return ad._softmax_np(self.logits.data, -1)

    def log_probs(self) -> Tensor:
        return ad.log_softmax(self.logits, axis=-1)


@dataclass
class GaussianPosterior:
    mu: Tensor  # N x d
    logvar: Tensor
    source: str


@dataclass
class LatentSample:
    values: Tensor | None  # N x K x C simplex rows (None for Gaussian latents)
    embedding: Tensor  # N x d


@dataclass
class Hypothesis:
    ids: list[int]
    score: float  # length-normalised log-probability
    truncated: bool = False
    logprob: float = 0.0


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class TranslationCVAE:
    """Encoder/decoder Transformer with categorical (or Gaussian) latent codes."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params = Params()
        self._positions = sinusoidal_positions(cfg.max_positions, cfg.d_model)
        self._init_params(np.random.default_rng(seed))

    # -- parameters --------------------------------------------------------
    def _init_params(self, rng: np.random.Generator) -> None:
        c, P = self.cfg, self.params
        d, f = c.d_model, c.ffn_dim

        def lin(n_in, n_out, scale=1.0):
            return rng.normal(0.0, scale / math.sqrt(n_in), size=(n_in, n_out))

        def block(prefix, group, cross):
            P.add(f"{prefix}.ln1.g", group, np.ones(d))
            P.add(f"{prefix}.ln1.b", group, np.zeros(d))
            for w in ("q", "k", "v", "o"):
                P.add(f"{prefix}.self.{w}", group, lin(d, d))
            if cross:
                P.add(f"{prefix}.ln2.g", group, np.ones(d))
                P.add(f"{prefix}.ln2.b", group, np.zeros(d))
                for w in ("q", "k", "v", "o"):
                    P.add(f"{prefix}.cross.{w}", group, lin(d, d))
            P.add(f"{prefix}.ln3.g", group, np.ones(d))
            P.add(f"{prefix}.ln3.b", group, np.zeros(d))
            P.add(f"{prefix}.ffn.w1", group, lin(d, f))
            P.add(f"{prefix}.ffn.b1", group, np.zeros(f))
            P.add(f"{prefix}.ffn.w2", group, lin(f, d))
            P.add(f"{prefix}.ffn.b2", group, np.zeros(d))

        P.add("embed", "enc", rng.normal(0.0, 1.0 / math.sqrt(d), size=(c.vocab_size, d)))
        for i in range(c.n_layers):
            block(f"enc.{i}", "enc", cross=False)
        P.add("enc.ln_f.g", "enc", np.ones(d))
        P.add("enc.ln_f.b", "enc", np.zeros(d))
        for i in range(c.n_layers):
            block(f"dec.{i}", "dec", cross=True)
        P.add("dec.ln_f.g", "dec", np.ones(d))
        P.add("dec.ln_f.b", "dec", np.zeros(d))

        if c.latent == "categorical":
            for net in ("post", "prior"):
                P.add(f"{net}.query", "infer", rng.normal(0.0, 1.0, size=(c.K, d)))
                P.add(f"{net}.Wk", "infer", rng.normal(0.0, 1.0 / math.sqrt(d), size=(c.K, d, d)))
                P.add(f"{net}.Wh", "infer", lin(d, d))
                # small projection keeps initial posteriors near uniform
                P.add(f"{net}.proj", "infer", rng.normal(0.0, 0.01, size=(c.K, d, c.C)))
                P.add(f"{net}.proj_b", "infer", np.zeros((c.K, c.C)))
            P.add("latent_embed", "infer", rng.normal(0.0, c.latent_init_scale / math.sqrt(c.K), size=(c.K, c.C, d)))
            P.add("bow.W", "bow", np.eye(d))
        elif c.latent == "gaussian":
            for net in ("post", "prior"):
                P.add(f"{net}.mu.W", "infer", lin(d, d, 0.1))
                P.add(f"{net}.mu.b", "infer", np.zeros(d))
                P.add(f"{net}.logvar.W", "infer", lin(d, d, 0.1))
                P.add(f"{net}.logvar.b", "infer", np.zeros(d))

    # -- building blocks ---------------------------------------------------
    def _ln(self, x: Tensor, name: str) -> Tensor:
        return ad.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _mha(self, x: Tensor, mem: Tensor, mask: np.ndarray, prefix: str) -> Tensor:
        P, h = self.params, self.cfg.n_heads
        N, T, d = x.shape
        S = mem.shape[1]
        dh = d // h

        def heads(t, L):
            return t.reshape(N, L, h, dh).transpose(0, 2, 1, 3)

        q = heads(x @ P[f"{prefix}.q"], T)
        k = heads(mem @ P[f"{prefix}.k"], S)
        v = heads(mem @ P[f"{prefix}.v"], S)
        ctx = ad.scaled_dot_attention(q, k, v, mask, dh)
        return ctx.transpose(0, 2, 1, 3).reshape(N, T, d) @ P[f"{prefix}.o"]

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        P = self.params
        hidden = ad.relu(x @ P[f"{prefix}.ffn.w1"] + P[f"{prefix}.ffn.b1"])
        return hidden @ P[f"{prefix}.ffn.w2"] + P[f"{prefix}.ffn.b2"]

    def _drop(self, x: Tensor, rng, training: bool) -> Tensor:
        return ad.dropout(x, self.cfg.dropout, rng, training)

    def _embed_tokens(self, ids: np.ndarray) -> Tensor:
        L = ids.shape[1]
        if L > self.cfg.max_positions:
            raise ValueError(f"sequence length {L} exceeds max_positions={self.cfg.max_positions}")
        e = ad.embedding_lookup(self.params["embed"], ids) * math.sqrt(self.cfg.d_model)
        return e + Tensor(self._positions[:L])

    # -- encoder -----------------------------------------------------------
    def encode(self, ids: np.ndarray, mask: np.ndarray, training: bool = False, rng=None) -> Tensor:
        """Contextualised states N x L x d for padded token ids."""
        x = self._drop(self._embed_tokens(ids), rng, training)
        attn_mask = ad.additive_mask(mask[:, None, None, :])
        for i in range(self.cfg.n_layers):
            p = f"enc.{i}"
            y = self._ln(x, f"{p}.ln1")
            x = x + self._drop(self._mha(y, y, attn_mask, f"{p}.self"), rng, training)
            x = x + self._drop(self._ffn(self._ln(x, f"{p}.ln3"), p), rng, training)
        return self._ln(x, "enc.ln_f")

    # -- inference networks ------------------------------------------------
    def infer_latent_logits(self, states: Tensor, mask: np.ndarray, which: str) -> LatentPosterior:
        """Per-latent attention pooling of ``states`` followed by a d -> C projection."""
        if which not in ("posterior", "prior"):
            raise ValueError(f"which must be posterior or prior, got {which!r}")
        P, c = self.params, self.cfg
        net = "post" if which == "posterior" else "prior"
        query = ad.matmul(P[f"{net}.query"].reshape(c.K, 1, c.d_model), P[f"{net}.Wk"])  # K x 1 x d
        query = query.reshape(c.K, c.d_model)
        keys = states @ P[f"{net}.Wh"]  # N x L x d
        ctx = ad.scaled_dot_attention(query, keys, keys, ad.additive_mask(mask[:, None, :]), c.d_model)
        logits = ad.matmul(ctx.transpose(1, 0, 2), P[f"{net}.proj"]).transpose(1, 0, 2)  # N x K x C
        return LatentPosterior(logits + P[f"{net}.proj_b"], which)

    def latent_attention(self, states: Tensor, mask: np.ndarray, which: str) -> np.ndarray:
        """Attention weights N x K x L of each inference network over positions."""
        P, c = self.params, self.cfg
        net = "post" if which == "posterior" else "prior"
        with no_grad():
            query = np.einsum("kd,kde->ke", P[f"{net}.query"].data, P[f"{net}.Wk"].data)
            keys = states.data @ P[f"{net}.Wh"].data
            scores = np.einsum("ke,nle->nkl", query, keys) / math.sqrt(c.d_model)
            scores = scores + ad.additive_mask(mask[:, None, :])
        return ad._softmax_np(scores, -1)

    def gaussian_params(self, states: Tensor, mask: np.ndarray, which: str) -> GaussianPosterior:
        P = self.params
        net = "post" if which == "posterior" else "prior"
        m = mask[..., None].astype(np.float64)
        pooled = (states * Tensor(m)).sum(axis=1) * Tensor(1.0 / m.sum(axis=1))
        return GaussianPosterior(pooled @ P[f"{net}.mu.W"] + P[f"{net}.mu.b"],
                                 pooled @ P[f"{net}.logvar.W"] + P[f"{net}.logvar.b"], which)

    # -- latent sampling ---------------------------------------------------
    def latent_from_values(self, values: Tensor) -> LatentSample:
        """Summed per-latent embeddings of simplex rows ``values`` (N x K x C)."""
        per_k = ad.matmul(values.transpose(1, 0, 2), self.params["latent_embed"])  # K x N x d
        return LatentSample(values, per_k.sum(axis=0))

    def sample_gumbel_softmax(self, post: LatentPosterior, tau: float | None = None, rng=None,
                              hard: bool = False, gumbel: np.ndarray | None = None) -> LatentSample:
        """Relaxed (or exact hard) categorical sample per latent.

        ``gumbel`` overrides the noise, e.g. zeros for a noise-free sample.
        """
        tau = self.cfg.tau if tau is None else tau
        if tau <= 0:
            raise ValueError("tau must be positive")
        if gumbel is None:
            gumbel = sample_gumbel(post.logits.shape, rng)
        if hard:
            perturbed = post.logits.data + gumbel
            values = Tensor(np.eye(post.logits.shape[-1])[perturbed.argmax(-1)])
        else:
            values = ad.softmax((post.logits + Tensor(gumbel)) * (1.0 / tau), axis=-1)
        return self.latent_from_values(values)

    def sample_gaussian(self, g: GaussianPosterior, rng=None, eps: np.ndarray | None = None) -> LatentSample:
        if eps is None:
            eps = rng.standard_normal(g.mu.shape)
        return LatentSample(None, g.mu + ad.exp(g.logvar * 0.5) * Tensor(eps))

    # -- decoder -----------------------------------------------------------
    def decoder_logits(self, tgt_in: np.ndarray, enc_states: Tensor, src_mask: np.ndarray,
                       latent: LatentSample | None, training: bool = False, rng=None) -> Tensor:
        """Autoregressive decoder logits N x T x V (before the mixture)."""
        c = self.cfg
        x = self._embed_tokens(tgt_in)
        if latent is not None:
            x = x + latent.embedding.reshape(latent.embedding.shape[0], 1, c.d_model)
        x = self._drop(x, rng, training)
        T = tgt_in.shape[1]
        causal = np.tril(np.ones((T, T), dtype=bool))
        self_mask = ad.additive_mask(causal[None, None] & (tgt_in != PAD)[:, None, None, :])
        cross_mask = ad.additive_mask(src_mask[:, None, None, :])
        for i in range(c.n_layers):
            p = f"dec.{i}"
            y = self._ln(x, f"{p}.ln1")
            x = x + self._drop(self._mha(y, y, self_mask, f"{p}.self"), rng, training)
            x = x + self._drop(self._mha(self._ln(x, f"{p}.ln2"), enc_states, cross_mask, f"{p}.cross"), rng, training)
            x = x + self._drop(self._ffn(self._ln(x, f"{p}.ln3"), p), rng, training)
        h = self._ln(x, "dec.ln_f")
        return (h @ self.params["embed"].T) * (1.0 / math.sqrt(c.d_model))

    def bow_logits(self, latent: LatentSample) -> Tensor:
        """Emb(z) Emb(V)ᵀ / √d with token embeddings shared with the decoder."""
        z = latent.embedding @ self.params["bow.W"]
        return (z @ self.params["embed"].T) * (1.0 / math.sqrt(self.cfg.d_model))

    def bow_dist(self, latent: LatentSample) -> Tensor:
        return ad.softmax(self.bow_logits(latent), axis=-1)

    @property
    def uses_mixture(self) -> bool:
        return self.cfg.latent == "categorical" and self.cfg.lambda_mix > 0

    def output_dist(self, dec_logits: Tensor, bow_dist: Tensor | None) -> Tensor:
        """(1-λ)·softmax(decoder) + λ·p_bow, broadcast over time steps."""
        p_dec = ad.softmax(dec_logits, axis=-1)
        if bow_dist is None or not self.uses_mixture:
            return p_dec
        lam = self.cfg.lambda_mix
        return p_dec * (1.0 - lam) + bow_dist.reshape(bow_dist.shape[0], 1, bow_dist.shape[1]) * lam

    def decode_step_logits(self, tgt_in: np.ndarray, enc_states: Tensor, src_mask: np.ndarray,
                           latent: LatentSample | None, training: bool = False, rng=None) -> Tensor:
        """Next-token distributions N x T x V under the mixture of softmaxes."""
        dec = self.decoder_logits(tgt_in, enc_states, src_mask, latent, training, rng)
        bow = self.bow_dist(latent) if (latent is not None and self.uses_mixture) else None
        return self.output_dist(dec, bow)

    def token_log_probs(self, tgt_in, labels, enc_states, src_mask, latent, training=False, rng=None) -> Tensor:
        """log p(label_t | ·) per position, N x T."""
        dec = self.decoder_logits(tgt_in, enc_states, src_mask, latent, training, rng)
        if latent is not None and self.uses_mixture:
            dist = self.output_dist(dec, self.bow_dist(latent))
            return ad.log(ad.gather_last(dist, labels))
        return ad.gather_last(ad.log_softmax(dec, axis=-1), labels)

    # -- inference-time helpers ---------------------------------------------
    def prior_latent(self, enc_states: Tensor, src_mask: np.ndarray, rng, hard: bool = True) -> LatentSample | None:
        c = self.cfg
        if c.latent == "none":
            return None
        if c.latent == "gaussian":
            return self.sample_gaussian(self.gaussian_params(enc_states, src_mask, "prior"), rng)
        prior = self.infer_latent_logits(enc_states, src_mask, "prior")
        return self.sample_gumbel_softmax(prior, rng=rng, hard=hard)

    def _next_log_probs(self, prefix: np.ndarray, enc, src_mask, latent) -> np.ndarray:
        dist = self.decode_step_logits(prefix, enc, src_mask, latent).data[:, -1, :]
        with np.errstate(divide="ignore"):
            logp = np.log(dist)
        logp[:, PAD] = -np.inf
        logp[:, BOS] = -np.inf
        return logp

    def greedy_decode(self, src_ids: np.ndarray, src_mask: np.ndarray, rng=None, max_len: int = 32,
                      latent: LatentSample | None = None) -> list[Hypothesis]:
        """Argmax decoding under one hard prior sample of z per sentence."""
        with no_grad():
            enc = self.encode(src_ids, src_mask)
            if latent is None:
                latent = self.prior_latent(enc, src_mask, rng)
            N = src_ids.shape[0]
            prefix = np.full((N, 1), BOS, dtype=np.int64)
            done = np.zeros(N, dtype=bool)
            total = np.zeros(N)
            lengths = np.zeros(N, dtype=np.int64)
            for _ in range(max_len):
                logp = self._next_log_probs(prefix, enc, src_mask, latent)
                nxt = logp.argmax(-1)
                gain = logp[np.arange(N), nxt]
                nxt = np.where(done, PAD, nxt)
                total += np.where(done, 0.0, gain)
                lengths += ~done
                prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
                done |= nxt == EOS
                if done.all():
                    break
        out = []
        for n in range(N):
            ids = [int(t) for t in prefix[n, 1:] if t != PAD]
            out.append(Hypothesis(ids, total[n] / max(lengths[n], 1), not done[n], total[n]))
        return out

    def beam_decode(self, src_ids: np.ndarray, src_mask: np.ndarray, rng=None, beam: int = 4,
                    max_len: int = 32) -> list[Hypothesis]:
        """Length-normalised beam search; one hard latent draw shared across the beam.

        The greedy hypothesis under the same draw is always a candidate, so the
        result never scores below greedy decoding.
        """
        if beam < 1:
            raise ValueError("beam must be >= 1")
        results = []
        with no_grad():
            enc_all = self.encode(src_ids, src_mask)
            lat_all = self.prior_latent(enc_all, src_mask, rng)
            for n in range(src_ids.shape[0]):
                latent = None
                if lat_all is not None:
                    vals = None if lat_all.values is None else Tensor(lat_all.values.data[n: n + 1])
                    latent = LatentSample(vals, Tensor(lat_all.embedding.data[n: n + 1]))
                enc = Tensor(enc_all.data[n: n + 1])
                mask = src_mask[n: n + 1]
                greedy = self.greedy_decode(src_ids[n: n + 1], mask, max_len=max_len, latent=latent)[0]
                results.append(self._beam_one(enc, mask, latent, beam, max_len, greedy))
        return results

    def _beam_one(self, enc, mask, latent, beam, max_len, greedy: Hypothesis) -> Hypothesis:
        alive: list[tuple[list[int], float]] = [([BOS], 0.0)]
        finished: list[Hypothesis] = [greedy]
        for step in range(1, max_len + 1):
            B = len(alive)
            prefix = np.array([a[0] for a in alive], dtype=np.int64)
            lat = None
            if latent is not None:
                vals = None if latent.values is None else Tensor(np.repeat(latent.values.data, B, axis=0))
                lat = LatentSample(vals, Tensor(np.repeat(latent.embedding.data, B, axis=0)))
            logp = self._next_log_probs(prefix, Tensor(np.repeat(enc.data, B, axis=0)),
                                        np.repeat(mask, B, axis=0), lat)
            scores = np.array([a[1] for a in alive])[:, None] + logp
            flat = scores.reshape(-1)
            order = np.argsort(-flat, kind="stable")[:beam]
            nxt_alive = []
            for idx in order:
                if not np.isfinite(flat[idx]):
                    continue
                b, tok = divmod(int(idx), logp.shape[1])
                ids = alive[b][0][1:] + [tok]
                if tok == EOS:
                    finished.append(Hypothesis(ids, flat[idx] / step, False, flat[idx]))
                elif step == max_len:
                    finished.append(Hypothesis(ids, flat[idx] / step, True, flat[idx]))
                else:
                    nxt_alive.append(([BOS] + ids, flat[idx]))
            alive = nxt_alive
            if not alive:
                break
        return max(finished, key=lambda h: h.score)

    # -- persistence -------------------------------------------------------
    def config_hash(self) -> str:
        return _hash_json(asdict(self.cfg))


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, 1e-300, 1.0 - 1e-16)
    return -np.log(-np.log(u))


def _hash_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def vocab_hash(vocab: Vocab) -> str:
    return _hash_json(vocab.tokens)


def _encode_array(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "values": [float(v) for v in np.asarray(a, dtype=np.float64).reshape(-1)]}


def _decode_array(d: dict) -> np.ndarray:
    return np.array(d["values"], dtype=np.float64).reshape(d["shape"])


def save_checkpoint(path: Path, model: TranslationCVAE, vocab: Vocab, extra: dict | None = None,
                    arrays: dict[str, dict[str, np.ndarray]] | None = None) -> None:
    """JSON checkpoint; float64 values written with round-trip ``repr`` precision."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "config_hash": model.config_hash(),
        "vocab": vocab.tokens,
        "vocab_hash": vocab_hash(vocab),
        "params": {n: _encode_array(t.data) for n, t in model.params.items()},
        "groups": dict(model.params.groups),
        "arrays": {k: {n: _encode_array(a) for n, a in v.items()} for k, v in (arrays or {}).items()},
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: Path) -> tuple[TranslationCVAE, Vocab, dict, dict]:
    """Inverse of :func:`save_checkpoint`; verifies version and hashes."""
    try:
        doc = json.loads(Path(path).read_text())
        version = doc["version"]
        cfg = ModelConfig(**doc["config"])
        vocab = Vocab(doc["vocab"])
        params = {n: _decode_array(v) for n, v in doc["params"].items()}
        arrays = {k: {n: _decode_array(a) for n, a in v.items()} for k, v in doc.get("arrays", {}).items()}
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    model = TranslationCVAE(cfg)
    if doc["config_hash"] != model.config_hash():
        raise CheckpointError("config hash mismatch")
    if doc["vocab_hash"] != vocab_hash(vocab) or len(vocab) != cfg.vocab_size:
        raise CheckpointError("vocab hash mismatch")
    model.params.load_state(params)
    return model, vocab, doc.get("extra", {}), arrays
