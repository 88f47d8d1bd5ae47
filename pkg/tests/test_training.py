import math

import numpy as np
import pytest

from micvae.autodiff import Tensor
from micvae.corpus import encode_pairs, gen_monolingual, gen_multimodal_task, synthetic_vocab
from micvae.training import (MODES, Adam, DivergenceError, TrainConfig, Trainer, adam_step,
                             gradient_mask, lr_at, train)

TINY = {"d_model": 8, "n_heads": 2, "n_layers": 1, "ffn_dim": 16, "K": 2, "C": 4}


@pytest.fixture(scope="module")
def data():
    vocab = synthetic_vocab(2)
    pairs = encode_pairs(gen_multimodal_task(64, 2, seed=11), vocab)
    mono = [vocab.encode(s) for s in gen_monolingual(32, seed=12)]
    return vocab, pairs, mono


def make_trainer(data, **kw):
    vocab, pairs, mono = data
    cfg = TrainConfig(**{"steps": 4, "max_tokens": 120, "eval_every": 2, "model": TINY, **kw})
    return Trainer(cfg, vocab, pairs, mono if cfg.self_training else None, pairs[:16])


def snapshot(model):
    return {n: t.data.copy() for n, t in model.params.tensors.items()}


# -- schedule and optimizer ------------------------------------------------------------
def test_lr_peaks_at_warmup():
    cfg = TrainConfig(warmup_steps=50)
    lrs = [lr_at(s, cfg, 32) for s in range(1, 400)]
    assert int(np.argmax(lrs)) + 1 == 50
    assert lr_at(50, cfg, 32) == pytest.approx(cfg.lr * 32 ** -0.5 * 50 ** -0.5)


def test_zero_grad_zero_decay_leaves_param():
    p = np.array([0.3, -1.2])
    out, _, _ = adam_step(p, np.zeros(2), np.zeros(2), np.zeros(2), 1, 0.1)
    np.testing.assert_array_equal(out, p)


def test_two_scalar_steps_match_hand_arithmetic():
    b1, b2, eps, lr, wd = 0.9, 0.98, 1e-8, 0.01, 0.001
    x, g1, g2 = 1.0, 0.5, -2.0
    # step 1
    m1, v1 = 0.1 * g1, 0.02 * g1 ** 2
    x1 = x - lr * ((m1 / 0.1) / (math.sqrt(v1 / 0.02) + eps) + wd * x)
    # step 2
    m2, v2 = 0.9 * m1 + 0.1 * g2, 0.98 * v1 + 0.02 * g2 ** 2
    x2 = x1 - lr * ((m2 / (1 - 0.81)) / (math.sqrt(v2 / (1 - 0.98 ** 2)) + eps) + wd * x1)

    p, m, v = np.array(x), np.zeros(()), np.zeros(())
    p, m, v = adam_step(p, np.array(g1), m, v, 1, lr, b1, b2, eps, wd)
    p, m, v = adam_step(p, np.array(g2), m, v, 2, lr, b1, b2, eps, wd)
    assert abs(float(p) - x2) < 1e-15

    t = Tensor(np.array(x))
    opt = Adam(b1, b2, eps, wd)
    opt.step({"w": t}, {"w": np.array(g1)}, lr)
    opt.step({"w": t}, {"w": np.array(g2)}, lr)
    assert float(t.data) == float(p)


# -- configuration -----------------------------------------------------------------------
def test_config_validation():
    with pytest.raises(ValueError, match="valid modes"):
        TrainConfig(mode="vae")
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(warmup_steps=0)
    with pytest.raises(ValueError, match="unknown config keys"):
        TrainConfig.from_dict({"stpes": 3})
    cfg = TrainConfig(mode="dcvae", steps=7)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_unknown_step_kind():
    with pytest.raises(ValueError):
        gradient_mask("decoder", None)


# -- parameter masks ------------------------------------------------------------------------
def test_mask_groups(data):
    tr = make_trainer(data, mode="micvae_bow")
    P = tr.model.params
    groups = lambda kind: {P.groups[n] for n in gradient_mask(kind, P)}
    assert groups("mono") == {"enc", "infer"}
    assert groups("bow") == {"enc", "infer", "bow"}
    assert groups("supervised") == {"enc", "infer", "dec", "bow"}


@pytest.mark.parametrize("kind", ["mono", "bow"])
def test_masked_step_leaves_other_params_bit_identical(data, kind):
    tr = make_trainer(data, mode="micvae_bow", self_training=True)
    before = snapshot(tr.model)
    batch = tr.sample_batch()
    loss, _ = tr.mono_step_loss(tr.sample_mono()) if kind == "mono" else tr.bow_step_loss(batch)
    assert tr.apply(loss, kind, 0.05)
    allowed = set(gradient_mask(kind, tr.model.params))
    changed = {n for n, a in snapshot(tr.model).items() if not np.array_equal(a, before[n])}
    assert changed and changed <= allowed
    groups = tr.model.params.groups
    frozen = {"dec", "bow"} if kind == "mono" else {"dec"}
    assert not any(groups[n] in frozen for n in changed)


def test_supervised_step_reaches_bow_head_through_mixture(data):
    tr = make_trainer(data, mode="micvae_bow")
    assert tr.model.cfg.lambda_mix > 0
    P = tr.model.params
    loss, _ = tr.supervised_loss(tr.sample_batch())
    P.zero_grad()
    loss.backward()
    bow = [n for n in P.names(("bow",))]
    assert any(P[n].grad is not None and np.abs(P[n].grad).max() > 0 for n in bow)


def test_self_training_mono_steps_never_touch_decoder(data):
    tr = make_trainer(data, mode="micvae", self_training=True)
    dec = tr.model.params.names(("dec",))
    seen = []
    original = tr.apply

    def spy(loss, kind, lr):
        before = {n: tr.model.params[n].data.copy() for n in dec}
        ok = original(loss, kind, lr)
        if kind == "mono":
            seen.append(all(np.array_equal(before[n], tr.model.params[n].data) for n in dec))
        return ok

    tr.apply = spy
    for _ in range(3):
        tr.step()
    assert seen == [True] * 3


# -- guards ---------------------------------------------------------------------------------------
def test_nan_loss_skips_update(data):
    tr = make_trainer(data, mode="nonlatent")
    before = snapshot(tr.model)
    loss, _ = tr.supervised_loss(tr.sample_batch())
    bad = loss * Tensor(np.array(float("nan")))
    assert not tr.apply(bad, "supervised", 0.1)
    assert tr.skipped_nan == 1
    assert all(np.array_equal(a, before[n]) for n, a in snapshot(tr.model).items())


def test_divergence_guard(data):
    tr = make_trainer(data, divergence_patience=3)
    tr._guard(1.0)
    tr._guard(2.5)
    tr._guard(1.5)  # resets the streak
    tr._guard(3.0)
    tr._guard(3.0)
    with pytest.raises(DivergenceError):
        tr._guard(3.0)


def test_self_training_requires_mono(data):
    vocab, pairs, _ = data
    with pytest.raises(ValueError):
        Trainer(TrainConfig(self_training=True, model=TINY), vocab, pairs)


# -- end to end ------------------------------------------------------------------------------------
@pytest.mark.parametrize("mode", MODES)
def test_every_mode_trains(data, mode):
    tr = make_trainer(data, mode=mode, steps=2)
    first = tr.step()["supervised"]
    assert math.isfinite(first.total)
    if mode == "nonlatent":
        assert tr.model.cfg.latent == "none" and first.kl_per_example == 0.0
    assert ("bow" in tr.step()) == (mode in ("micvae_bow", "dcvae_bow"))


def test_same_seed_identical_logs(data, tmp_path):
    vocab, pairs, mono = data
    cfg = TrainConfig(mode="micvae_bow", steps=4, eval_every=2, max_tokens=120, model=TINY,
                      self_training=True, seed=3)
    for name in ("a", "b"):
        train(pairs, vocab, cfg, tmp_path / name, mono=mono, valid=pairs[:16])
    for f in ("metrics.csv", "losses.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert len((tmp_path / "a" / "metrics.csv").read_text().splitlines()) == 1 + 3
    assert (tmp_path / "a" / "manifest.json").exists()


def test_resume_reproduces_next_step_bit_exactly(data, tmp_path):
    tr = make_trainer(data, mode="micvae_bow", self_training=True)
    for _ in range(3):
        tr.step()
    tr.save(tmp_path / "ck.json")
    vocab, pairs, mono = data
    back = Trainer.resume(tmp_path / "ck.json", pairs, mono, pairs[:16])
    assert back.step_count == 3
    ra, rb = tr.step(), back.step()
    assert {k: r.as_dict() for k, r in ra.items()} == {k: r.as_dict() for k, r in rb.items()}
    a, b = snapshot(tr.model), snapshot(back.model)
    assert all(np.array_equal(a[n], b[n]) for n in a)
