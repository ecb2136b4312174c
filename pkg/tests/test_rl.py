import math

import numpy as np
import pytest

from seqppo import autodiff as ad
from seqppo.autodiff import grad_check
from seqppo.policy import Seq2SeqPolicy, Vocab, pad_batch
from seqppo.rl import (ClipConfig, PolicyTrainer, TrainerConfig, TrajectoryBatch, ValueBaseline,
                       clip_interval, compute_returns_and_advantages, discounted_returns,
                       dynamic_bounds, kl_bound, kl_of_perturbation, kl_verification_table,
                       mixer_schedule, perturb, ppo_loss, reinforce_loss, second_order_kl)
from seqppo.tasks import CountingEnv, assign_rewards, gen_counting_dataset


def toy_batch(seed=0, hidden=6, scale=1.0):
    """A sampled Counting-vocabulary batch with random advantages of both signs."""
    pol = Seq2SeqPolicy(Vocab.counting(), hidden=hidden, seed=seed)
    for p in pol.params.values():
        p.data *= scale
    rng = np.random.default_rng(seed)
    inputs, lengths = pad_batch([[1, 2, 3], [4], [5, 6]], pol.vocab.pad)
    roll = pol.rollout(inputs, lengths, 3, "sample", rng, fixed_length=True)
    batch = TrajectoryBatch.from_rollout(inputs, lengths, roll)
    batch.advantages = rng.normal(size=roll.mask.shape) * roll.mask
    return pol, batch


def grads(pol, loss_fn):
    for p in pol.params.values():
        p.grad = None
    with ad.Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in pol.params.items()}


# --- returns and baseline -------------------------------------------------------------------

def test_returns_examples():
    mask = np.ones((1, 3))
    r = assign_rewards(np.array([1.0]), mask)
    np.testing.assert_array_equal(discounted_returns(r, mask, 1.0), [[1, 1, 1]])
    np.testing.assert_allclose(discounted_returns(r, mask, 0.5), [[0.25, 0.5, 1.0]], rtol=0, atol=0)


def test_returns_are_linear_in_rewards():
    pol, batch = toy_batch()
    batch.rewards = assign_rewards(np.array([0.3, 1.0, 0.0]), batch.mask)
    a = compute_returns_and_advantages(batch, 0.9).advantages.copy()
    batch.rewards = batch.rewards * 2.5
    b = compute_returns_and_advantages(batch, 0.9).advantages
    np.testing.assert_allclose(b, 2.5 * a, rtol=1e-15)


def test_perfect_baseline_gives_zero_gradient():
    pol, batch = toy_batch()
    batch.rewards = assign_rewards(np.array([1.0, 0.0, 1.0]), batch.mask)
    returns = discounted_returns(batch.rewards, batch.mask, 1.0)
    compute_returns_and_advantages(batch, 1.0, baseline=returns)
    assert np.all(batch.advantages == 0)
    for g in grads(pol, lambda: reinforce_loss(pol, batch)).values():
        assert np.all(g == 0)


def test_baseline_converges_on_constant_returns():
    rng = np.random.default_rng(0)
    states = rng.uniform(-1, 1, size=(32, 3, 8))
    returns, mask = np.full((32, 3), 0.7), np.ones((32, 3))
    base = ValueBaseline(8, lr=1e-2, seed=0)
    losses = [base.train_step(states, returns, mask) for _ in range(300)]
    assert losses[-1] < 1e-4
    np.testing.assert_allclose(base.predict(states), 0.7, atol=0.02)


def test_baseline_loss_non_increasing_on_fixed_data():
    rng = np.random.default_rng(1)
    states = rng.uniform(-1, 1, size=(16, 4, 8))
    returns = rng.uniform(0, 1, size=(16, 4))
    base = ValueBaseline(8, seed=2)
    losses = [base.train_step(states, returns, np.ones((16, 4))) for _ in range(100)]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_baseline_grad_check():
    rng = np.random.default_rng(3)
    base = ValueBaseline(5, hidden=7, seed=4)
    for p in base.params.values():
        p.data *= 10
    states, returns = rng.normal(size=(6, 2, 5)), rng.normal(size=(6, 2))
    mask = np.array([[1, 1]] * 4 + [[1, 0]] * 2, dtype=float)
    report = grad_check(lambda: base.loss(states, returns, mask), base.params)
    assert report["passed"], report["max_error"]


# --- REINFORCE ----------------------------------------------------------------------------------

def test_zero_advantage_gives_zero_gradient():
    pol, batch = toy_batch()
    batch.advantages = np.zeros_like(batch.mask)
    assert all(np.all(g == 0) for g in grads(pol, lambda: reinforce_loss(pol, batch)).values())


def test_single_step_gradient_is_grad_of_neg_log_prob():
    pol = Seq2SeqPolicy(Vocab.from_words(["a", "b"]), hidden=4, seed=1)
    inputs, lengths = pad_batch([[3]], pol.vocab.pad)
    roll = pol.rollout(inputs, lengths, 1, "sample", np.random.default_rng(0), fixed_length=True)
    batch = TrajectoryBatch.from_rollout(inputs, lengths, roll)
    batch.advantages = np.ones((1, 1))
    g = grads(pol, lambda: reinforce_loss(pol, batch))
    ref = grads(pol, lambda: ad.scale(pol.sequence_log_probs(inputs, lengths, roll.tokens), -1.0))
    for k in g:
        np.testing.assert_array_equal(g[k], ref[k])
    # d(-log softmax)/d bias = p - onehot
    h = pol.encode(inputs, lengths)
    p, _ = pol.step_probs(h, np.array([pol.vocab.bos]))
    expected = p[0].copy()
    expected[roll.tokens[0, 0]] -= 1
    np.testing.assert_allclose(g["out.b"], expected, rtol=1e-12, atol=1e-15)


def test_reinforce_grad_check():
    pol, batch = toy_batch(scale=5.0)
    report = grad_check(lambda: reinforce_loss(pol, batch), pol.params)
    assert report["passed"], report["max_error"]


# --- clipping bounds ------------------------------------------------------------------------

def test_dynamic_bounds_examples():
    lo, hi = clip_interval(0.5, ClipConfig.rl_dynamic(), "dynamic")
    assert (lo, hi) == (0.0, 2.0)
    beta, alpha = dynamic_bounds(0.2, ClipConfig.seqgan_dynamic())
    assert alpha == pytest.approx(0.4, abs=1e-15) and beta == pytest.approx(0.4, abs=1e-15)
    lo, hi = clip_interval(0.2, ClipConfig.seqgan_dynamic(), "dynamic")
    assert lo == pytest.approx(0.6) and hi == pytest.approx(1.4)
    assert clip_interval(1.0, ClipConfig.rl_dynamic(), "dynamic") == (1.0, 1.0)
    # beta1 caps rare actions
    beta, alpha = dynamic_bounds(0.001, ClipConfig.seqgan_dynamic())
    assert beta == 0.5 and alpha == pytest.approx(0.2 * math.sqrt(999))


def test_dynamic_bounds_errors():
    with pytest.raises(ValueError):
        dynamic_bounds(0.0, ClipConfig())
    with pytest.raises(ValueError):
        ClipConfig(alpha2=0.0)
    with pytest.raises(ValueError):
        clip_interval(0.5, ClipConfig(), "adaptive")


@pytest.mark.parametrize("p", [0.05, 0.1, 0.3, 0.5, 0.8])
def test_dynamic_bound_equals_kl_bound(p):
    cfg = ClipConfig(alpha2=0.7, beta2=0.7)
    beta, alpha = dynamic_bounds(p, cfg)
    assert alpha == pytest.approx(kl_bound(p, cfg.delta), rel=1e-14)
    assert beta == alpha


def test_fixed_interval():
    lo, hi = clip_interval(np.array([0.1, 0.9]), ClipConfig(epsilon=0.2), "fixed_eps")
    np.testing.assert_allclose(lo, 0.8)
    np.testing.assert_allclose(hi, 1.2)


# --- PPO losses -----------------------------------------------------------------------------------

@pytest.mark.parametrize("mode,cfg", [("fixed_eps", ClipConfig()), ("dynamic", ClipConfig.rl_dynamic()),
                                      ("dynamic", ClipConfig.seqgan_dynamic())])
def test_ppo_equals_reinforce_at_ratio_one(mode, cfg):
    pol, batch = toy_batch()
    loss, stats = ppo_loss(pol, batch, cfg, mode)
    assert stats.mean_ratio == 1.0 and stats.clip_fraction == 0.0
    assert loss.item() == pytest.approx(-batch.advantages.sum() / batch.mask.sum(), abs=1e-15)
    g_ppo = grads(pol, lambda: ppo_loss(pol, batch, cfg, mode)[0])
    g_pg = grads(pol, lambda: reinforce_loss(pol, batch))
    for k in g_pg:
        np.testing.assert_allclose(g_ppo[k], g_pg[k], rtol=0, atol=1e-10)


def drifted(seed=0):
    """Policy moved away from the snapshot that generated the batch."""
    pol, batch = toy_batch(seed=seed, scale=3.0)
    rng = np.random.default_rng(seed + 100)
    for p in pol.params.values():
        p.data = p.data + rng.normal(0, 0.6, size=p.data.shape)
    return pol, batch


@pytest.mark.parametrize("mode,cfg", [("fixed_eps", ClipConfig()), ("dynamic", ClipConfig.seqgan_dynamic())])
def test_clip_gating_per_step(mode, cfg):
    seen = set()
    for seed in range(4):
        pol, batch = drifted(seed)
        ratio = np.exp(pol.sequence_log_probs(batch.inputs, batch.lengths, batch.outputs).data - batch.old_logp)
        lo, hi = clip_interval(np.exp(batch.old_logp), cfg, mode)
        full_adv = batch.advantages.copy()
        for i, t in zip(*np.nonzero(batch.mask)):
            batch.advantages = np.zeros_like(full_adv)
            batch.advantages[i, t] = full_adv[i, t]
            g = grads(pol, lambda: ppo_loss(pol, batch, cfg, mode)[0])
            zero = all(np.all(v == 0) for v in g.values())
            a, r = full_adv[i, t], ratio[i, t]
            gated = (a > 0 and r > hi[i, t]) or (a < 0 and r < lo[i, t])
            assert zero == gated, (mode, seed, i, t, a, r, lo[i, t], hi[i, t])
            seen.add((gated, a > 0))
        batch.advantages = full_adv
    assert (True, True) in seen or (True, False) in seen
    assert (False, True) in seen and (False, False) in seen


def test_unclipped_branch_when_advantage_negative_and_ratio_high():
    pol, batch = drifted(1)
    ratio = np.exp(pol.sequence_log_probs(batch.inputs, batch.lengths, batch.outputs).data - batch.old_logp)
    cfg = ClipConfig(epsilon=0.01)
    i, t = np.unravel_index(np.argmax(np.where(batch.mask > 0, ratio, -1)), ratio.shape)
    assert ratio[i, t] > 1.01
    batch.advantages = np.zeros_like(batch.mask)
    batch.advantages[i, t] = -1.0
    g = grads(pol, lambda: ppo_loss(pol, batch, cfg, "fixed_eps")[0])
    assert any(np.any(v != 0) for v in g.values())


@pytest.mark.parametrize("mode,cfg", [("fixed_eps", ClipConfig()), ("dynamic", ClipConfig.rl_dynamic())])
def test_ppo_grad_check(mode, cfg):
    pol, batch = drifted(2)
    report = grad_check(lambda: ppo_loss(pol, batch, cfg, mode)[0], pol.params)
    assert report["passed"], report["max_error"]


def test_ratio_is_capped():
    pol, batch = toy_batch()
    batch.old_logp = np.where(batch.mask > 0, -50.0, 0.0)
    _, stats = ppo_loss(pol, batch, ClipConfig(), "fixed_eps")
    assert stats.mean_ratio == pytest.approx(1e4, rel=1e-12)


# --- training iteration ---------------------------------------------------------------------------

def counting_trainer(alg, lr=1e-3, seed=0, clip=None):
    env = CountingEnv(gen_counting_dataset(0, 200))
    pol = Seq2SeqPolicy(Vocab.counting(), hidden=8, seed=1)
    return PolicyTrainer(pol, env, TrainerConfig(algorithm=alg, lr=lr, batch_size=16, seed=seed,
                                                 clip=clip or ClipConfig()))


@pytest.mark.parametrize("alg", ["ppo", "ppo_dynamic"])
def test_zero_learning_rate_keeps_params_and_unit_ratio(alg):
    tr = counting_trainer(alg, lr=0.0)
    before = {k: p.data.copy() for k, p in tr.policy.params.items()}
    for _ in range(2):
        m = tr.iteration()
        assert m["mean_ratio"] == 1.0 and m["clip_fraction"] == 0.0
    for k, p in tr.policy.params.items():
        assert np.array_equal(p.data, before[k])


def test_iteration_metrics():
    tr = counting_trainer("ppo", lr=5e-2)
    for i in range(3):
        m = tr.iteration()
        assert m["iteration"] == i + 1
        assert 0.0 <= m["clip_fraction"] <= 1.0
        assert 0.0 <= m["mean_reward"] <= 1.0
        assert math.isfinite(m["loss"]) and math.isfinite(m["approx_kl"])
    assert tr.iteration()["clip_fraction"] > 0


def test_trainer_is_deterministic():
    runs = [[counting_trainer("reinforce").iteration() for _ in range(3)] for _ in range(2)]
    assert runs[0] == runs[1]


def test_unknown_algorithm_rejected():
    with pytest.raises(ValueError):
        TrainerConfig(algorithm="trpo")


# --- MIXER schedule --------------------------------------------------------------------------------

def test_mixer_schedule_endpoints_and_monotonicity():
    assert mixer_schedule(0, 3) == 3
    assert mixer_schedule(10, 3) == 0 and mixer_schedule(25, 3) == 0
    seq = [mixer_schedule(e, 3) for e in range(12)]
    assert all(b <= a for a, b in zip(seq, seq[1:]))
    seq20 = [mixer_schedule(e, 20) for e in range(11)]
    assert seq20 == [20, 18, 16, 14, 12, 10, 8, 6, 4, 2, 0]


def test_mixer_prefix_trains_teacher_forced_steps():
    tr = counting_trainer("reinforce")
    from seqppo.rl import MixerConfig
    tr.cfg.mixer = MixerConfig(total_len=3, anneal_epochs=2, iters_per_epoch=1)
    prefixes = [tr.iteration()["prefix"] for _ in range(3)]
    assert prefixes == [3, 2, 0]


# --- KL verification --------------------------------------------------------------------------------

def test_kl_uniform_example():
    p = np.full(10, 0.1)
    a_star = kl_bound(0.1, 5e-5)
    assert a_star == pytest.approx(0.03, rel=1e-12)
    assert kl_of_perturbation(p, 3, a_star) == pytest.approx(5e-5, rel=0.05)


def test_kl_bound_examples():
    assert kl_bound(0.5, 0.5) == pytest.approx(1.0)
    assert kl_bound(0.999999, 0.5) < 2e-3
    for p in (0.05, 0.3, 0.8):
        assert second_order_kl(p, kl_bound(p, 1e-4)) == pytest.approx(1e-4, rel=1e-12)
    with pytest.raises(ValueError):
        kl_bound(1.0, 0.1)


def test_perturbation_properties():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = rng.dirichlet(np.ones(6))
        a = int(rng.integers(6))
        alpha = rng.uniform(-0.9, min(1.0, 1 / p[a] - 1))
        np.testing.assert_allclose(perturb(p, a, alpha).sum(), 1.0, rtol=0, atol=1e-12)
        assert kl_of_perturbation(p, a, alpha) >= 0
    assert kl_of_perturbation([0.2, 0.8], 0, 0.0) == 0.0
    with pytest.raises(ValueError):
        kl_of_perturbation([0.6, 0.4], 0, 0.8)
    with pytest.raises(ValueError):
        kl_of_perturbation([0.6, 0.4], 0, -1.0)


def test_kl_table_within_tolerance_and_monotone():
    rows = kl_verification_table()
    assert len(rows) == 5 * 3 * 2
    assert max(r["rel_error"] for r in rows) < 0.10
    for p in (0.05, 0.1, 0.3, 0.5, 0.8):
        for sign in (1, -1):
            errs = [r["rel_error"] for r in rows if r["p_old"] == p and np.sign(r["alpha"]) == sign]
            # deltas are listed smallest first
            assert errs == sorted(errs)
