"""Sequence-level policy optimisation: REINFORCE, MIXER, PPO-clip and PPO-dynamic.

Also holds the closed-form checks behind the dynamic clipping bounds: the
exact KL divergence of a single-action perturbation and the second-order
bound derived from it.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .policy import Rollout, Seq2SeqPolicy, init_uniform
from .tasks import assign_rewards

log = logging.getLogger(__name__)

ALGORITHMS = ("reinforce", "ppo", "ppo_dynamic")
MAX_RATIO = 1e4


# --- clipping bounds ---------------------------------------------------------------------------

@dataclass
class ClipConfig:
    """Clipping constants.  ``epsilon`` drives fixed PPO; the alphas/betas drive
    the dynamic variant.  ``math.inf`` is allowed for ``alpha1``/``beta1``."""
    epsilon: float = 0.2
    alpha1: float = math.inf
    alpha2: float = 1.0
    beta1: float = math.inf
    beta2: float = 1.0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.alpha1 <= 0 or self.beta1 <= 0:
            raise ValueError("alpha1 and beta1 must be > 0")
        if self.alpha2 <= 0 or self.beta2 <= 0:
            raise ValueError("alpha2 and beta2 must be > 0")

    @property
    def delta(self) -> float:
        """KL budget implied by alpha2 (alpha2 = sqrt(2 delta))."""
        return self.alpha2 ** 2 / 2

    @classmethod
    def rl_dynamic(cls) -> "ClipConfig":
        """Grid-search winner for REINFORCE/MIXER-style fine-tuning."""
        return cls(alpha1=math.inf, beta1=math.inf, alpha2=1.0, beta2=1.0)

    @classmethod
    def seqgan_dynamic(cls) -> "ClipConfig":
        return cls(alpha1=10.0, beta1=0.5, alpha2=0.2, beta2=0.2)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def dynamic_bounds(p_old, cfg: ClipConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-step (beta, alpha) from the old probability of the taken action.

    alpha = min(alpha1, alpha2 * sqrt(1/p - 1)), beta likewise; rare actions get
    wider room, near-certain ones almost none.
    """
    p = np.asarray(p_old, dtype=np.float64)
    if np.any(p <= 0) or np.any(p > 1):
        raise ValueError("old probabilities must lie in (0, 1]")
    spread = np.sqrt(np.maximum(1.0 / p - 1.0, 0.0))
    alpha = np.minimum(cfg.alpha1, cfg.alpha2 * spread)
    beta = np.minimum(cfg.beta1, cfg.beta2 * spread)
    return beta, alpha


def clip_interval(p_old, cfg: ClipConfig, mode: str) -> tuple[np.ndarray, np.ndarray]:
    """(lo, hi) for the ratio; the lower end never goes below 0."""
    p = np.asarray(p_old, dtype=np.float64)
    if mode == "fixed_eps":
        return (np.full(p.shape, max(0.0, 1.0 - cfg.epsilon)), np.full(p.shape, 1.0 + cfg.epsilon))
    if mode == "dynamic":
        beta, alpha = dynamic_bounds(p, cfg)
        return np.maximum(0.0, 1.0 - beta), 1.0 + alpha
    raise ValueError(f"unknown clip mode {mode!r}")


def kl_bound(p_old: float, delta: float) -> float:
    """Largest |alpha| keeping the second-order KL of a one-action perturbation <= delta."""
    if not 0.0 < p_old < 1.0:
        raise ValueError("p_old must lie in (0, 1)")
    if delta <= 0:
        raise ValueError("delta must be > 0")
    return math.sqrt(2.0 * delta) * math.sqrt((1.0 - p_old) / p_old)


def second_order_kl(p_old: float, alpha: float) -> float:
    return p_old / (1.0 - p_old) * alpha ** 2 / 2.0


def perturb(p_old_dist: Sequence[float], a: int, alpha: float) -> np.ndarray:
    """Scale outcome ``a`` by (1 + alpha) and every other outcome by one shared factor."""
    p = np.asarray(p_old_dist, dtype=np.float64)
    pa = p[a]
    if alpha <= -1.0:
        raise ValueError("alpha must exceed -1")
    if (1.0 + alpha) * pa > 1.0:
        raise ValueError("(1 + alpha) * P_old(a) exceeds 1")
    rest = (1.0 - (1.0 + alpha) * pa) / (1.0 - pa)
    q = p * rest
    q[a] = (1.0 + alpha) * pa
    return q


def kl_of_perturbation(p_old_dist: Sequence[float], a: int, alpha: float) -> float:
    """Exact KL(P_old || P) for the constant-factor perturbation of outcome ``a``."""
    p = np.asarray(p_old_dist, dtype=np.float64)
    q = perturb(p, a, alpha)
    support = p > 0
    if np.any(q[support] <= 0):
        return math.inf
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def kl_verification_table(p_values=(0.05, 0.1, 0.3, 0.5, 0.8),
                          deltas=(1e-6, 1e-5, 5e-5)) -> list[dict]:
    """Exact KL at the bound alpha for each (p_old, delta), both signs of alpha.

    The distribution is two-outcome (p, 1 - p); the constant-factor construction
    makes the KL independent of how the remaining mass is split.
    """
    rows = []
    for p in p_values:
        for delta in deltas:
            a_max = kl_bound(p, delta)
            for sign in (1.0, -1.0):
                kl = kl_of_perturbation([p, 1.0 - p], 0, sign * a_max)
                rows.append({"p_old": p, "delta": delta, "alpha": sign * a_max, "kl": kl,
                             "rel_error": abs(kl - delta) / delta})
    return rows


# --- trajectories ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """One episode, as a view of a row of :class:`TrajectoryBatch`."""
    inputs: list[int]
    outputs: list[int]
    old_logp: np.ndarray
    rewards: np.ndarray
    returns: np.ndarray
    values: np.ndarray
    advantages: np.ndarray


@dataclass
class TrajectoryBatch:
    """A batch of sampled episodes in padded [B, M] arrays.

    ``prefix`` is the number of leading teacher-forced steps (MIXER); those
    steps get a cross-entropy term instead of a policy-gradient term.
    """
    inputs: np.ndarray
    lengths: np.ndarray
    outputs: np.ndarray
    mask: np.ndarray
    old_logp: np.ndarray
    states: np.ndarray
    rewards: np.ndarray | None = None
    returns: np.ndarray | None = None
    values: np.ndarray | None = None
    advantages: np.ndarray | None = None
    prefix: int = 0

    @classmethod
    def from_rollout(cls, inputs, lengths, r: Rollout, prefix: int = 0) -> "TrajectoryBatch":
        return cls(inputs, lengths, r.tokens, r.mask, r.logp, r.states, prefix=prefix)

    @property
    def rl_mask(self) -> np.ndarray:
        m = self.mask.copy()
        m[:, :self.prefix] = 0.0
        return m

    @property
    def xent_mask(self) -> np.ndarray:
        m = np.zeros_like(self.mask)
        m[:, :self.prefix] = self.mask[:, :self.prefix]
        return m

    def trajectory(self, i: int) -> Trajectory:
        m = self.mask[i].astype(bool)
        pick = (lambda a: None if a is None else a[i][m])
        return Trajectory(self.inputs[i][:self.lengths[i]].tolist(), self.outputs[i][m].tolist(),
                          self.old_logp[i][m], pick(self.rewards), pick(self.returns),
                          pick(self.values), pick(self.advantages))


def discounted_returns(rewards: np.ndarray, mask: np.ndarray, gamma: float) -> np.ndarray:
    """G_t = sum_{tau >= t} gamma^(tau - t) r_tau within each masked row."""
    rewards = np.asarray(rewards, dtype=np.float64) * mask
    out = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[0])
    for t in range(rewards.shape[1] - 1, -1, -1):
        running = rewards[:, t] + gamma * running
        out[:, t] = running
    return out * mask


class ValueBaseline:
    """One-hidden-layer tanh regressor from decoder state to expected return."""

    def __init__(self, d_in: int, hidden: int = 64, lr: float = 1e-3, seed: int = 0):
        self.params = init_uniform({"W1": (d_in, hidden), "b1": (hidden,),
                                    "W2": (hidden, 1), "b2": (1,)},
                                   np.random.default_rng(seed))
        self.opt = ad.Adam(self.params, lr=lr)

    def forward(self, states: np.ndarray) -> Tensor:
        p = self.params
        x = np.asarray(states).reshape(-1, states.shape[-1])
        hdn = ad.tanh(ad.matmul(x, p["W1"]) + p["b1"])
        return ad.matmul(hdn, p["W2"]) + p["b2"]

    def predict(self, states: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.forward(states).data.reshape(states.shape[:-1])

    def loss(self, states: np.ndarray, returns: np.ndarray, mask: np.ndarray) -> Tensor:
        pred = self.forward(states)
        err = pred - returns.reshape(-1, 1)
        w = mask.reshape(-1, 1)
        return ad.scale(ad.reduce_sum(err * err * w), 1.0 / max(w.sum(), 1.0))

    def train_step(self, states: np.ndarray, returns: np.ndarray, mask: np.ndarray) -> float:
        self.opt.zero_grad()
        with ad.Tape() as tape:
            loss = self.loss(states, returns, mask)
        tape.backward(loss)
        self.opt.step()
        return loss.item()


def compute_returns_and_advantages(batch: TrajectoryBatch, gamma: float,
                                   baseline: "ValueBaseline | np.ndarray | None" = None,
                                   normalize: bool = False) -> TrajectoryBatch:
    """Fill returns, baseline values and advantages A_t = G_t - b_t in place."""
    if batch.rewards is None:
        raise ValueError("assign rewards before computing advantages")
    batch.returns = discounted_returns(batch.rewards, batch.mask, gamma)
    if baseline is None:
        values = np.zeros_like(batch.returns)
    elif isinstance(baseline, ValueBaseline):
        values = baseline.predict(batch.states)
    else:
        values = np.asarray(baseline, dtype=np.float64)
    batch.values = values * batch.mask
    adv = (batch.returns - values) * batch.mask
    if normalize:
        m = batch.rl_mask.astype(bool)
        if m.sum() > 1:
            mu, sd = adv[m].mean(), adv[m].std()
            adv = np.where(m, (adv - mu) / (sd + 1e-8), 0.0)
    batch.advantages = adv
    return batch


# --- losses ---------------------------------------------------------------------------------

def _new_logp(policy: Seq2SeqPolicy, batch: TrajectoryBatch) -> Tensor:
    return policy.sequence_log_probs(batch.inputs, batch.lengths, batch.outputs, batch.mask)


def _xent_term(lp: Tensor, batch: TrajectoryBatch) -> Tensor | None:
    if batch.prefix == 0:
        return None
    return ad.reduce_sum(ad.mul(lp, batch.xent_mask))


def reinforce_loss(policy: Seq2SeqPolicy, batch: TrajectoryBatch) -> Tensor:
    """-mean_t A_t log pi(a_t|s_t) over valid steps, advantages held constant."""
    lp = _new_logp(policy, batch)
    objective = ad.reduce_sum(ad.mul(lp, batch.advantages * batch.rl_mask))
    xent = _xent_term(lp, batch)
    if xent is not None:
        objective = objective + xent
    return ad.scale(objective, -1.0 / batch.mask.sum())


@dataclass
class PPOStats:
    mean_ratio: float
    clip_fraction: float
    approx_kl: float


def ppo_loss(policy: Seq2SeqPolicy, batch: TrajectoryBatch, cfg: ClipConfig,
             mode: str = "fixed_eps") -> tuple[Tensor, PPOStats]:
    """Clipped surrogate: -mean_t min(rho A, clip(rho, lo, hi) A).

    rho is formed in log space and capped at 1e4.  ``mode`` is ``fixed_eps``
    (lo, hi = 1 -/+ epsilon) or ``dynamic`` (per-step bounds from the old
    probability of the taken action).
    """
    m = batch.rl_mask
    lp = _new_logp(policy, batch)
    p_old = np.where(batch.mask > 0, np.exp(batch.old_logp), 1.0)
    lo, hi = clip_interval(p_old, cfg, mode)
    log_ratio = ad.clip(lp - batch.old_logp, -np.inf, math.log(MAX_RATIO))
    ratio = ad.exp(log_ratio)
    adv = batch.advantages
    surrogate = ad.minimum(ad.mul(ratio, adv), ad.mul(ad.clip(ratio, lo, hi), adv))
    objective = ad.reduce_sum(ad.mul(surrogate, m))
    xent = _xent_term(lp, batch)
    if xent is not None:
        objective = objective + xent
    loss = ad.scale(objective, -1.0 / batch.mask.sum())

    valid = m > 0
    r = ratio.data
    gated = ((adv > 0) & (r > hi)) | ((adv < 0) & (r < lo))
    n = max(int(valid.sum()), 1)
    stats = PPOStats(mean_ratio=float(r[valid].mean()) if valid.any() else 1.0,
                     clip_fraction=float(gated[valid].sum() / n),
                     approx_kl=float((batch.old_logp - lp.data)[valid].mean()) if valid.any() else 0.0)
    return loss, stats


# --- MIXER ----------------------------------------------------------------------------------

def mixer_schedule(epoch: int, total_len: int, anneal_epochs: int = 10) -> int:
    """Number of leading teacher-forced steps: total_len at epoch 0, linearly down to 0."""
    if epoch >= anneal_epochs:
        return 0
    # integer ceil of total_len * (1 - epoch / anneal_epochs), free of float rounding
    return max(0, min(total_len, -(-total_len * (anneal_epochs - epoch) // anneal_epochs)))


@dataclass
class MixerConfig:
    total_len: int
    anneal_epochs: int = 10
    iters_per_epoch: int = 10


# --- training loop ----------------------------------------------------------------------------

RewardFn = Callable[[list, list, list], np.ndarray]


@dataclass
class TrainerConfig:
    algorithm: str = "reinforce"
    lr: float = 1e-4
    batch_size: int = 64
    ppo_epochs: int = 4
    gamma: float = 1.0
    normalize_advantages: bool = False
    baseline_hidden: int = 64
    baseline_lr: float = 1e-3
    clip: ClipConfig = field(default_factory=ClipConfig)
    mixer: MixerConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.batch_size < 1 or self.ppo_epochs < 1:
            raise ValueError("batch_size and ppo_epochs must be >= 1")


class PolicyTrainer:
    """Runs sample -> reward -> advantage -> update iterations on an environment.

    ``env`` supplies ``sample_inputs(rng, n)``, ``reward(inputs, outputs, ctx)``,
    ``max_len``, ``fixed_length`` and ``eos_strip``; see :mod:`seqppo.tasks`.
    The reward source can be overridden per call (adversarial training).
    """

    def __init__(self, policy: Seq2SeqPolicy, env, cfg: TrainerConfig):
        self.policy = policy
        self.env = env
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.opt = ad.Adam(policy.params, lr=cfg.lr)
        self.baseline = ValueBaseline(policy.hidden, cfg.baseline_hidden, cfg.baseline_lr, seed=cfg.seed + 1)
        self.iteration_index = 0

    def prefix_len(self) -> int:
        mx = self.cfg.mixer
        if mx is None:
            return 0
        return mixer_schedule(self.iteration_index // mx.iters_per_epoch, mx.total_len, mx.anneal_epochs)

    def sample_batch(self, snapshot: Seq2SeqPolicy) -> tuple[TrajectoryBatch, list, list]:
        inputs, lengths, ctx, prefix_tokens = self.env.sample_inputs(self.rng, self.cfg.batch_size)
        k = self.prefix_len()
        prefix = prefix_tokens[:, :k] if k > 0 else None
        roll = snapshot.rollout(inputs, lengths, self.env.max_len, "sample", self.rng,
                                fixed_length=self.env.fixed_length, prefix=prefix)
        batch = TrajectoryBatch.from_rollout(inputs, lengths, roll, prefix=k)
        outputs = roll.sequences(strip_eos=self.env.eos_strip)
        return batch, outputs, ctx

    def iteration(self, reward_fn: RewardFn | None = None) -> dict:
        cfg = self.cfg
        snapshot = self.policy.snapshot()
        batch, outputs, ctx = self.sample_batch(snapshot)
        src = [batch.inputs[i][:batch.lengths[i]].tolist() for i in range(len(outputs))]
        score = reward_fn or self.env.reward
        terminal = np.asarray(score(src, outputs, ctx), dtype=np.float64)
        batch.rewards = assign_rewards(terminal, batch.mask)
        compute_returns_and_advantages(batch, cfg.gamma, self.baseline, cfg.normalize_advantages)
        base_loss = self.baseline.train_step(batch.states, batch.returns, batch.rl_mask)

        stats = []
        epochs = 1 if cfg.algorithm == "reinforce" else cfg.ppo_epochs
        for _ in range(epochs):
            self.opt.zero_grad()
            with ad.Tape() as tape:
                if cfg.algorithm == "reinforce":
                    loss = reinforce_loss(self.policy, batch)
                    st = None
                else:
                    mode = "dynamic" if cfg.algorithm == "ppo_dynamic" else "fixed_eps"
                    loss, st = ppo_loss(self.policy, batch, cfg.clip, mode)
            tape.backward(loss)
            self.opt.step()
            stats.append(st)
        self.iteration_index += 1
        metrics = {
            "iteration": self.iteration_index,
            "mean_reward": float(terminal.mean()),
            "baseline_loss": base_loss,
            "loss": loss.item(),
            "prefix": batch.prefix,
        }
        if stats[0] is not None:
            metrics["mean_ratio"] = float(np.mean([s.mean_ratio for s in stats]))
            metrics["clip_fraction"] = float(np.mean([s.clip_fraction for s in stats]))
            metrics["approx_kl"] = float(np.mean([s.approx_kl for s in stats]))
        else:
            metrics.update(mean_ratio=1.0, clip_fraction=0.0, approx_kl=0.0)
        return metrics
