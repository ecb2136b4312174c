"""SeqGAN-style training: a GRU discriminator scores (input, output) pairs and its
score is the generator's terminal reward."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .policy import Vocab, gru_cell, gru_shapes, init_uniform, pad_batch, _masked_update
from .rl import PolicyTrainer

log = logging.getLogger(__name__)

Pairs = tuple[Sequence[Sequence[int]], Sequence[Sequence[int]]]


class Discriminator:
    """P(real | input, output) from a GRU over ``input + [SEP] + output``.

    EOS doubles as the separator token.
    """

    def __init__(self, vocab: Vocab, hidden: int = 64, lr: float = 1e-3, seed: int = 0):
        self.vocab = vocab
        self.hidden = hidden
        shapes = {"embedding": (len(vocab), hidden)}
        shapes.update(gru_shapes("enc", hidden, hidden))
        shapes.update({"head.W": (hidden, 1), "head.b": (1,)})
        self.params = init_uniform(shapes, np.random.default_rng(seed))
        self.opt = ad.Adam(self.params, lr=lr)

    def _joined(self, inputs, outputs):
        seqs = [list(x) + [self.vocab.eos] + list(y) for x, y in zip(inputs, outputs)]
        return pad_batch(seqs, self.vocab.pad)

    def logits(self, inputs: Sequence[Sequence[int]], outputs: Sequence[Sequence[int]]) -> Tensor:
        ids, lengths = self._joined(inputs, outputs)
        p = self.params
        h = Tensor(np.zeros((len(ids), self.hidden)))
        for t in range(int(lengths.max())):
            x = ad.gather_rows(p["embedding"], ids[:, t])
            h = _masked_update(h, gru_cell(p, "enc", x, h), lengths > t)
        return ad.matmul(h, p["head.W"]) + p["head.b"]

    def score(self, inputs, outputs) -> np.ndarray:
        with ad.no_grad():
            s = ad.sigmoid(self.logits(inputs, outputs))
        return s.data[:, 0]

    def loss(self, real: Pairs, fake: Pairs) -> Tensor:
        """Binary cross-entropy, real -> 1 and fake -> 0.

        log sigmoid(s) and log(1 - sigmoid(s)) are read off a log-softmax over
        the logit pair (0, s), which stays finite for any s.
        """
        if not real[0] or not fake[0]:
            raise ValueError("discriminator step needs real and fake pairs")
        inputs = list(real[0]) + list(fake[0])
        outputs = list(real[1]) + list(fake[1])
        labels = np.array([1] * len(real[0]) + [0] * len(fake[0]))
        s = self.logits(inputs, outputs)
        two = ad.concat([np.zeros((len(inputs), 1)), s], axis=1)
        return ad.scale(ad.reduce_sum(ad.pick(ad.log_softmax(two), labels)), -1.0 / len(inputs))

    def train_step(self, real: Pairs, fake: Pairs) -> float:
        self.opt.zero_grad()
        with ad.Tape() as tape:
            loss = self.loss(real, fake)
        tape.backward(loss)
        self.opt.step()
        return loss.item()


@dataclass
class SeqGANConfig:
    d_steps: int = 1
    g_steps: int = 1
    pretrain_steps: int = 50


class SeqGAN:
    """Alternates discriminator steps and generator policy-optimisation steps.

    The generator step is exactly ``trainer.iteration`` with the reward source
    replaced by the discriminator's score on the finished sequence.
    """

    def __init__(self, trainer: PolicyTrainer, disc: Discriminator, cfg: SeqGANConfig | None = None):
        self.trainer = trainer
        self.disc = disc
        self.cfg = cfg or SeqGANConfig()
        self.env = trainer.env
        self.rng = np.random.default_rng(trainer.cfg.seed + 7)

    def _real_and_fake(self, n: int) -> tuple[Pairs, Pairs]:
        inputs, lengths, ctx, _ = self.env.sample_inputs(self.rng, n)
        src = [inputs[i][:lengths[i]].tolist() for i in range(n)]
        real = self.env.real_outputs(self.rng, ctx)
        roll = self.trainer.policy.rollout(inputs, lengths, self.env.max_len, "sample", self.rng,
                                           fixed_length=self.env.fixed_length)
        fake = roll.sequences(strip_eos=self.env.eos_strip)
        return (src, real), (src, fake)

    def discriminator_step(self) -> float:
        real, fake = self._real_and_fake(self.trainer.cfg.batch_size)
        return self.disc.train_step(real, fake)

    def pretrain_discriminator(self, steps: int | None = None) -> list[float]:
        return [self.discriminator_step() for _ in range(self.cfg.pretrain_steps if steps is None else steps)]

    def discriminator_reward(self, inputs, outputs, ctx) -> np.ndarray:
        return self.disc.score(inputs, outputs)

    def iteration(self) -> dict:
        d_losses = [self.discriminator_step() for _ in range(self.cfg.d_steps)]
        task_scores, g_metrics = [], {}
        for _ in range(self.cfg.g_steps):
            captured = {}

            def reward(inputs, outputs, ctx):
                captured["task"] = self.env.reward(inputs, outputs, ctx)
                return self.discriminator_reward(inputs, outputs, ctx)

            g_metrics = self.trainer.iteration(reward_fn=reward)
            task_scores.append(float(np.mean(captured["task"])))
        metrics = dict(g_metrics)
        metrics.update(disc_loss=float(np.mean(d_losses)),
                       mean_fake_score=g_metrics["mean_reward"],
                       task_score=float(np.mean(task_scores)))
        return metrics
