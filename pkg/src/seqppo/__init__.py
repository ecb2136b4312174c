"""Sequence-level policy optimisation (REINFORCE, MIXER, PPO, PPO-dynamic, SeqGAN)
on a small GRU encoder-decoder with its own reverse-mode autodiff."""

__version__ = "0.1.0"
