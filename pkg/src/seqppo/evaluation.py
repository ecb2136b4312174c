"""Evaluation protocols: sampled precision, first-output diversity, corpus BLEU-2."""
from __future__ import annotations

from collections import defaultdict
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .policy import Seq2SeqPolicy, pad_batch
from .tasks import (CountingInstance, ReferenceSet, bleu2, counting_correct,
                    counting_truth_distribution, distribution_variance, total_variation)


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def counting_precision(policy: Seq2SeqPolicy, instances: Sequence[CountingInstance],
                       samples: int = 10, seed: int = 0, batch_size: int = 2048,
                       mode: str = "sample") -> dict:
    """Fraction of sampled answers that are valid, plus first-token statistics per N.

    Each test input is decoded ``samples`` times.  Returns ``precision`` and
    ``first_token`` mapping N -> empirical distribution over digits 0-9.
    """
    rng = np.random.default_rng(seed)
    digits = [inst.digits for inst in instances for _ in range(samples)]
    correct = 0
    first_counts = defaultdict(lambda: np.zeros(10))
    for sl in _batches(len(digits), batch_size):
        chunk = digits[sl]
        ids, lengths = pad_batch(chunk, policy.vocab.pad)
        roll = policy.rollout(ids, lengths, 3, mode, rng, fixed_length=True)
        for x, y in zip(chunk, roll.tokens):
            correct += counting_correct(x, y)
            if y[0] < 10:
                first_counts[len(x)][y[0]] += 1
    per_n = {}
    for n in sorted({len(d) for d in digits}):
        total = sum(len(x) == n for x in digits)
        per_n[n] = first_counts[n] / total
    return {"precision": correct / len(digits), "first_token": per_n, "num_samples": len(digits)}


def first_output_probabilities(policy: Seq2SeqPolicy, inputs: Sequence[Sequence[int]]) -> np.ndarray:
    """Model probability of each digit 0-9 as the first output, renormalised over digits."""
    ids, lengths = pad_batch(inputs, policy.vocab.pad)
    with ad.no_grad():
        h = policy.encode(ids, lengths)
        probs, _ = policy.step_probs(h, np.full(len(inputs), policy.vocab.bos))
    d = probs[:, :10]
    return d / d.sum(axis=1, keepdims=True)


def diversity_report(policy: Seq2SeqPolicy, instances: Sequence[CountingInstance],
                     empirical: dict[int, np.ndarray] | None = None) -> dict[int, dict]:
    """Per input length N: mean first-output distribution, its total-variation
    distance to the uniform ground truth, and the mean per-input variance."""
    by_n = defaultdict(list)
    for inst in instances:
        by_n[len(inst.digits)].append(list(inst.digits))
    report = {}
    for n in sorted(by_n):
        probs = first_output_probabilities(policy, by_n[n])
        mean = probs.mean(axis=0)
        truth = counting_truth_distribution(n)
        row = {
            "n_inputs": len(by_n[n]),
            "mean_distribution": mean.tolist(),
            "model_tv": total_variation(mean, truth),
            "variance": float(distribution_variance(probs).mean()),
            "truth_variance": float(distribution_variance(truth)),
        }
        if empirical is not None and n in empirical:
            row["empirical_distribution"] = empirical[n].tolist()
            row["empirical_tv"] = total_variation(empirical[n], truth)
        report[n] = row
    return report


def corpus_bleu(policy: Seq2SeqPolicy, sets: Sequence[ReferenceSet], samples: int = 10,
                seed: int = 0, max_len: int = 20, mode: str = "sample") -> float:
    """Mean unsmoothed sentence BLEU-2 of sampled responses against all references."""
    rng = np.random.default_rng(seed)
    vocab = policy.vocab
    srcs = [vocab.encode(s.source) for s in sets for _ in range(samples)]
    refs = [[vocab.encode(r) for r in s.references] for s in sets for _ in range(samples)]
    ids, lengths = pad_batch(srcs, vocab.pad)
    roll = policy.rollout(ids, lengths, max_len, mode, rng)
    outs = roll.sequences(strip_eos=vocab.eos)
    scores = [bleu2(o, r, smooth=False) if o else 0.0 for o, r in zip(outs, refs)]
    return float(np.mean(scores))
