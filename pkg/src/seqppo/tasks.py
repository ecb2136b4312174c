"""Counting task, one-to-many corpora, BLEU-2 and reward assignment."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .policy import Vocab, pad_batch

REWARD_KINDS = ("counting_correctness", "bleu2", "discriminator")
BLEU_SMOOTH_EPS = 1e-9


# --- Counting -------------------------------------------------------------------------------

@dataclass(frozen=True)
class CountingInstance:
    digits: tuple[int, ...]
    position: int  # 1-based t
    output: tuple[int, int, int]

    def __post_init__(self):
        n, t = len(self.digits), self.position
        if not 1 <= t <= n:
            raise ValueError(f"position {t} outside 1..{n}")
        if self.output != (t - 1, self.digits[t - 1], n - t):
            raise ValueError("reference output violates y1=t-1, y2=x_t, y3=N-t")


def counting_instance(digits: Sequence[int], position: int) -> CountingInstance:
    d = tuple(int(x) for x in digits)
    return CountingInstance(d, position, (position - 1, d[position - 1], len(d) - position))


def gen_counting_instance(rng: np.random.Generator, max_n: int = 10) -> CountingInstance:
    if not 1 <= max_n <= 10:
        raise ValueError("max_n must be in [1, 10]")
    n = int(rng.integers(1, max_n + 1))
    digits = rng.integers(0, 10, size=n)
    t = int(rng.integers(1, n + 1))
    return counting_instance(digits, t)


def gen_counting_dataset(seed: int, size: int, max_n: int = 10) -> list[CountingInstance]:
    rng = np.random.default_rng(seed)
    return [gen_counting_instance(rng, max_n) for _ in range(size)]


def counting_correct(digits: Sequence[int], output: Sequence[int]) -> bool:
    """True iff ``output`` is one of the valid answers for ``digits``.

    The first token fixes the position (t = y1 + 1), which then fixes the
    other two tokens.
    """
    if len(output) != 3:
        return False
    n = len(digits)
    y1, y2, y3 = (int(v) for v in output)
    t = y1 + 1
    if not 1 <= t <= n:
        return False
    return y2 == int(digits[t - 1]) and y3 == n - t


def counting_truth_distribution(n: int) -> np.ndarray:
    """Distribution of the first output token (over digits 0-9) for inputs of length n."""
    if not 1 <= n <= 10:
        raise ValueError("n must be in [1, 10]")
    dist = np.zeros(10)
    dist[:n] = 1.0 / n
    return dist


def distribution_variance(probs: np.ndarray) -> np.ndarray:
    """Variance of the entries of each probability vector (last axis).

    A sharp distribution over 10 digits has variance near 0.09; a uniform one 0.
    """
    return np.var(np.asarray(probs, dtype=np.float64), axis=-1)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


# --- BLEU-2 --------------------------------------------------------------------------------

def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu2(candidate: Sequence, references: Sequence[Sequence], smooth: bool = True) -> float:
    """Sentence BLEU with uniform weights over 1- and 2-grams.

    Modified precision clips each candidate n-gram count by its maximum count
    in any single reference.  The brevity penalty uses the reference length
    closest to the candidate's (shorter wins ties).  With ``smooth``, a zero
    match count is replaced by 1e-9 so the score never collapses to exactly 0.
    """
    if len(candidate) == 0:
        raise ValueError("bleu2 needs a non-empty candidate")
    if len(references) == 0:
        raise ValueError("bleu2 needs at least one reference")
    log_p = 0.0
    for n in (1, 2):
        cand = _ngrams(candidate, n)
        max_ref: Counter = Counter()
        for ref in references:
            for ng, c in _ngrams(ref, n).items():
                if c > max_ref[ng]:
                    max_ref[ng] = c
        matched = sum(min(c, max_ref[ng]) for ng, c in cand.items())
        total = max(sum(cand.values()), 1)
        if matched == 0:
            if not smooth:
                return 0.0
            matched = BLEU_SMOOTH_EPS
        log_p += 0.5 * math.log(matched / total)
    c = len(candidate)
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    bp = math.exp(min(0.0, 1.0 - r / c))
    return bp * math.exp(log_p)


# --- one-to-many corpora ---------------------------------------------------------------------

@dataclass
class ReferenceSet:
    source: tuple[str, ...]
    references: list[tuple[str, ...]]

    def __post_init__(self):
        if not self.references:
            raise ValueError("a reference set needs at least one reference")


class CorpusFormatError(ValueError):
    pass


def parse_corpus(text: str, name: str = "<corpus>") -> list[ReferenceSet]:
    """Parse ``input<TAB>response`` lines, grouping responses by exact input string."""
    groups: dict[str, ReferenceSet] = {}
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].split() or not parts[1].split():
            raise CorpusFormatError(f"{name}:{lineno}: expected 'input<TAB>response'")
        src, resp = parts
        key = " ".join(src.split())
        entry = groups.get(key)
        if entry is None:
            groups[key] = ReferenceSet(tuple(src.split()), [tuple(resp.split())])
        else:
            entry.references.append(tuple(resp.split()))
    if not groups:
        raise CorpusFormatError(f"{name}: corpus is empty")
    return list(groups.values())


def corpus_vocab(sets: Sequence[ReferenceSet]) -> Vocab:
    words = set()
    for s in sets:
        words.update(s.source)
        for r in s.references:
            words.update(r)
    return Vocab.from_words(words)


def load_corpus(path: str | Path) -> tuple[list[ReferenceSet], Vocab]:
    sets = parse_corpus(Path(path).read_text(encoding="utf-8"), str(path))
    return sets, corpus_vocab(sets)


def format_corpus(pairs: Sequence[tuple[Sequence[str], Sequence[str]]]) -> str:
    return "".join(f"{' '.join(src)}\t{' '.join(resp)}\n" for src, resp in pairs)


def write_corpus(path: str | Path, pairs: Sequence[tuple[Sequence[str], Sequence[str]]]) -> None:
    Path(path).write_text(format_corpus(pairs), encoding="utf-8", newline="\n")


def reference_pairs(sets: Sequence[ReferenceSet]) -> list[tuple[tuple[str, ...], tuple[str, ...]]]:
    return [(s.source, r) for s in sets for r in s.references]


def counting_pairs(instances: Sequence[CountingInstance]) -> list[tuple[list[str], list[str]]]:
    return [([str(d) for d in inst.digits], [str(d) for d in inst.output]) for inst in instances]


def write_counting(path: str | Path, instances: Sequence[CountingInstance]) -> None:
    write_corpus(path, counting_pairs(instances))


def read_counting(path: str | Path) -> list[CountingInstance]:
    """Counting instances from ``digits<TAB>output`` lines, one per line, order kept."""
    out = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        try:
            src, resp = line.split("\t")
            digits = [int(d) for d in src.split()]
            output = tuple(int(d) for d in resp.split())
            inst = counting_instance(digits, output[0] + 1)
            if inst.output != output:
                raise ValueError("output is not a valid answer")
        except (ValueError, IndexError) as e:
            raise CorpusFormatError(f"{path}:{lineno}: bad counting line ({e})") from None
        out.append(inst)
    if not out:
        raise CorpusFormatError(f"{path}: no counting instances")
    return out


# Toy one-to-many "chat" corpus: inputs are subject-verb-object statements, each
# answered by 2-5 responses drawn from templates that reuse the input's words.
_SUBJECTS = {"i": "you", "you": "i", "we": "you", "they": "they"}
_VERBS = ["like", "want", "need", "see", "miss"]
_OBJECTS = ["tea", "coffee", "cake", "music", "rain", "books", "snow", "games"]
_TEMPLATES = [
    "{o} is nice",
    "{r} {v} {o} too",
    "why do {r} {v} {o}",
    "me too",
    "not {o} again",
    "what about the {o}",
    "{r} do not {v} {o}",
    "so do we",
    "the {o} is good",
    "really ?",
]


def toy_corpus_pairs(seed: int) -> list[tuple[list[str], list[str]]]:
    """All toy inputs with their 2-5 responses, in a deterministic order."""
    rng = np.random.default_rng(seed)
    pairs = []
    for s, r in _SUBJECTS.items():
        for v in _VERBS:
            for o in _OBJECTS:
                k = int(rng.integers(2, 6))
                chosen = sorted(rng.choice(len(_TEMPLATES), size=k, replace=False))
                src = [s, v, o]
                for j in chosen:
                    pairs.append((src, _TEMPLATES[j].format(r=r, v=v, o=o).split()))
    return pairs


def toy_corpus_split(seed: int, test_fraction: float = 0.2):
    """Split toy pairs by input so that test inputs are unseen in training."""
    pairs = toy_corpus_pairs(seed)
    sources = sorted({tuple(p[0]) for p in pairs})
    rng = np.random.default_rng(seed + 1)
    test_src = set(map(tuple, rng.permutation(np.array(sources, dtype=object))[:int(len(sources) * test_fraction)]))
    train = [p for p in pairs if tuple(p[0]) not in test_src]
    test = [p for p in pairs if tuple(p[0]) in test_src]
    return train, test


# --- rewards -------------------------------------------------------------------------------------

@dataclass(frozen=True)
class RewardSpec:
    kind: str = "counting_correctness"
    gamma: float = 1.0

    def __post_init__(self):
        if self.kind not in REWARD_KINDS:
            raise ValueError(f"unknown reward kind {self.kind!r}; choose from {REWARD_KINDS}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


def sequence_rewards(spec: RewardSpec, outputs: Sequence[Sequence[int]], *,
                     inputs: Sequence[Sequence[int]] | None = None,
                     references: Sequence[Sequence[Sequence[int]]] | None = None,
                     scores: Sequence[float] | None = None) -> np.ndarray:
    """Sequence-level task reward for each output (EOS already stripped)."""
    if spec.kind == "counting_correctness":
        if inputs is None:
            raise ValueError("counting reward needs the inputs")
        return np.array([float(counting_correct(x, y)) for x, y in zip(inputs, outputs)])
    if spec.kind == "bleu2":
        if references is None:
            raise ValueError("bleu2 reward needs references")
        return np.array([bleu2(y, refs) if len(y) else 0.0 for y, refs in zip(outputs, references)])
    if scores is None:
        raise ValueError("discriminator reward needs scores")
    return np.asarray(scores, dtype=np.float64)


def assign_rewards(terminal: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Place each sequence reward on its last valid step; all other steps get 0."""
    mask = np.asarray(mask)
    rewards = np.zeros(mask.shape)
    last = mask.sum(axis=1).astype(int) - 1
    rows = np.nonzero(last >= 0)[0]
    rewards[rows, last[rows]] = np.asarray(terminal)[rows]
    return rewards


# --- environments ---------------------------------------------------------------------------------

class CountingEnv:
    """Counting as an RL environment: fixed 3-token outputs, 0/1 correctness reward."""

    max_len = 3
    fixed_length = True
    eos_strip = None
    reward_spec = RewardSpec("counting_correctness")

    def __init__(self, instances: Sequence[CountingInstance]):
        if not instances:
            raise ValueError("no counting instances")
        self.instances = list(instances)
        self.vocab = Vocab.counting()

    def mle_pairs(self) -> list[tuple[list[int], list[int]]]:
        return [(list(i.digits), list(i.output)) for i in self.instances]

    def sample_inputs(self, rng: np.random.Generator, n: int):
        picked = [self.instances[i] for i in rng.integers(0, len(self.instances), size=n)]
        inputs, lengths = pad_batch([p.digits for p in picked], self.vocab.pad)
        prefix = np.array([p.output for p in picked], dtype=np.int64)
        return inputs, lengths, picked, prefix

    def reward(self, inputs, outputs, ctx=None) -> np.ndarray:
        return sequence_rewards(self.reward_spec, outputs, inputs=inputs)

    def real_outputs(self, rng: np.random.Generator, ctx) -> list[list[int]]:
        return [list(inst.output) for inst in ctx]


class CorpusEnv:
    """One-to-many corpus environment with a smoothed BLEU-2 terminal reward."""

    fixed_length = False
    reward_spec = RewardSpec("bleu2")

    def __init__(self, sets: Sequence[ReferenceSet], vocab: Vocab, max_len: int = 20):
        if not sets:
            raise ValueError("empty corpus")
        self.sets = list(sets)
        self.vocab = vocab
        self.max_len = max_len
        self.eos_strip = vocab.eos
        self.encoded = [(vocab.encode(s.source), [vocab.encode(r) for r in s.references])
                        for s in self.sets]

    def mle_pairs(self) -> list[tuple[list[int], list[int]]]:
        return [(src, ref) for src, refs in self.encoded for ref in refs]

    def sample_inputs(self, rng: np.random.Generator, n: int):
        picked = [self.encoded[i] for i in rng.integers(0, len(self.encoded), size=n)]
        inputs, lengths = pad_batch([p[0] for p in picked], self.vocab.pad)
        prefix = np.full((n, self.max_len), self.vocab.pad, dtype=np.int64)
        for row, (_, refs) in enumerate(picked):
            ref = (refs[int(rng.integers(len(refs)))] + [self.vocab.eos])[:self.max_len]
            prefix[row, :len(ref)] = ref
        return inputs, lengths, [p[1] for p in picked], prefix

    def reward(self, inputs, outputs, ctx) -> np.ndarray:
        return sequence_rewards(self.reward_spec, outputs, references=ctx)

    def real_outputs(self, rng: np.random.Generator, ctx) -> list[list[int]]:
        return [list(refs[int(rng.integers(len(refs)))]) for refs in ctx]
