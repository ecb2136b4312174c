"""GRU encoder-decoder policy: sampling, scoring and maximum-likelihood pretraining."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"


class Vocab:
    """Token <-> id bijection with reserved PAD/BOS/EOS entries."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        for special in (PAD, BOS, EOS):
            if special not in self.tokens:
                raise ValueError(f"vocabulary lacks reserved token {special}")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.pad = self.index[PAD]
        self.bos = self.index[BOS]
        self.eos = self.index[EOS]

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def encode(self, words: Sequence[str]) -> list[int]:
        try:
            return [self.index[w] for w in words]
        except KeyError as e:
            raise KeyError(f"unknown token {e.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @classmethod
    def counting(cls) -> "Vocab":
        # digit d has id d
        return cls([str(d) for d in range(10)] + [PAD, BOS, EOS])

    @classmethod
    def from_words(cls, words) -> "Vocab":
        return cls([PAD, BOS, EOS] + sorted(set(words) - {PAD, BOS, EOS}))

    def to_json(self) -> str:
        return json.dumps(self.tokens)

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        return cls(json.loads(text))


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad integer sequences; returns (ids[B, T], lengths[B])."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), max(lengths.max(initial=0), 1)), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, lengths


def init_uniform(shapes: dict[str, tuple[int, ...]], rng: np.random.Generator,
                 scale: float = 0.08) -> dict[str, Tensor]:
    return {name: Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True, name=name)
            for name, shape in shapes.items()}


def gru_shapes(prefix: str, d_in: int, d: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.W": (d_in, 3 * d),   # input -> (update, reset, candidate)
        f"{prefix}.U_zr": (d, 2 * d),
        f"{prefix}.U_n": (d, d),
        f"{prefix}.b": (3 * d,),
    }


def gru_cell(params: dict[str, Tensor], prefix: str, x: Tensor, h: Tensor) -> Tensor:
    """One GRU step (Cho et al. gating).

    z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br),
    n = tanh(x Wn + (r * h) Un + bn), h' = (1 - z) * h + z * n.
    """
    d = h.shape[1]
    xw = ad.matmul(x, params[f"{prefix}.W"]) + params[f"{prefix}.b"]
    zr = ad.sigmoid(ad.slice_cols(xw, 0, 2 * d) + ad.matmul(h, params[f"{prefix}.U_zr"]))
    z = ad.slice_cols(zr, 0, d)
    r = ad.slice_cols(zr, d, 2 * d)
    n = ad.tanh(ad.slice_cols(xw, 2 * d, 3 * d) + ad.matmul(r * h, params[f"{prefix}.U_n"]))
    return h + z * (n - h)


def _masked_update(h: Tensor, h_new: Tensor, active: np.ndarray) -> Tensor:
    if active.all():
        return h_new
    return h + ad.mul(h_new - h, active[:, None].astype(np.float64))


@dataclass
class Rollout:
    """Decoded batch: tokens, per-step log-probs and decoder states.

    ``mask[i, t]`` is 1 for steps that belong to sequence ``i`` (up to and
    including EOS).  ``states`` are the decoder hidden states from which each
    token was drawn, kept for the value baseline.
    """
    tokens: np.ndarray
    logp: np.ndarray
    mask: np.ndarray
    states: np.ndarray

    def sequences(self, strip_eos: int | None = None) -> list[list[int]]:
        out = []
        for row, m in zip(self.tokens, self.mask):
            seq = [int(t) for t, keep in zip(row, m) if keep]
            if strip_eos is not None and seq and seq[-1] == strip_eos:
                seq = seq[:-1]
            out.append(seq)
        return out


class Seq2SeqPolicy:
    """Stochastic policy pi(y_t | x, y_<t) built from a GRU encoder and decoder.

    The decoder starts from the encoder's final state and is fed BOS first.
    ``fixed_length`` decoding (Counting) emits exactly ``max_len`` tokens; otherwise
    decoding stops per-row at EOS.
    """

    def __init__(self, vocab: Vocab, hidden: int = 128, seed: int = 42,
                 params: dict[str, Tensor] | None = None):
        self.vocab = vocab
        self.hidden = hidden
        if params is None:
            v, d = len(vocab), hidden
            shapes = {"embedding": (v, d)}
            shapes.update(gru_shapes("enc", d, d))
            shapes.update(gru_shapes("dec", d, d))
            shapes.update({"out.W": (d, v), "out.b": (v,)})
            params = init_uniform(shapes, np.random.default_rng(seed))
        self.params = params

    # -- snapshots / persistence ------------------------------------------------------

    def snapshot(self) -> "Seq2SeqPolicy":
        """Frozen deep copy (the old policy of a PPO iteration)."""
        frozen = {k: Tensor(p.data.copy(), requires_grad=False, name=k) for k, p in self.params.items()}
        return Seq2SeqPolicy(self.vocab, self.hidden, params=frozen)

    def clone(self) -> "Seq2SeqPolicy":
        return Seq2SeqPolicy(self.vocab, self.hidden,
                             params={k: Tensor(p.data.copy(), True, k) for k, p in self.params.items()})

    def load_state(self, other: "Seq2SeqPolicy") -> None:
        for k, p in self.params.items():
            p.data = other.params[k].data.copy()

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        info = {"hidden": self.hidden, "vocab": self.vocab.tokens}
        info.update(copy.deepcopy(meta or {}))
        ad.save_params(path, self.params, info)

    @classmethod
    def load(cls, path: str | Path) -> tuple["Seq2SeqPolicy", dict]:
        params, meta = ad.load_params(path)
        return cls(Vocab(meta["vocab"]), int(meta["hidden"]), params=params), meta

    # -- forward pieces ------------------------------------------------------------------

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= len(self.vocab)):
            raise ValueError(f"token id out of vocabulary range [0, {len(self.vocab)})")

    def encode(self, inputs: np.ndarray, lengths: np.ndarray | None = None) -> Tensor:
        """Final encoder state for a padded batch ``inputs[B, T]``."""
        inputs = np.atleast_2d(np.asarray(inputs, dtype=np.int64))
        self._check_ids(inputs)
        if lengths is None:
            lengths = np.full(inputs.shape[0], inputs.shape[1])
        if np.any(lengths < 1):
            raise ValueError("input sequences must have length >= 1")
        p = self.params
        h = Tensor(np.zeros((inputs.shape[0], self.hidden)))
        for t in range(int(lengths.max())):
            x = ad.gather_rows(p["embedding"], inputs[:, t])
            h = _masked_update(h, gru_cell(p, "enc", x, h), lengths > t)
        return h

    def decode_step(self, h: Tensor, prev: np.ndarray,
                    active: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """Returns (log-probabilities[B, V], next hidden state)."""
        prev = np.asarray(prev, dtype=np.int64)
        self._check_ids(prev)
        p = self.params
        x = ad.gather_rows(p["embedding"], prev)
        h_new = gru_cell(p, "dec", x, h)
        if active is not None:
            h_new = _masked_update(h, h_new, active)
        logits = ad.matmul(h_new, p["out.W"]) + p["out.b"]
        return ad.log_softmax(logits), h_new

    def step_probs(self, h: Tensor, prev: np.ndarray) -> tuple[np.ndarray, Tensor]:
        logp, h_new = self.decode_step(h, prev)
        return np.exp(logp.data), h_new

    # -- decoding ---------------------------------------------------------------------------

    def rollout(self, inputs: np.ndarray, lengths: np.ndarray, max_len: int,
                mode: str = "sample", rng: np.random.Generator | None = None,
                fixed_length: bool = False, prefix: np.ndarray | None = None) -> Rollout:
        """Decode a batch without recording gradients.

        ``prefix[B, k]`` forces the first ``k`` tokens (teacher forcing, used by
        MIXER); their log-probs are still recorded.  Greedy ties go to the
        lowest token id.
        """
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        if mode not in ("sample", "greedy"):
            raise ValueError(f"unknown decoding mode {mode!r}")
        if mode == "sample" and rng is None:
            raise ValueError("sampling needs an rng")
        B = len(inputs)
        k = 0 if prefix is None else prefix.shape[1]
        tokens = np.full((B, max_len), self.vocab.pad, dtype=np.int64)
        logp = np.zeros((B, max_len))
        mask = np.zeros((B, max_len))
        states = np.zeros((B, max_len, self.hidden))
        with ad.no_grad():
            h = self.encode(inputs, lengths)
            prev = np.full(B, self.vocab.bos, dtype=np.int64)
            active = np.ones(B, dtype=bool)
            for t in range(max_len):
                lp, h = self.decode_step(h, prev, None if t == 0 else active)
                if t < k:
                    choice = prefix[:, t]
                elif mode == "greedy":
                    choice = lp.data.argmax(axis=1)
                else:
                    choice = sample_categorical(np.exp(lp.data), rng)
                choice = np.where(active, choice, self.vocab.pad)
                tokens[:, t] = choice
                logp[:, t] = np.where(active, lp.data[np.arange(B), choice], 0.0)
                mask[:, t] = active
                states[:, t] = h.data
                if not fixed_length:
                    active = active & (choice != self.vocab.eos)
                    if not active.any():
                        break
                prev = choice
        return Rollout(tokens, logp, mask, states)

    def sample_sequence(self, tokens: Sequence[int], max_len: int, mode: str = "sample",
                        rng: np.random.Generator | None = None,
                        fixed_length: bool = False) -> tuple[list[int], list[float]]:
        """Single-input convenience wrapper: returns (output ids, per-step log-probs)."""
        ids, lengths = pad_batch([list(tokens)], self.vocab.pad)
        r = self.rollout(ids, lengths, max_len, mode, rng, fixed_length)
        m = r.mask[0].astype(bool)
        return r.tokens[0][m].tolist(), r.logp[0][m].tolist()

    # -- scoring --------------------------------------------------------------------------------

    def sequence_log_probs(self, inputs: np.ndarray, lengths: np.ndarray,
                           outputs: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
        """Teacher-forced log pi(y_t | x, y_<t) as a differentiable [B, M] tensor.

        Uses the same step computation as :meth:`rollout`, so on an identical
        batch the values match the recorded log-probs bit for bit.  Masked
        steps hold 0.
        """
        outputs = np.atleast_2d(np.asarray(outputs, dtype=np.int64))
        if outputs.shape[1] < 1:
            raise ValueError("output sequence must be non-empty")
        self._check_ids(outputs)
        B, M = outputs.shape
        if mask is None:
            mask = np.ones((B, M))
        h = self.encode(inputs, lengths)
        prev = np.full(B, self.vocab.bos, dtype=np.int64)
        cols = []
        for t in range(M):
            lp, h = self.decode_step(h, prev, None if t == 0 else mask[:, t].astype(bool))
            cols.append(ad.pick(lp, outputs[:, t]))
            prev = outputs[:, t]
        return ad.mul(ad.stack_cols(cols), mask)


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of ``probs`` by inverse CDF."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])[:, None] * cdf[:, -1:]
    return np.minimum((cdf <= u).sum(axis=1), probs.shape[1] - 1)


def mle_loss(policy: Seq2SeqPolicy, inputs: np.ndarray, lengths: np.ndarray,
             outputs: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean per-token negative log-likelihood under teacher forcing."""
    lp = policy.sequence_log_probs(inputs, lengths, outputs, mask)
    return ad.scale(ad.reduce_sum(lp), -1.0 / mask.sum())


def make_targets(outputs: Sequence[Sequence[int]], pad: int,
                 eos: int | None) -> tuple[np.ndarray, np.ndarray]:
    """Pad target sequences, optionally appending EOS; returns (ids, mask)."""
    seqs = [list(o) + ([eos] if eos is not None else []) for o in outputs]
    ids, lengths = pad_batch(seqs, pad)
    mask = (np.arange(ids.shape[1])[None, :] < lengths[:, None]).astype(np.float64)
    return ids, mask


def mle_pretrain(policy: Seq2SeqPolicy, dataset: Sequence[tuple[Sequence[int], Sequence[int]]],
                 epochs: int, lr: float = 1e-3, batch_size: int = 64, seed: int = 0,
                 append_eos: bool = False, optimizer: ad.Adam | None = None,
                 callback=None) -> list[float]:
    """Teacher-forced cross-entropy training; returns the mean loss of each epoch."""
    if not dataset:
        raise ValueError("cannot pretrain on an empty dataset")
    rng = np.random.default_rng(seed)
    opt = optimizer or ad.Adam(policy.params, lr=lr)
    eos = policy.vocab.eos if append_eos else None
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            batch = [dataset[i] for i in order[start:start + batch_size]]
            inputs, lengths = pad_batch([b[0] for b in batch], policy.vocab.pad)
            outputs, mask = make_targets([b[1] for b in batch], policy.vocab.pad, eos)
            opt.zero_grad()
            with ad.Tape() as tape:
                loss = mle_loss(policy, inputs, lengths, outputs, mask)
            tape.backward(loss)
            opt.step()
            total += loss.item() * len(batch)
            count += len(batch)
        curve.append(total / count)
        log.info("mle epoch %d loss %.4f", epoch, curve[-1])
        if callback is not None:
            callback(epoch, curve[-1])
    return curve
