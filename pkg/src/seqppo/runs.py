"""Pipelines behind the command line: data, pretraining, fine-tuning, evaluation."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .adversarial import Discriminator, SeqGAN, SeqGANConfig
from .config import ExperimentConfig
from .evaluation import corpus_bleu, counting_precision, diversity_report
from .policy import Seq2SeqPolicy, Vocab, mle_pretrain
from .rl import MixerConfig, PolicyTrainer, TrainerConfig
from .tasks import (CorpusEnv, CountingEnv, corpus_vocab, format_corpus, gen_counting_dataset,
                    load_corpus, parse_corpus, read_counting, toy_corpus_split)

log = logging.getLogger(__name__)


@dataclass
class TaskData:
    task: str
    vocab: Vocab
    env: object
    test: list  # CountingInstance or ReferenceSet


def load_task(cfg: ExperimentConfig) -> TaskData:
    if cfg.task == "counting":
        train = (read_counting(cfg.train_file) if cfg.train_file
                 else gen_counting_dataset(cfg.data_seed, cfg.train_size, cfg.max_n))
        test = (read_counting(cfg.test_file) if cfg.test_file
                else gen_counting_dataset(cfg.test_seed, cfg.test_size, cfg.max_n))
        env = CountingEnv(train)
        return TaskData("counting", env.vocab, env, test)
    if cfg.train_file:
        train_sets, _ = load_corpus(cfg.train_file)
        test_sets, _ = load_corpus(cfg.test_file) if cfg.test_file else ([], None)
    else:
        train_pairs, test_pairs = toy_corpus_split(cfg.data_seed)
        train_sets = parse_corpus(format_corpus(train_pairs), "toy-train")
        test_sets = parse_corpus(format_corpus(test_pairs), "toy-test")
    vocab = corpus_vocab(list(train_sets) + list(test_sets))
    return TaskData("corpus", vocab, CorpusEnv(train_sets, vocab, cfg.max_len), test_sets)


def check_vocab(policy: Seq2SeqPolicy, data: TaskData) -> None:
    if policy.vocab != data.vocab:
        raise ValueError(f"checkpoint vocabulary ({len(policy.vocab)} tokens) does not match "
                         f"the {data.task} task ({len(data.vocab)} tokens)")


# --- pretraining ------------------------------------------------------------------------------

def pretrain(cfg: ExperimentConfig, data: TaskData,
             callback: Callable[[int, float], None] | None = None) -> tuple[Seq2SeqPolicy, list[float]]:
    policy = Seq2SeqPolicy(data.vocab, hidden=cfg.hidden, seed=cfg.model_seed)
    curve = mle_pretrain(policy, data.env.mle_pairs(), cfg.mle_epochs, lr=cfg.mle_lr,
                         batch_size=cfg.mle_batch_size, seed=cfg.seed,
                         append_eos=data.task == "corpus", callback=callback)
    return policy, curve


# --- evaluation -------------------------------------------------------------------------------

def evaluate(cfg: ExperimentConfig, policy: Seq2SeqPolicy, data: TaskData, seed: int = 0) -> dict:
    check_vocab(policy, data)
    if data.task == "counting":
        prec = counting_precision(policy, data.test, samples=cfg.eval_samples, seed=seed)
        per_n = diversity_report(policy, data.test, prec["first_token"])
        return {"task": "counting", "precision": prec["precision"],
                "num_samples": prec["num_samples"], "per_length": per_n}
    bleu = corpus_bleu(policy, data.test, samples=cfg.eval_samples, seed=seed, max_len=cfg.max_len)
    return {"task": "corpus", "bleu2": bleu, "num_inputs": len(data.test)}


def quick_score(cfg: ExperimentConfig, policy: Seq2SeqPolicy, data: TaskData) -> dict:
    """The headline number only (precision or BLEU-2), for periodic logging."""
    if data.task == "counting":
        return {"precision": counting_precision(policy, data.test, cfg.eval_samples)["precision"]}
    return {"bleu2": corpus_bleu(policy, data.test, cfg.eval_samples, max_len=cfg.max_len)}


def write_report(report: dict, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    js, cs = out / "report.json", out / "report.csv"
    js.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with cs.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if report["task"] == "counting":
            w.writerow(["length", "empirical_tv", "model_tv", "variance", "truth_variance", "precision"])
            for n, row in sorted(report["per_length"].items(), key=lambda kv: int(kv[0])):
                w.writerow([n, row.get("empirical_tv", ""), row["model_tv"], row["variance"],
                            row["truth_variance"], report["precision"]])
        else:
            w.writerow(["metric", "value"])
            w.writerow(["bleu2", report["bleu2"]])
    return js, cs


# --- fine-tuning ------------------------------------------------------------------------------

def run_label(cfg: ExperimentConfig) -> str:
    if cfg.algorithm in ("mixer", "seqgan"):
        return f"{cfg.algorithm}+{cfg.optimizer}"
    return cfg.algorithm


def build_trainer(cfg: ExperimentConfig, policy: Seq2SeqPolicy, data: TaskData) -> PolicyTrainer:
    mixer = None
    if cfg.algorithm == "mixer":
        mixer = MixerConfig(total_len=data.env.max_len, anneal_epochs=cfg.mixer_anneal_epochs,
                            iters_per_epoch=cfg.mixer_iters_per_epoch)
    tcfg = TrainerConfig(algorithm=cfg.policy_algorithm, lr=cfg.lr, batch_size=cfg.batch_size,
                         ppo_epochs=cfg.ppo_epochs, gamma=cfg.gamma,
                         normalize_advantages=cfg.normalize_advantages,
                         baseline_hidden=cfg.baseline_hidden, baseline_lr=cfg.baseline_lr,
                         clip=cfg.resolved_clip(), mixer=mixer, seed=cfg.seed)
    return PolicyTrainer(policy, data.env, tcfg)


def fine_tune(cfg: ExperimentConfig, policy: Seq2SeqPolicy, data: TaskData,
              metrics_path: str | Path | None = None, checkpoint_dir: str | Path | None = None,
              on_metrics: Callable[[dict], None] | None = None) -> list[dict]:
    """Runs ``cfg.iterations`` policy-optimisation iterations in place on ``policy``.

    Every iteration appends one JSON line to ``metrics_path``.  Precision or
    BLEU is added every ``eval_every`` iterations (never when 0).
    """
    check_vocab(policy, data)
    trainer = build_trainer(cfg, policy, data)
    gan = None
    if cfg.algorithm == "seqgan":
        disc = Discriminator(data.vocab, hidden=cfg.disc_hidden, lr=cfg.disc_lr, seed=cfg.seed)
        gan = SeqGAN(trainer, disc, SeqGANConfig(cfg.d_steps, cfg.g_steps, cfg.disc_pretrain_steps))
        if cfg.iterations > 0:
            gan.pretrain_discriminator()
    label = run_label(cfg)
    fh = None
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(metrics_path, "w", encoding="utf-8")
    history = []
    try:
        for it in range(1, cfg.iterations + 1):
            m = gan.iteration() if gan is not None else trainer.iteration()
            m = {"task": cfg.task, "algorithm": label, **m}
            if cfg.eval_every and it % cfg.eval_every == 0:
                m.update(quick_score(cfg, policy, data))
            history.append(m)
            if fh is not None:
                fh.write(json.dumps(m, sort_keys=True) + "\n")
                fh.flush()
            if on_metrics is not None:
                on_metrics(m)
            if checkpoint_dir is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                save_checkpoint(policy, Path(checkpoint_dir) / f"iter_{it:06d}.json", cfg, it)
    finally:
        if fh is not None:
            fh.close()
    return history


def save_checkpoint(policy: Seq2SeqPolicy, path: Path, cfg: ExperimentConfig, iteration: int) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    policy.save(path, {"task": cfg.task, "algorithm": run_label(cfg), "iteration": iteration})


# --- learning curves --------------------------------------------------------------------------

CURVE_FIELDS = ("mean_reward", "precision", "bleu2")


def read_metrics(path: str | Path) -> list[dict]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if line.strip():
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: not JSON ({e.msg})") from None
    if not rows:
        raise ValueError(f"{path}: empty metrics stream")
    return rows


def merge_curves(streams: dict[str, list[dict]], field: str = "mean_reward") -> tuple[list[str], list[list]]:
    """Iteration-indexed table with one column per run; gaps stay empty."""
    tasks = {r.get("task") for rows in streams.values() for r in rows}
    if len(tasks) > 1:
        raise ValueError(f"metrics streams come from different tasks: {sorted(map(str, tasks))}")
    by_run = {name: {r["iteration"]: r[field] for r in rows if field in r}
              for name, rows in streams.items()}
    iterations = sorted({i for col in by_run.values() for i in col})
    header = ["iteration"] + list(streams)
    table = [[i] + [by_run[name].get(i, "") for name in streams] for i in iterations]
    return header, table


def iterations_to_fraction(values: list[float], fraction: float = 0.9) -> int:
    """1-based index of the first value reaching ``fraction`` of the final value."""
    target = fraction * values[-1]
    for i, v in enumerate(values, start=1):
        if v >= target:
            return i
    return len(values)


def smooth(values, window: int) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.concatenate([[0.0], v]))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)
