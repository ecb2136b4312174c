"""Command line: ``seqppo {generate,pretrain,train,eval,curves,verify-kl}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import typing
from dataclasses import fields
from pathlib import Path

from . import runs
from .config import ConfigError, ExperimentConfig
from .policy import Seq2SeqPolicy
from .rl import kl_verification_table
from .tasks import gen_counting_dataset, toy_corpus_split, write_corpus, write_counting

log = logging.getLogger("seqppo")

OUT_DIR_ENV = "SEQPPO_OUT_DIR"
CLIP_FLAGS = ("epsilon", "alpha1", "alpha2", "beta1", "beta2")


class CliError(Exception):
    pass


# --- config flags --------------------------------------------------------------------------

def add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML experiment config; flags override its values")
    hints = typing.get_type_hints(ExperimentConfig)
    for f in fields(ExperimentConfig):
        if f.name == "clip":
            continue
        tp = hints[f.name]
        flag = "--" + f.name.replace("_", "-")
        if tp is bool:
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            base = next((t for t in typing.get_args(tp) if t is not type(None)), tp)
            p.add_argument(flag, dest=f.name, type=base, default=None)
    for name in CLIP_FLAGS:
        p.add_argument(f"--{name}", type=float, default=None, help="clip setting")


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    data = {}
    if args.config:
        data = ExperimentConfig.load(args.config).to_dict()
    for f in fields(ExperimentConfig):
        v = getattr(args, f.name, None)
        if f.name != "clip" and v is not None:
            data[f.name] = v
    clip_over = {k: getattr(args, k) for k in CLIP_FLAGS if getattr(args, k, None) is not None}
    if clip_over:
        base = ExperimentConfig.from_dict(data).resolved_clip().to_dict()
        base.update(clip_over)
        data["clip"] = base
    cfg = ExperimentConfig.from_dict(data)
    if os.environ.get(OUT_DIR_ENV):
        cfg.out_dir = os.environ[OUT_DIR_ENV]
    return cfg


def _prepare_out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    return out


# --- commands ----------------------------------------------------------------------------------

def cmd_generate(args) -> None:
    if args.task == "counting":
        if args.size is None or args.size < 1:
            raise CliError("counting generation needs --size >= 1")
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_counting(out, gen_counting_dataset(args.seed, args.size, args.max_n))
        print(f"wrote {args.size} counting instances to {out}")
        return
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test = toy_corpus_split(args.seed)
    write_corpus(out / "train.tsv", train)
    write_corpus(out / "test.tsv", test)
    print(f"wrote {len(train)} training and {len(test)} test pairs to {out}")


def cmd_pretrain(args) -> None:
    cfg = config_from_args(args)
    out = _prepare_out(cfg)
    data = runs.load_task(cfg)
    with open(out / "mle_curve.jsonl", "w", encoding="utf-8") as fh:
        def record(epoch, loss):
            fh.write(json.dumps({"epoch": epoch + 1, "loss": loss}) + "\n")
            fh.flush()
            log.info("epoch %d  loss %.4f", epoch + 1, loss)
        policy, _ = runs.pretrain(cfg, data, callback=record)
    ck = out / "pretrained.json"
    policy.save(ck, {"task": cfg.task, "algorithm": "mle", "epochs": cfg.mle_epochs})
    print(f"saved {ck}")


def cmd_train(args) -> None:
    cfg = config_from_args(args)
    if cfg.algorithm == "mle":
        cmd_pretrain(args)
        return
    if not cfg.pretrained:
        raise CliError(f"{cfg.algorithm} fine-tuning needs --pretrained CHECKPOINT (run `seqppo pretrain` first)")
    if not Path(cfg.pretrained).is_file():
        raise CliError(f"pretrained checkpoint not found: {cfg.pretrained}")
    out = _prepare_out(cfg)
    data = runs.load_task(cfg)
    policy, _ = Seq2SeqPolicy.load(cfg.pretrained)

    def show(m):
        if m["iteration"] % 10 == 0:
            extra = "".join(f"  {k} {m[k]:.4f}" for k in ("precision", "bleu2") if k in m)
            log.info("iter %d  reward %.4f  ratio %.4f  clip %.3f%s", m["iteration"], m["mean_reward"],
                     m["mean_ratio"], m["clip_fraction"], extra)

    runs.fine_tune(cfg, policy, data, out / "metrics.jsonl", out / "checkpoints", on_metrics=show)
    final = out / "final.json"
    runs.save_checkpoint(policy, final, cfg, cfg.iterations)
    print(f"saved {final}")


def cmd_eval(args) -> None:
    cfg = config_from_args(args)
    data = runs.load_task(cfg)
    policy, _ = Seq2SeqPolicy.load(args.checkpoint)
    try:
        report = runs.evaluate(cfg, policy, data, seed=cfg.seed)
    except ValueError as e:
        raise CliError(str(e)) from None
    report["checkpoint"] = str(args.checkpoint)
    js, cs = runs.write_report(report, cfg.out_dir)
    headline = f"precision {report['precision']:.4f}" if "precision" in report else f"BLEU-2 {report['bleu2']:.4f}"
    print(f"{headline}\nwrote {js} and {cs}")


def cmd_curves(args) -> None:
    streams = {}
    for path in args.metrics:
        rows = runs.read_metrics(path)
        name = rows[0].get("algorithm") or Path(path).stem
        if name in streams:
            name = f"{name}:{Path(path).stem}"
        streams[name] = rows
    try:
        header, table = runs.merge_curves(streams, args.field)
    except ValueError as e:
        raise CliError(str(e)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(table)
    print(f"wrote {len(table)} rows x {len(header) - 1} runs to {out}")


def cmd_verify_kl(args) -> None:
    rows = kl_verification_table()
    print(f"{'p_old':>6} {'delta':>8} {'alpha':>10} {'exact_kl':>12} {'rel_err':>8}")
    for r in rows:
        print(f"{r['p_old']:>6.2f} {r['delta']:>8.0e} {r['alpha']:>+10.6f} {r['kl']:>12.4e} {r['rel_error']:>8.4f}")
    worst = max(r["rel_error"] for r in rows)
    print(f"max relative error {worst:.4f} ({'within' if worst < 0.1 else 'OUTSIDE'} 10%)")
    if worst >= 0.1:
        raise CliError("KL bound verification failed")


# --- entry point ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqppo", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a Counting dataset or the toy corpus")
    g.add_argument("--task", choices=("counting", "corpus"), required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int)
    g.add_argument("--max-n", type=int, default=10)
    g.add_argument("--out", required=True, help="file (counting) or directory (corpus)")
    g.set_defaults(func=cmd_generate)

    for name, func, text in (("pretrain", cmd_pretrain, "maximum-likelihood pretraining"),
                             ("train", cmd_train, "policy-optimisation fine-tuning")):
        p = sub.add_parser(name, help=text)
        add_config_flags(p)
        p.set_defaults(func=func)

    e = sub.add_parser("eval", help="precision / diversity / BLEU-2 report for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    add_config_flags(e)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("curves", help="merge metrics streams into one CSV")
    c.add_argument("metrics", nargs="+")
    c.add_argument("--field", default="mean_reward", choices=runs.CURVE_FIELDS)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_curves)

    k = sub.add_parser("verify-kl", help="print the KL bound vs exact KL table")
    k.set_defaults(func=cmd_verify_kl)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, ConfigError, FileNotFoundError) as e:
        print(f"seqppo: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
