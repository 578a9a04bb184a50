"""Operator entry point: data generation, training, sampling, evaluation.

Every command is driven by one JSON config (plus dotted --set overrides
and a root seed) and writes a manifest next to its artifacts, so a run
is reproducible byte-for-byte from the manifest alone (timestamps
excluded). Exit codes: 0 ok, 2 config/usage, 3 numeric, 4 I/O.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    apply_overrides,
    load_config,
    lora_config,
    model_config,
    schedule_config,
    sub_seed,
    train_config,
)
from .datagen import Dataset, make_task, sample_dataset, shift_task, task_from_json, task_to_json
from .denoiser import Denoiser, attach_lora
from .diffusion import generate
from .errors import ConfigError, NumericError, TokendiffError, UsageError
from .metrics import comparison_table, MetricReport, oracle_report
from .rngtools import derive_rng
from .schedule import build_schedule, schedule_csv
from .trainer import Trainer, make_trainer
from .verify import run_all


def _write_manifest(out: Path, command: str, config: dict, seed: int,
                    artifacts: list[str], started: float) -> None:
    doc = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "kernel_backend": kernels.BACKEND,
        "config": config,
        "artifacts": sorted(artifacts),
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
        "wall_time_s": round(time.time() - started, 3),
    }
    (out / f"manifest-{command}.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _load_task_and_data(out: Path):
    data_dir = out / "data"
    task_path = data_dir / "task.json"
    train_path = data_dir / "train.jsonl"
    if not task_path.exists() or not train_path.exists():
        raise FileNotFoundError(f"no dataset under {data_dir}; run gen-data first")
    task = task_from_json(task_path.read_text())
    train = Dataset.from_jsonl(train_path.read_text(), split="train")
    train.validate(task)
    return task, train


def _generate_dataset(model, sched, task, n_per_condition: int, chunk: int, rng_label: str,
                      seed: int, verbose: bool = False):
    """Sample n_per_condition sequences per condition from the model."""
    conds = []
    tokens = []
    stats_all = []
    for c in range(task.C):
        rng = derive_rng(seed, f"{rng_label}.{c}")
        out, stats = generate(
            model, sched, cond=c, D=task.D, rng=rng, n=n_per_condition,
            chunk=chunk, collect_stats=verbose,
        )
        conds.append(np.full(n_per_condition, c, dtype=np.int64))
        tokens.append(out)
        stats_all.append(stats)
    ds = Dataset(cond=np.concatenate(conds), tokens=np.concatenate(tokens), split="generated")
    return ds, stats_all


# ----- commands ---------------------------------------------------------------


def cmd_gen_data(config: dict, out: Path, args) -> list[str]:
    seed = config["seed"]
    t = config["task"]
    task = make_task(
        C=t["C"], K=t["K"], D=t["D"], seed=sub_seed(seed, "task"),
        peak=t["peak"], trans_peak=t["trans_peak"], jitter=t["jitter"],
        min_pairwise_tv=t["min_pairwise_tv"],
    )
    train = sample_dataset(task, config["data"]["n_train"], derive_rng(seed, "data.train"))
    val = sample_dataset(task, config["data"]["n_val"], derive_rng(seed, "data.val"), split="val")
    data_dir = out / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    (data_dir / "task.json").write_text(task_to_json(task))
    (data_dir / "train.jsonl").write_text(train.to_jsonl())
    (data_dir / "val.jsonl").write_text(val.to_jsonl())
    print(f"task C={task.C} K={task.K} D={task.D}; {len(train)} train / {len(val)} val records")
    return ["data/task.json", "data/train.jsonl", "data/val.jsonl"]


def cmd_dump_schedule(config: dict, out: Path, args) -> list[str]:
    sched = build_schedule(schedule_config(config))
    out.mkdir(parents=True, exist_ok=True)
    (out / "schedule.csv").write_text(schedule_csv(sched))
    print(f"schedule T={sched.T} K={sched.K} written")
    return ["schedule.csv"]


def cmd_pretrain(config: dict, out: Path, args) -> list[str]:
    seed = config["seed"]
    task, train_data = _load_task_and_data(out)
    sched = build_schedule(schedule_config(config))
    model = Denoiser(model_config(config), derive_rng(seed, "model.init"))
    tcfg = train_config(config, phase="pretrain")
    trainer = make_trainer(model, sched, train_data, tcfg, dump_dir=out / "diagnostics")
    trainer.train()
    logs = out / "logs"
    logs.mkdir(parents=True, exist_ok=True)
    (logs / "pretrain_loss.csv").write_text(trainer.history.loss_csv())
    ck = out / "checkpoints" / "pretrain"
    save_checkpoint(
        ck, model,
        optimizer_state=trainer.opt.state(),
        rng_state=trainer.training_state()["rng_state"],
        epoch=trainer.epoch,
        train_config=tcfg.to_dict(),
    )
    final = trainer.history.epoch_means[-1] if trainer.history.epoch_means else float("nan")
    print(f"pretrain done: {trainer.epoch} epochs, final epoch-mean bound term {final:.4f}")
    return ["checkpoints/pretrain/manifest.json", "checkpoints/pretrain/weights.bin",
            "checkpoints/pretrain/optim.bin", "logs/pretrain_loss.csv"]


def _check_base_compat(config: dict, manifest: dict) -> None:
    want = model_config(config).to_dict()
    have = manifest["model_config"]
    if want != have:
        raise ConfigError(
            f"base checkpoint architecture {have} does not match config {want}; refusing to run"
        )


def cmd_finetune(config: dict, out: Path, args) -> list[str]:
    if not args.base:
        raise UsageError("finetune requires --base pointing at a pretrain checkpoint")
    base = load_checkpoint(args.base)
    _check_base_compat(config, base.manifest)
    if args.ablation:
        return _run_ablation(config, out, args)

    seed = config["seed"]
    task, train_data = _load_task_and_data(out)
    sched = build_schedule(schedule_config(config))
    model = base.model
    if model.lora is None:
        attach_lora(model, lora_config(config), derive_rng(seed, "finetune.lora_init"))
    tcfg = train_config(config)
    if not tcfg.phase.startswith("finetune"):
        raise ConfigError("finetune command requires train.phase = finetune_lora[_contrastive]")
    trainer = Trainer(model, sched, train_data, tcfg, dump_dir=out / "diagnostics")
    trainer.train()
    logs = out / "logs"
    logs.mkdir(parents=True, exist_ok=True)
    (logs / "finetune_loss.csv").write_text(trainer.history.loss_csv())
    ck = out / "checkpoints" / tcfg.phase
    save_checkpoint(
        ck, model,
        optimizer_state=trainer.opt.state(),
        rng_state=trainer.training_state()["rng_state"],
        epoch=trainer.epoch,
        train_config=tcfg.to_dict(),
    )
    print(f"finetune ({tcfg.phase}) done: {trainer.epoch} epochs, "
          f"{model.count_trainable()} trainable parameters")
    return [f"checkpoints/{tcfg.phase}/manifest.json", f"checkpoints/{tcfg.phase}/weights.bin",
            "logs/finetune_loss.csv"]


def _run_ablation(config: dict, out: Path, args) -> list[str]:
    """Three-arm comparison on a shifted task: base / +LoRA / +LoRA+contrast."""
    seed = config["seed"]
    ab = config["ablation"]
    task, _ = _load_task_and_data(out)
    sched = build_schedule(schedule_config(config))
    shifted = shift_task(task, derive_rng(seed, "ablation.shift"), weight=ab["shift_weight"])
    ft_data = sample_dataset(shifted, ab["n_train"], derive_rng(seed, "ablation.data"))
    reference = sample_dataset(
        shifted, ab["n_eval_per_condition"] * shifted.C,
        derive_rng(seed, "ablation.reference"), split="reference",
    )
    ab_dir = out / "ablation"
    artifacts = []

    def evaluate(model, label: str) -> MetricReport:
        gen, _ = _generate_dataset(
            model, sched, shifted, ab["n_eval_per_condition"], config["eval"]["chunk"],
            f"ablation.gen.{label}", seed,
        )
        report = oracle_report(shifted, gen, reference, kid_seed=config["eval"]["kid_seed"])
        arm_dir = ab_dir / label
        arm_dir.mkdir(parents=True, exist_ok=True)
        (arm_dir / "report.json").write_text(report.to_json())
        artifacts.append(f"ablation/{label}/report.json")
        return report

    def tuned_arm(phase: str, lam: float, n_neg: int, label: str) -> MetricReport:
        arm = load_checkpoint(args.base).model
        attach_lora(arm, lora_config(config), derive_rng(seed, "ablation.lora_init"))
        tcfg = train_config(
            config, phase=phase,
            epochs=ab["epochs"], learning_rate=ab["learning_rate"],
            **{"lambda": lam}, n_negatives=n_neg,
        )
        trainer = Trainer(arm, sched, ft_data, tcfg, dump_dir=out / "diagnostics")
        trainer.train()
        save_checkpoint(ab_dir / label / "checkpoint", arm, epoch=trainer.epoch,
                        train_config=tcfg.to_dict())
        artifacts.append(f"ablation/{label}/checkpoint/manifest.json")
        return evaluate(arm, label)

    reports = {"base": evaluate(load_checkpoint(args.base).model, "base")}
    reports["+lora"] = tuned_arm("finetune_lora", 0.0, 0, "lora")
    reports["+lora+contrast"] = tuned_arm(
        "finetune_lora_contrastive", ab["lambda"], ab["n_negatives"], "lora_contrast"
    )

    table = comparison_table(reports)
    (ab_dir / "comparison.txt").write_text(table)
    rows = [MetricReport.CSV_HEADER] + [r.csv_row(label) for label, r in reports.items()]
    (ab_dir / "comparison.csv").write_text("\n".join(rows) + "\n")
    artifacts += ["ablation/comparison.txt", "ablation/comparison.csv"]
    print(table, end="")
    return artifacts


def cmd_sample(config: dict, out: Path, args) -> list[str]:
    if not args.checkpoint:
        raise UsageError("sample requires --checkpoint")
    ck = load_checkpoint(args.checkpoint)
    model = ck.model
    sched = build_schedule(schedule_config(config))
    seed = config["seed"]
    n = args.n
    C = model.cfg.n_conditions
    cond = np.full(n, args.cond, dtype=np.int64) if args.cond is not None else np.arange(n) % C
    if args.cond is not None and not (0 <= args.cond < C):
        raise UsageError(f"condition {args.cond} out of range [0, {C})")
    tokens, stats = generate(
        model, sched, cond=cond, D=model.cfg.D, rng=derive_rng(seed, "sample"),
        n=n, chunk=config["sample"]["chunk"], collect_stats=args.verbose,
    )
    samples_dir = out / "samples"
    samples_dir.mkdir(parents=True, exist_ok=True)
    ds = Dataset(cond=cond, tokens=tokens, split="samples")
    (samples_dir / "samples.jsonl").write_text(ds.to_jsonl())
    artifacts = ["samples/samples.jsonl"]
    if args.verbose:
        (samples_dir / "generation_stats.jsonl").write_text(stats.jsonl())
        artifacts.append("samples/generation_stats.jsonl")
    print(f"wrote {n} sequences (residual masks: {stats.residual_mask_count})")
    return artifacts


def cmd_eval(config: dict, out: Path, args) -> list[str]:
    if not args.checkpoint:
        raise UsageError("eval requires --checkpoint")
    ck = load_checkpoint(args.checkpoint)
    _check_base_compat(config, ck.manifest)
    task, _ = _load_task_and_data(out)
    sched = build_schedule(schedule_config(config))
    seed = config["seed"]
    n_per = config["eval"]["n_per_condition"]
    reference = sample_dataset(
        task, n_per * task.C, derive_rng(seed, "eval.reference"), split="reference"
    )
    gen, _ = _generate_dataset(
        ck.model, sched, task, n_per, config["eval"]["chunk"], "eval.gen", seed,
    )
    report = oracle_report(task, gen, reference, kid_seed=config["eval"]["kid_seed"])
    eval_dir = out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    (eval_dir / "report.json").write_text(report.to_json())
    (eval_dir / "report.csv").write_text(
        MetricReport.CSV_HEADER + "\n" + report.csv_row("checkpoint") + "\n"
    )
    table = comparison_table({"checkpoint": report})
    (eval_dir / "table.txt").write_text(table)
    print(table, end="")
    return ["eval/report.json", "eval/report.csv", "eval/table.txt"]


def cmd_verify(config: dict, out: Path, args) -> list[str]:
    ok = run_all(config["seed"])
    if not ok:
        raise NumericError("verification suites reported tolerance breaches")
    return []


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "dump-schedule": cmd_dump_schedule,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokendiff",
        description="Contrastive discrete latent diffusion over token sequences, desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted config override (repeatable)")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="root seed override")
        p.add_argument("--verbose", action="store_true")
        if name == "finetune":
            p.add_argument("--base", type=Path, default=None, help="base checkpoint directory")
            p.add_argument("--ablation", action="store_true",
                           help="run the three-arm comparison on a shifted task")
        if name == "sample":
            p.add_argument("--checkpoint", type=Path, default=None)
            p.add_argument("--n", type=int, default=100)
            p.add_argument("--cond", type=int, default=None)
        if name == "eval":
            p.add_argument("--checkpoint", type=Path, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.time()
    try:
        config = load_config(args.config)
        config = apply_overrides(config, args.overrides)
        if args.seed is not None:
            config["seed"] = int(args.seed)
        needs_out = args.command != "verify"
        if needs_out and args.out is None:
            raise UsageError(f"{args.command} requires --out DIR")
        out = args.out if args.out is not None else Path(".")
        if needs_out:
            out.mkdir(parents=True, exist_ok=True)
        artifacts = COMMANDS[args.command](config, out, args)
        if needs_out:
            _write_manifest(out, args.command, config, config["seed"], artifacts, started)
        return 0
    except TokendiffError as exc:
        print(f"error class={exc.error_class} {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error class=IO {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
