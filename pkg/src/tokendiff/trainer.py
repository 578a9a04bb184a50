"""Two-phase optimization: base pretraining and adapter fine-tuning.

Pretraining optimizes every parameter on the plain variational bound;
fine-tuning freezes the base, attaches low-rank adapters and optimizes
them alone, optionally with the shuffled-negative contrastive term. One
seeded generator drives shuffling, step sampling, corruption and
negatives, and its state rides in checkpoints so a resumed run is
bit-identical to an uninterrupted one.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .datagen import Dataset
from .denoiser import Denoiser, LoraConfig
from .errors import ConfigError, NumericError
from .loss import bound_terms, corrupt_with_uniforms, make_negatives
from .rngtools import derive_rng, restore_rng, rng_state
from .schedule import NoiseSchedule

PHASES = ("pretrain", "finetune_lora", "finetune_lora_contrastive")


@dataclass(frozen=True)
class TrainConfig:
    phase: str
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 3e-4
    lr_schedule: str = "constant"  # or "cosine" (decay to ~0 over cfg.epochs)
    weight_decay: float = 0.0
    lam: float = 0.0  # contrastive weight; config key "lambda"
    n_negatives: int = 0
    seed: int = 0
    lora: Optional[LoraConfig] = None
    clamp_negative_at: Optional[float] = None

    def validate(self) -> None:
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}; valid: {list(PHASES)}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("negative learning_rate or weight_decay")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.lam > 0 and self.phase != "finetune_lora_contrastive":
            raise ConfigError("lambda > 0 requires phase finetune_lora_contrastive")
        if self.phase == "finetune_lora_contrastive" and self.n_negatives < 1:
            raise ConfigError("contrastive phase needs n_negatives >= 1")
        if self.phase.startswith("finetune") and self.lora is None:
            raise ConfigError("finetune phases require a lora config")

    def to_dict(self) -> dict:
        doc = {
            "phase": self.phase, "epochs": self.epochs, "batch_size": self.batch_size,
            "learning_rate": self.learning_rate, "lr_schedule": self.lr_schedule,
            "weight_decay": self.weight_decay,
            "lambda": self.lam, "n_negatives": self.n_negatives, "seed": self.seed,
            "lora": self.lora.to_dict() if self.lora else None,
            "clamp_negative_at": self.clamp_negative_at,
        }
        return doc


class AdamW:
    """Decoupled-weight-decay adaptive moments, bias-corrected."""

    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.step_count = 0
        self.moments = {
            name: {"m": np.zeros_like(t.data), "v": np.zeros_like(t.data)}
            for name, t in self.params.items()
        }

    def step(self) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in {name}")
            mo = self.moments[name]
            mo["m"] = self.beta1 * mo["m"] + (1.0 - self.beta1) * g
            mo["v"] = self.beta2 * mo["v"] + (1.0 - self.beta2) * g * g
            update = (mo["m"] / c1) / (np.sqrt(mo["v"] / c2) + self.eps)
            p.data = p.data - self.lr * update - self.lr * self.weight_decay * p.data

    def state(self) -> dict:
        out = {name: {"m": mo["m"].copy(), "v": mo["v"].copy()} for name, mo in self.moments.items()}
        out["_step"] = self.step_count
        return out

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["_step"])
        for name in self.moments:
            if name not in state:
                raise ConfigError(f"optimizer state missing {name}")
            self.moments[name]["m"] = np.asarray(state[name]["m"], dtype=np.float64).copy()
            self.moments[name]["v"] = np.asarray(state[name]["v"], dtype=np.float64).copy()


@dataclass
class StepRecord:
    epoch: int
    step: int
    mean_t: float
    positive_vb: float
    negative_vb_mean: float
    total: float


@dataclass
class TrainHistory:
    epoch_means: list = field(default_factory=list)  # mean positive_vb per epoch
    steps: list = field(default_factory=list)

    def loss_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "step", "mean_t", "positive_vb", "negative_vb_mean", "total"])
        for r in self.steps:
            writer.writerow(
                [r.epoch, r.step, repr(r.mean_t), repr(r.positive_vb),
                 repr(r.negative_vb_mean), repr(r.total)]
            )
        return buf.getvalue()


class Trainer:
    """Deterministic single-process training loop over a fixed dataset."""

    def __init__(
        self,
        model: Denoiser,
        sched: NoiseSchedule,
        dataset: Dataset,
        cfg: TrainConfig,
        dump_dir: Optional[Path] = None,
    ):
        cfg.validate()
        if model.cfg.K != sched.K or model.cfg.T != sched.T:
            raise ConfigError("model and schedule disagree on K or T")
        if cfg.phase == "pretrain" and model.lora is not None:
            raise ConfigError("pretrain phase on an adapted model")
        if cfg.phase.startswith("finetune") and model.lora is None:
            raise ConfigError("finetune phase without attached adapters")
        self.model = model
        self.sched = sched
        self.dataset = dataset
        self.cfg = cfg
        self.dump_dir = Path(dump_dir) if dump_dir else None
        self.opt = AdamW(model.trainable_parameters(), cfg.learning_rate, cfg.weight_decay)
        self.rng = derive_rng(cfg.seed, "trainer")
        self.epoch = 0
        self.history = TrainHistory()
        steps_per_epoch = max(1, -(-len(dataset) // cfg.batch_size))
        self._schedule_steps = max(1, cfg.epochs * steps_per_epoch)
        self._frozen_baseline = (
            {k: v.data.copy() for k, v in model.base_parameters().items()}
            if cfg.phase.startswith("finetune")
            else None
        )

    # ----- core step --------------------------------------------------------

    def _build_batch(self, tokens: np.ndarray, conds: np.ndarray):
        """Widen a clean batch with per-example negatives sharing t and noise."""
        B, D = tokens.shape
        t = self.rng.integers(1, self.sched.T + 1, size=B)
        contrastive = self.cfg.phase == "finetune_lora_contrastive"
        n_neg = self.cfg.n_negatives if contrastive else 0
        group = n_neg + 1
        wide = np.empty((B * group, D), dtype=np.int64)
        wide[::group] = tokens
        for i in range(B):
            if n_neg:
                negs = make_negatives(tokens[i], n_neg, self.rng)
                wide[i * group + 1 : (i + 1) * group] = negs.sequences
        u = np.repeat(self.rng.random((B, D)), group, axis=0)
        t_wide = np.repeat(t, group)
        cond_wide = np.repeat(conds, group)
        xt = corrupt_with_uniforms(self.sched, wide, t_wide, u)
        return wide, xt, t_wide, cond_wide, t, group

    def train_step(self, tokens: np.ndarray, conds: np.ndarray) -> StepRecord:
        cfg = self.cfg
        B = tokens.shape[0]
        wide, xt, t_wide, cond_wide, t, group = self._build_batch(tokens, conds)
        n_neg = group - 1

        self.model.zero_grads()
        try:
            with Tape() as tape:
                terms = bound_terms(self.model, self.sched, wide, xt, t_wide, cond_wide)
                w_pos = np.zeros(B * group)
                w_pos[::group] = 1.0 / B
                if n_neg:
                    w_neg = np.full(B * group, -cfg.lam / (n_neg * B))
                    w_neg[::group] = 0.0
                    if cfg.clamp_negative_at is not None:
                        loss = ad.add(
                            ad.weighted_sum(terms, w_pos),
                            ad.weighted_sum(ad.clamp_max(terms, cfg.clamp_negative_at), w_neg),
                        )
                    else:
                        loss = ad.weighted_sum(terms, w_pos + w_neg)
                else:
                    loss = ad.weighted_sum(terms, w_pos)
                total = loss.item()
                if not np.isfinite(total):
                    raise NumericError("non-finite training loss")
                tape.backward(loss)
        except NumericError:
            self._dump_batch(wide, xt, t_wide, cond_wide)
            raise
        if cfg.lr_schedule == "cosine":
            progress = min(self.opt.step_count / self._schedule_steps, 1.0)
            self.opt.lr = cfg.learning_rate * 0.5 * (1.0 + np.cos(np.pi * progress))
        self.opt.step()

        pos = float(terms.data[::group].mean())
        if n_neg:
            neg_view = terms.data.reshape(B, group)[:, 1:]
            neg = float(neg_view.mean())
        else:
            neg = 0.0
        return StepRecord(
            epoch=self.epoch, step=len(self.history.steps), mean_t=float(t.mean()),
            positive_vb=pos, negative_vb_mean=neg, total=total,
        )

    def _dump_batch(self, wide, xt, t_wide, cond_wide) -> None:
        if self.dump_dir is None:
            return
        self.dump_dir.mkdir(parents=True, exist_ok=True)
        np.savez(
            self.dump_dir / "bad_batch.npz",
            tokens=wide, corrupted=xt, t=t_wide, cond=cond_wide, epoch=self.epoch,
        )

    # ----- epochs ------------------------------------------------------------

    def run_epoch(self) -> float:
        n = len(self.dataset)
        order = self.rng.permutation(n)
        B = self.cfg.batch_size
        positives = []
        for lo in range(0, n, B):
            idx = order[lo : lo + B]
            rec = self.train_step(self.dataset.tokens[idx], self.dataset.cond[idx])
            self.history.steps.append(rec)
            positives.append(rec.positive_vb)
        mean_pos = float(np.mean(positives))
        self.history.epoch_means.append(mean_pos)
        self.epoch += 1
        return mean_pos

    def train(self, epochs: Optional[int] = None) -> TrainHistory:
        for _ in range(self.cfg.epochs if epochs is None else epochs):
            self.run_epoch()
        if self._frozen_baseline is not None:
            self.check_frozen_integrity()
        return self.history

    def check_frozen_integrity(self) -> None:
        for name, baseline in self._frozen_baseline.items():
            if not np.array_equal(self.model._params[name].data, baseline):
                raise NumericError(f"frozen tensor {name} was mutated during finetune")

    # ----- persistence ---------------------------------------------------------

    def training_state(self) -> dict:
        return {
            "optimizer_state": self.opt.state(),
            "rng_state": rng_state(self.rng),
            "epoch": self.epoch,
        }

    def restore_training_state(self, optimizer_state, rng_st, epoch) -> None:
        if optimizer_state is not None:
            self.opt.load_state(optimizer_state)
        if rng_st is not None:
            self.rng = restore_rng(rng_st)
        self.epoch = int(epoch)


def adamw_single_update(value: float, grad: float, lr: float) -> float:
    """First-step update of a fresh scalar parameter (for audits/tests)."""
    opt_param = Tensor(np.array([value]), requires_grad=True)
    opt_param.grad = np.array([grad])
    opt = AdamW({"p": opt_param}, lr=lr)
    opt.step()
    return float(opt_param.data[0])


def make_trainer(
    model: Denoiser,
    sched: NoiseSchedule,
    dataset: Dataset,
    cfg: TrainConfig,
    dump_dir=None,
) -> Trainer:
    """Phase-aware trainer construction (validates model/phase agreement)."""
    if cfg.phase == "pretrain":
        model.set_trainable(True)
    return Trainer(model, sched, dataset, cfg, dump_dir=dump_dir)


def resume_trainer(
    sched: NoiseSchedule, dataset: Dataset, cfg: TrainConfig, checkpoint_data, dump_dir=None
) -> Trainer:
    """Rebuild a trainer mid-run from a loaded checkpoint."""
    model = checkpoint_data.model
    if cfg.phase == "pretrain":
        model.set_trainable(True)
    trainer = Trainer(model, sched, dataset, cfg, dump_dir=dump_dir)
    trainer.restore_training_state(
        checkpoint_data.optimizer_state, checkpoint_data.rng_state, checkpoint_data.epoch
    )
    return trainer
