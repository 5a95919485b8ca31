"""Adversarial and cycle losses, the alternating update, and the training loop."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .dataset import SpeakerRegistry, TrainingPair, sample_batch
from .dsp import SpeakerScalingStats
from .errors import NonFiniteLoss, ShapeMismatch
from .nets import (ArchConfig, Checkpoint, VoiceConversionGAN, crop, draw_starts, init_params,
                   load_checkpoint, patch_power, save_checkpoint)

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
_LOG_FLOOR = math.log(PROB_FLOOR)


@dataclass(frozen=True)
class TrainConfig:
    lambda_cycle: float = 10.0
    lr_d: float = 2e-4
    lr_g: float = 1e-4
    betas: tuple = (0.5, 0.999)
    batch_size: int = 8
    total_steps: int = 1000
    checkpoint_interval: int = 100
    seed: int = 0
    power_threshold: float = 0.15
    max_retries: int = 3

    def __post_init__(self):
        if self.lambda_cycle < 0:
            raise ValueError("lambda_cycle must be >= 0")
        if min(self.lr_d, self.lr_g) <= 0 or self.batch_size < 1 or self.checkpoint_interval < 1:
            raise ValueError("learning rates, batch size and checkpoint interval must be positive")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class LossReport:
    step: int
    loss_d: float
    loss_g_adv: float
    loss_cycle: float
    loss_g_total: float
    n_patches_d: int = 0
    n_patches_g: int = 0


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def _nll(log_probs: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    picked = log_probs.gather(-1, index.long().reshape(-1, 1)).squeeze(-1)
    return -picked.clamp(min=_LOG_FLOOR)


def _as_probs(probs):
    t = torch.as_tensor(probs if torch.is_tensor(probs) else np.asarray(probs, dtype=np.float64))
    return t[None] if t.ndim == 1 else t


def _out(value, like):
    return value if torch.is_tensor(like) else float(value)


def loss_discriminator(probs, label):
    """Mean ``-log p[label]`` with ``p`` floored at 1e-12.

    ``label`` indexes the 2N classes: ``2i`` real speaker i, ``2i+1`` fake speaker i.
    """
    p = _as_probs(probs)
    idx = torch.as_tensor(label).reshape(-1).expand(p.shape[0])
    return _out(_nll(torch.log(p.clamp(min=PROB_FLOOR)), idx).mean(), probs)


def loss_generator_adv(probs, target_index):
    """Mean ``-log p[2k]``: how far generated speech is from passing as real speaker k."""
    p = _as_probs(probs)
    idx = 2 * torch.as_tensor(target_index).reshape(-1).expand(p.shape[0])
    return _out(_nll(torch.log(p.clamp(min=PROB_FLOOR)), idx).mean(), probs)


def loss_cycle(original, reconstructed):
    """Mean absolute difference over all entries."""
    if tuple(np.shape(original)) != tuple(np.shape(reconstructed)):
        raise ShapeMismatch(f"{tuple(np.shape(original))} vs {tuple(np.shape(reconstructed))}")
    if torch.is_tensor(original) or torch.is_tensor(reconstructed):
        return (torch.as_tensor(original) - torch.as_tensor(reconstructed)).abs().mean()
    return float(np.mean(np.abs(np.asarray(original, float) - np.asarray(reconstructed, float))))


# --------------------------------------------------------------------------
# batched loss terms (shared by the update and the gradient checks)
# --------------------------------------------------------------------------

@dataclass
class PatchPlan:
    """Crop offsets for one step: ``starts[phase][group][width] -> array[B]``."""

    starts: dict

    @classmethod
    def draw(cls, rng: np.random.Generator, batch: int, window: int, widths: Sequence[int]):
        plan = {}
        for phase, groups in (("d", ("src", "tgt", "fake")), ("g", ("fake",))):
            plan[phase] = {g: {w: draw_starts(rng, batch, window, w) for w in widths}
                           for g in groups}
        return cls(plan)


def _width_losses(model: VoiceConversionGAN, groups, widths, threshold):
    """``groups``: list of (tensor [B,1,F,W], label tensor [B], starts-by-width)."""
    losses, kept = [], 0
    for w in widths:
        patches, labels = [], []
        for x, lab, starts in groups:
            p = crop(x, w, starts[w])
            mask = patch_power(p) >= threshold
            if bool(mask.any()):
                patches.append(p[mask])
                labels.append(lab[mask])
        if not patches:
            continue
        p = torch.cat(patches)
        y = torch.cat(labels)
        logp = torch.log_softmax(model.disc.logits(p, w), dim=-1)
        losses.append(_nll(logp, y).mean())
        kept += p.shape[0]
    if not losses:
        return None, 0
    return torch.stack(losses).mean(), kept


def discriminator_objective(model, xs, xt, j, k, fake, plan: PatchPlan, threshold: float):
    """Mean over widths of the patch cross-entropy for real-j, real-k and fake-k patches."""
    widths = model.disc.widths
    groups = [(xs, 2 * j, plan.starts["d"]["src"]),
              (xt, 2 * k, plan.starts["d"]["tgt"]),
              (fake, 2 * k + 1, plan.starts["d"]["fake"])]
    return _width_losses(model, groups, widths, threshold)


def generator_objectives(model, xs, xt, k, plan: PatchPlan, threshold: float):
    """Returns ``(adv or None, cycle, n_patches)`` with the graph through FE and G."""
    emb_k = model.fe(xt)
    fake = model.gen(xs, *emb_k)
    emb_j = model.fe(xs)
    cyc = model.gen(fake, *emb_j)
    adv, kept = _width_losses(model, [(fake, 2 * k, plan.starts["g"]["fake"])],
                              model.disc.widths, threshold)
    return adv, (xs - cyc).abs().mean(), kept


def batch_tensors(batch: Sequence[TrainingPair], dtype=torch.float32):
    xs = torch.as_tensor(np.stack([p.source_window for p in batch])[:, None], dtype=dtype)
    xt = torch.as_tensor(np.stack([p.target_window for p in batch])[:, None], dtype=dtype)
    j = torch.as_tensor(np.array([p.source_index for p in batch]), dtype=torch.long)
    k = torch.as_tensor(np.array([p.target_index for p in batch]), dtype=torch.long)
    return xs, xt, j, k


# --------------------------------------------------------------------------
# alternating update
# --------------------------------------------------------------------------

class Trainer:
    """Owns the model and both optimizers; one call to :meth:`step` is one D + one G/FE update."""

    def __init__(self, model: VoiceConversionGAN, config: TrainConfig):
        self.model = model
        self.config = config
        self.opt_d = torch.optim.Adam(model.disc.parameters(), lr=config.lr_d, betas=config.betas)
        self.opt_g = torch.optim.Adam(list(model.fe.parameters()) + list(model.gen.parameters()),
                                      lr=config.lr_g, betas=config.betas)
        self.step_count = 0

    @property
    def optimizers(self) -> dict:
        return {"d": self.opt_d, "g": self.opt_g}

    def _snapshot(self):
        return (copy.deepcopy(self.model.state_dict()), copy.deepcopy(self.opt_d.state_dict()),
                copy.deepcopy(self.opt_g.state_dict()))

    def _rollback(self, snap):
        self.model.load_state_dict(snap[0])
        self.opt_d.load_state_dict(snap[1])
        self.opt_g.load_state_dict(snap[2])

    def update_discriminator(self, xs, xt, j, k, plan: PatchPlan, snap=None):
        """One D step on real j/k patches and detached fake-k patches."""
        model = self.model
        with torch.no_grad():
            fake = model.convert(xs, xt)
        loss_d, n_d = discriminator_objective(model, xs, xt, j, k, fake, plan,
                                              self.config.power_threshold)
        if loss_d is not None:
            self._check("loss_d", loss_d, snap)
            self.opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            self.opt_d.step()
        return loss_d, n_d

    def update_generator(self, xs, xt, k, plan: PatchPlan, snap=None):
        """One FE/G step on adversarial + weighted cycle loss, D frozen."""
        model = self.model
        for p in model.disc.parameters():
            p.requires_grad_(False)
        try:
            adv, cyc, n_g = generator_objectives(model, xs, xt, k, plan,
                                                 self.config.power_threshold)
            total = cyc * self.config.lambda_cycle + (adv if adv is not None else 0.0)
            self._check("loss_g_total", total, snap)
            self.opt_g.zero_grad(set_to_none=True)
            total.backward()
            self.opt_g.step()
        finally:
            for p in model.disc.parameters():
                p.requires_grad_(True)
        return adv, cyc, total, n_g

    def step(self, batch: Sequence[TrainingPair], rng: np.random.Generator) -> LossReport:
        if not batch:
            raise ValueError("empty batch")
        model = self.model
        xs, xt, j, k = batch_tensors(batch, model.dtype)
        plan = PatchPlan.draw(rng, xs.shape[0], xs.shape[3], model.disc.widths)
        snap = self._snapshot()
        model.train()
        try:
            loss_d, n_d = self.update_discriminator(xs, xt, j, k, plan, snap)
            adv, cyc, total, n_g = self.update_generator(xs, xt, k, plan, snap)
        finally:
            model.eval()
        self.step_count += 1
        return LossReport(
            step=self.step_count,
            loss_d=loss_d.item() if loss_d is not None else 0.0,
            loss_g_adv=adv.item() if adv is not None else 0.0,
            loss_cycle=cyc.item(),
            loss_g_total=total.item(),
            n_patches_d=n_d, n_patches_g=n_g,
        )

    def _check(self, name, value, snap):
        if not bool(torch.isfinite(value)):
            if snap is not None:
                self._rollback(snap)
            raise NonFiniteLoss(f"{name} is not finite at step {self.step_count + 1}",
                                {name: value.item()})


def training_step(trainer: Trainer, batch: Sequence[TrainingPair], rng: np.random.Generator
                  ) -> tuple[VoiceConversionGAN, LossReport]:
    report = trainer.step(batch, rng)
    return trainer.model, report


# --------------------------------------------------------------------------
# loop with checkpoints
# --------------------------------------------------------------------------

def checkpoint_path(out_dir, step: int) -> Path:
    return Path(out_dir) / f"ckpt_{step}.bin"


def _truncate_history(path: Path, n_rows: int) -> None:
    if not path.exists():
        return
    rows = [line for line in path.read_text().splitlines() if line.strip()][:n_rows]
    path.write_text("".join(r + "\n" for r in rows))


def train(registry: SpeakerRegistry, utterances: Mapping[str, Sequence[np.ndarray]],
          stats: Mapping[str, SpeakerScalingStats], config: TrainConfig, out_dir,
          arch: ArchConfig = ArchConfig(), resume=None, history_name: str = "history.jsonl",
          callback=None) -> Path:
    """Run ``config.total_steps`` updates, checkpointing to ``out_dir``; returns the last checkpoint.

    ``resume`` is a checkpoint path; training continues at its step + 1 with the
    stored RNG and optimizer state, and the history file is cut back to match.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    history = out_dir / history_name
    rng = np.random.default_rng(config.seed)
    if resume is not None:
        ckpt = load_checkpoint(resume, expect_arch=arch)
        trainer = resume_trainer(ckpt, config)
        model = trainer.model
        if ckpt.rng_state is not None:
            rng.bit_generator.state = ckpt.rng_state
        _truncate_history(history, ckpt.step)
    else:
        model = init_params(arch, registry.N, seed=config.seed)
        trainer = Trainer(model, config)
        if history.exists():
            history.unlink()
    if model.n_speakers != registry.N:
        raise ValueError(f"model has {model.n_speakers} speakers, registry has {registry.N}")

    last = None
    if trainer.step_count == 0:
        last = checkpoint_path(out_dir, 0)
        save_checkpoint(last, model, 0, trainer.optimizers, rng.bit_generator.state)

    with open(history, "a") as fh:
        while trainer.step_count < config.total_steps:
            t0 = time.perf_counter()
            for attempt in range(config.max_retries + 1):
                batch = sample_batch(registry, utterances, stats, rng, config.batch_size,
                                     model.arch.window)
                try:
                    report = trainer.step(batch, rng)
                    break
                except NonFiniteLoss as exc:
                    logger.warning("step %d attempt %d: %s %s", trainer.step_count + 1, attempt,
                                   exc, exc.diagnostics)
                    if attempt == config.max_retries:
                        raise
            row = asdict(report)
            row["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
            fh.write(json.dumps(row) + "\n")
            fh.flush()
            if callback is not None:
                callback(report)
            s = trainer.step_count
            if s % config.checkpoint_interval == 0 or s == config.total_steps:
                last = checkpoint_path(out_dir, s)
                save_checkpoint(last, model, s, trainer.optimizers, rng.bit_generator.state)
    if last is None:
        last = checkpoint_path(out_dir, trainer.step_count)
        if not last.exists():
            save_checkpoint(last, model, trainer.step_count, trainer.optimizers,
                            rng.bit_generator.state)
    return last


def read_history(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def resume_trainer(ckpt: Checkpoint, config: TrainConfig) -> Trainer:
    trainer = Trainer(ckpt.model, config)
    ckpt.restore_optimizers(trainer.optimizers)
    trainer.step_count = ckpt.step
    return trainer
