"""Loss assembly and the optimization loop.

Each iteration: forward both domains through the extractor, decompose the
feature maps into the DCT grid, cut out the band the scheduler designates,
compute the source regression loss plus the adversarial alignment loss (via
gradient reversal, so one minimization trains the discriminator while the
extractor learns to confuse it) and the optional target self-supervised term,
take one Adam step over all parameters, then measure the transferability
metric on detached band features and advance the scheduler.

Everything is deterministic under (config, seed): batch sampling and
augmentation run off one numpy generator whose state is checkpointed, so an
interrupted run resumes to an identical loss trace.
"""

import csv
import math
import os
from dataclasses import dataclass, asdict

import numpy as np
import torch

from . import metrics, spectral
from .data import DomainBatch, sample_batch, steps_per_epoch
from .model import (
    ModelConfig,
    QualityModel,
    build_model,
    grl,
    grl_lambda_at,
    load_checkpoint,
    save_checkpoint,
)
from .scheduler import BandScheduler, SchedulerConfig, SchedulerState

TRAIN_LOG_COLUMNS = ("t", "phase", "j", "L_S", "L_adv", "L_T", "epsilon", "lr")
REGRESSION_LOSSES = ("mse", "cross-entropy")


class NonFiniteLossError(RuntimeError):
    """A loss term left the finite range; message carries the diagnostic dump."""


@dataclass
class TrainingConfig:
    lr: float = 1e-4
    weight_decay: float = 5e-4
    batch_size: int = 16
    w_src: float = 1.0
    w_adv: float = 1.0
    w_target: float = 0.0          # 0 disables the target self-supervised hook
    regression_loss: str = "mse"
    target_loss: str = "entropy"
    seed: int = 0

    def __post_init__(self):
        if self.regression_loss not in REGRESSION_LOSSES:
            raise ValueError(f"unknown regression loss {self.regression_loss!r}")
        if min(self.w_src, self.w_adv, self.w_target) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.target_loss not in TARGET_LOSSES:
            raise ValueError(f"unknown target loss {self.target_loss!r}; "
                             f"registered: {sorted(TARGET_LOSSES)}")


@dataclass
class LossBreakdown:
    L_S: float
    L_adv: float
    L_T: float
    total: float
    weights: dict


def adversarial_loss(d_src, d_tgt):
    """-mean log(1 - D(source)) - mean log(D(target)), on clamped probabilities."""
    return -torch.log1p(-d_src).mean() - torch.log(d_tgt).mean()


def regression_loss(prediction, truth, kind="mse", bin_centers=None):
    """Source quality loss: MSE on the scalar score, or cross-entropy against a
    discretized target distribution (mass split between the two nearest bins)."""
    dist, score = prediction
    if kind == "mse":
        return torch.mean((score - truth) ** 2)
    if dist is None:
        raise ValueError("cross-entropy regression needs the distribution head")
    q = discretize_scores(truth, bin_centers)
    return -(q * torch.log(dist.clamp_min(1e-12))).sum(dim=-1).mean()


def discretize_scores(scores, bin_centers):
    """Two-point distribution per score whose expectation over centers is the score."""
    idx = torch.clamp(torch.searchsorted(bin_centers, scores, right=True) - 1,
                      0, len(bin_centers) - 2)
    left = bin_centers[idx]
    right = bin_centers[idx + 1]
    w = ((scores - left) / (right - left)).clamp(0.0, 1.0)
    q = torch.zeros(len(scores), len(bin_centers), dtype=scores.dtype)
    q.scatter_(1, idx.unsqueeze(1), (1.0 - w).unsqueeze(1))
    q.scatter_add_(1, (idx + 1).unsqueeze(1), w.unsqueeze(1))
    return q


def entropy_target_loss(net, band_tgt):
    """Baseline self-supervised target term: entropy of the predicted bin distribution."""
    dist, _ = net.regress(band_tgt)
    if dist is None:
        raise ValueError("entropy target loss needs the distribution head")
    return -(dist * torch.log(dist.clamp_min(1e-12))).sum(dim=-1).mean()


# pluggable hooks: name -> fn(model, target_band_features) -> scalar tensor
TARGET_LOSSES = {"entropy": entropy_target_loss}


def measure_epsilon(kind, band_src, band_tgt, net=None):
    """Transferability value on detached band features; never touches parameters."""
    if kind == "mmd":
        return metrics.mmd(band_src, band_tgt)
    if kind == "coral":
        return metrics.coral(band_src, band_tgt)
    if kind == "adversarial":
        with torch.no_grad():
            d_src = net.discriminate(torch.from_numpy(band_src).float())
            d_tgt = net.discriminate(torch.from_numpy(band_tgt).float())
        return metrics.adv_metric(d_src.numpy(), d_tgt.numpy())
    raise ValueError(f"unknown metric kind {kind!r}")


class Trainer:
    """Owns model, optimizer, band scheduler, and the batch-sampling rng."""

    def __init__(self, model_cfg, sched_cfg, train_cfg, source, target):
        if (model_cfg.grid_h, model_cfg.grid_w) != (sched_cfg.grid_h, sched_cfg.grid_w):
            raise ValueError("model and scheduler disagree on the frequency grid")
        if model_cfg.m != sched_cfg.m:
            raise ValueError(f"model window m={model_cfg.m} != scheduler m={sched_cfg.m}")
        for ds, name in ((source, "source"), (target, "target")):
            h, w = ds.image_size
            if h < model_cfg.crop_size or w < model_cfg.crop_size:
                raise ValueError(f"{name} images {h}x{w} smaller than crop {model_cfg.crop_size}")
        if source.scores is None:
            raise ValueError("source dataset must carry scores")
        self.model_cfg = model_cfg
        self.sched_cfg = sched_cfg
        self.train_cfg = train_cfg
        self.source = source
        self.target = target
        self.model = build_model(model_cfg, train_cfg.seed)
        self.optimizer = torch.optim.Adam(
            self.model.parameters(), lr=train_cfg.lr, weight_decay=train_cfg.weight_decay
        )
        self.scheduler = BandScheduler(sched_cfg)
        self.rng = np.random.default_rng(train_cfg.seed)
        self.trajectory = spectral.make_trajectory(
            sched_cfg.trajectory, sched_cfg.grid_h, sched_cfg.grid_w
        )
        self.log_rows = []

    @property
    def t(self):
        return self.scheduler.state.t

    @property
    def complete(self):
        return self.scheduler.state.complete

    def current_window(self):
        return spectral.BandWindow(self.trajectory, self.sched_cfg.m, self.scheduler.current_band)

    def next_batch(self):
        return sample_batch(self.source, self.target, self.train_cfg.batch_size,
                            self.rng, self.model_cfg.crop_size, train=True)

    def _bands(self, batch):
        x_s = torch.from_numpy(batch.source_images).unsqueeze(1)
        x_t = torch.from_numpy(batch.target_images).unsqueeze(1)
        window = self.current_window()
        band_s = spectral.extract_band(spectral.dct2(self.model.forward_features(x_s)), window)
        band_t = spectral.extract_band(spectral.dct2(self.model.forward_features(x_t)), window)
        return band_s, band_t

    def step(self, batch=None):
        """One full training iteration; returns (LossBreakdown, epsilon, band index)."""
        cfg = self.train_cfg
        if batch is None:
            batch = self.next_batch()
        band_index = self.scheduler.current_band
        phase = self.scheduler.state.phase
        band_s, band_t = self._bands(batch)

        truth = torch.from_numpy(batch.source_scores).float()
        zero = torch.zeros(())
        l_s = (regression_loss(self.model.regress(band_s), truth, cfg.regression_loss,
                               self.model.bin_centers)
               if cfg.w_src > 0 else zero)
        if cfg.w_adv > 0:
            lam = grl_lambda_at(self.model_cfg, self.t)
            l_adv = adversarial_loss(
                self.model.discriminate(grl(band_s, lam)),
                self.model.discriminate(grl(band_t, lam)),
            )
        else:
            l_adv = zero
        l_t = (TARGET_LOSSES[cfg.target_loss](self.model, band_t)
               if cfg.w_target > 0 else zero)
        total = cfg.w_src * l_s + cfg.w_adv * l_adv + cfg.w_target * l_t

        if not torch.isfinite(total):
            raise NonFiniteLossError(
                f"non-finite loss at t={self.t} band={band_index} "
                f"(L_S={l_s.item()}, L_adv={l_adv.item()}, L_T={l_t.item()})"
            )
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()

        eps = measure_epsilon(
            self.sched_cfg.metric,
            band_s.detach().double().numpy(),
            band_t.detach().double().numpy(),
            net=self.model,
        )
        breakdown = LossBreakdown(
            L_S=l_s.item(), L_adv=l_adv.item(), L_T=l_t.item(), total=total.item(),
            weights={"src": cfg.w_src, "adv": cfg.w_adv, "target": cfg.w_target},
        )
        self.log_rows.append({
            "t": self.t, "phase": phase, "j": band_index,
            "L_S": breakdown.L_S, "L_adv": breakdown.L_adv, "L_T": breakdown.L_T,
            "epsilon": eps, "lr": cfg.lr,
        })
        self.scheduler.step(eps)
        return breakdown, eps, band_index

    def run(self, max_steps=None):
        """Advance until the schedule completes (or max_steps iterations pass)."""
        done = 0
        while not self.complete and (max_steps is None or done < max_steps):
            self.step()
            done += 1
        return done

    # --- persistence ---------------------------------------------------------

    def save(self, path):
        save_checkpoint(path, {
            "model_config": asdict(self.model_cfg),
            "scheduler_config": asdict(self.sched_cfg),
            "training_config": asdict(self.train_cfg),
            "model_state": self.model.state_dict(),
            "optimizer_state": self.optimizer.state_dict(),
            "scheduler_state": self.scheduler.state.to_dict(),
            "rng_state": self.rng.bit_generator.state,
            "interval_log": [asdict(r) for r in self.scheduler.interval_log],
        })

    @classmethod
    def restore(cls, path, source, target):
        payload = load_checkpoint(path)
        trainer = cls(
            ModelConfig(**payload["model_config"]),
            SchedulerConfig(**payload["scheduler_config"]),
            TrainingConfig(**payload["training_config"]),
            source,
            target,
        )
        trainer.model.load_state_dict(payload["model_state"])
        trainer.optimizer.load_state_dict(payload["optimizer_state"])
        trainer.scheduler.state = SchedulerState.from_dict(payload["scheduler_state"])
        trainer.rng.bit_generator.state = payload["rng_state"]
        return trainer


def parameter_digest(net):
    """Order-stable byte digest of all parameters; used to prove measurement purity."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def write_training_log(rows, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRAIN_LOG_COLUMNS)
        for row in rows:
            writer.writerow([
                row["t"], row["phase"], row["j"],
                repr(row["L_S"]), repr(row["L_adv"]), repr(row["L_T"]),
                repr(row["epsilon"]), repr(row["lr"]),
            ])


def write_interval_log(records, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "phase", "j", "epsilon_bar"])
        for r in records:
            writer.writerow([r.t, r.phase, r.j, repr(r.epsilon_bar)])


@dataclass
class RunResult:
    j_star: int
    history: list
    checkpoint_path: str
    train_log_path: str
    interval_log_path: str
    log_rows: list


def run_training(model_cfg, sched_cfg, train_cfg, source, target, out_dir,
                 resume_from=None):
    """Train to T_a, persisting the checkpoint and both CSV logs."""
    os.makedirs(out_dir, exist_ok=True)
    if resume_from is not None:
        trainer = Trainer.restore(resume_from, source, target)
    else:
        trainer = Trainer(model_cfg, sched_cfg, train_cfg, source, target)
    trainer.run()
    ckpt = os.path.join(out_dir, "checkpoint.pt")
    train_log = os.path.join(out_dir, "train_log.csv")
    interval_log = os.path.join(out_dir, "intervals.csv")
    trainer.save(ckpt)
    write_training_log(trainer.log_rows, train_log)
    write_interval_log(trainer.scheduler.interval_log, interval_log)
    return RunResult(
        j_star=trainer.scheduler.state.j_star,
        history=list(trainer.scheduler.state.history),
        checkpoint_path=ckpt,
        train_log_path=train_log,
        interval_log_path=interval_log,
        log_rows=trainer.log_rows,
    ), trainer


def epochs_to_iterations(epochs, source, target, batch_size):
    """Convert an epoch count to iterations via steps-per-epoch of the larger domain."""
    return int(epochs * steps_per_epoch(source, target, batch_size))
