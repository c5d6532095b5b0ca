"""Alternating generator/discriminator training loop."""

import io
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from app.config import ExperimentConfig
from app.errors import NonFiniteLossError
from app.logging_config import get_logger
from app.services.checkpoint import save_checkpoint
from app.services.core import Episode, RngStream
from app.services.episodes import EpisodeSampler, Phase, build_sampler
from app.services.evaluation import evaluate
from app.services.losses import (
    ForwardState,
    LossReport,
    feature_ground_truth,
    loss_d,
    loss_g,
)
from app.services.model import AMFormer, EpisodeBatch
from app.storage.base import StorageBackend
from app.utils.records import format_record

logger = get_logger("services.training")

HISTORY_PATH = "history.log"
CHECKPOINT_PATH = "checkpoint.pt"

# Stream keys spawned from the training seed.
TRAIN_STREAM = 1
VALIDATION_STREAM = 2


def poly_lr(base_lr: float, iteration: int, max_iterations: int, power: float = 0.9) -> float:
    """``base_lr * (1 - iteration / max_iterations) ** power``; 0 at the end."""
    progress = min(max(iteration / max_iterations, 0.0), 1.0)
    return base_lr * (1.0 - progress) ** power


def build_model(config: ExperimentConfig) -> AMFormer:
    """Construct a model with parameters drawn from ``config.train.seed``."""
    torch.manual_seed(config.train.seed)
    return AMFormer(config)


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    checkpoint_path: str = ""
    steps: int = 0


class Trainer:
    """Runs one discriminator phase then one generator step per batch.

    Args:
        config: Experiment configuration
        storage: Backend for checkpoints, history and failure dumps
        model: Model to train (built from the config seed when omitted)
        sampler: Training episode sampler
        workers: Threads that prepare the next batch's episodes
        prefix: Path prefix for every artifact this run writes
    """

    def __init__(
        self,
        config: ExperimentConfig,
        storage: StorageBackend,
        model: AMFormer | None = None,
        sampler: EpisodeSampler | None = None,
        workers: int = 1,
        prefix: str = "",
    ):
        self.config = config
        self.prefix = prefix
        self.train_cfg = config.train
        self.storage = storage
        self.model = model or build_model(config)
        self.sampler = sampler or build_sampler(config)
        self.val_sampler = EpisodeSampler(self.sampler.split, self.sampler.source)
        self.workers = workers

        t = self.train_cfg
        self.opt_g = torch.optim.AdamW(
            self.model.generator_parameters(), lr=t.lr, betas=t.betas, weight_decay=t.weight_decay
        )
        d_params = self.model.discriminator_parameters()
        self.opt_d = (
            torch.optim.AdamW(d_params, lr=t.lr, betas=t.betas, weight_decay=t.weight_decay)
            if d_params
            else None
        )
        self.max_iterations = t.epochs * t.iters_per_epoch
        self.iteration = 0

    # =========================================================================
    # STEPS
    # =========================================================================

    def set_lr(self, iteration: int) -> float:
        t = self.train_cfg
        lr = poly_lr(t.lr, iteration, self.max_iterations, t.poly_power)
        for optimizer in (self.opt_g, self.opt_d):
            if optimizer is None:
                continue
            for group in optimizer.param_groups:
                group["lr"] = lr
        return lr

    def forward(self, batch: EpisodeBatch) -> ForwardState:
        self.model.train()
        encoded = self.model.encode(batch)
        out = self.model.generate(encoded)
        gt_feat = feature_ground_truth(batch.query_masks, tuple(out.logits.shape[-2:]))
        return ForwardState(
            query_feats=encoded.query_feats,
            logits=out.logits,
            gt_feat=gt_feat,
            pyramid=out.pyramid,
        )

    def discriminator_step(self, state: ForwardState, batch: EpisodeBatch) -> LossReport:
        loss, report = loss_d(self.model.detail, state, self.train_cfg.lambda_div)
        self._check_finite(loss, report, state, batch, "discriminator")
        self.opt_d.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_d.step()
        return report

    def generator_step(self, state: ForwardState, batch: EpisodeBatch) -> LossReport:
        detail = self.model.detail
        if detail is not None:
            detail.requires_grad_(False)
        try:
            loss, report = loss_g(detail, state, self.train_cfg.lambda_kl)
            self._check_finite(loss, report, state, batch, "generator")
            self.opt_g.zero_grad(set_to_none=True)
            loss.backward()
            self.opt_g.step()
        finally:
            if detail is not None:
                detail.requires_grad_(True)
        return report

    def train_step(self, batch: EpisodeBatch) -> LossReport:
        """One batch: ``alternation`` discriminator steps then one generator step."""
        self.set_lr(self.iteration)
        state = self.forward(batch)

        d_reports = []
        if self.model.detail is not None:
            for _ in range(self.train_cfg.alternation):
                d_reports.append(self.discriminator_step(state, batch))
        g_report = self.generator_step(state, batch)

        report = LossReport(
            l_g_total=g_report.l_g_total,
            bce=g_report.bce,
            kl=g_report.kl,
            adv_g=g_report.adv_g,
        )
        if d_reports:
            last = d_reports[-1]
            report.l_d_total = last.l_d_total
            report.adv_d_real = last.adv_d_real
            report.adv_d_fake = last.adv_d_fake
            report.l_div = last.l_div
        self.iteration += 1
        logger.debug("Train step", extra={"iteration": self.iteration, **report.to_dict()})
        return report

    def _check_finite(
        self,
        loss: torch.Tensor,
        report: LossReport,
        state: ForwardState,
        batch: EpisodeBatch,
        phase: str,
    ) -> None:
        if torch.isfinite(loss) and report.is_finite():
            return
        path = f"{self.prefix}failures/step_{self.iteration:06d}_{phase}.npz"
        buffer = io.BytesIO()
        np.savez_compressed(
            buffer,
            logits=state.logits.detach().cpu().numpy(),
            gt_feat=state.gt_feat.cpu().numpy(),
            query_feats=state.query_feats.detach().cpu().numpy(),
            episode_seeds=np.asarray(batch.seeds, dtype=np.uint64),
        )
        location = self.storage.save(path, buffer.getvalue())
        logger.error(
            "Non-finite loss",
            extra={"iteration": self.iteration, "phase": phase, "dump": location},
        )
        raise NonFiniteLossError(
            f"non-finite {phase} loss at iteration {self.iteration}", dump_path=location
        )

    # =========================================================================
    # LOOP
    # =========================================================================

    def _sample_batch(self, rng: RngStream, pool: ThreadPoolExecutor | None) -> EpisodeBatch:
        t = self.train_cfg
        seeds = [rng.derive_seed() for _ in range(t.batch_size)]

        def build(seed: int) -> Episode:
            return self.sampler.episode_from_seed(seed, t.k_shot, Phase.TRAIN)

        episodes = list(pool.map(build, seeds)) if pool else [build(s) for s in seeds]
        return EpisodeBatch.from_episodes(episodes)

    def validation_episodes(self) -> list[Episode]:
        """Held-out episodes of training classes, identical for every epoch."""
        rng = RngStream(self.train_cfg.seed).spawn(VALIDATION_STREAM)
        return self.val_sampler.sample_many(
            self.train_cfg.val_episodes, self.train_cfg.k_shot, Phase.TRAIN, rng
        )

    def train(self) -> TrainResult:
        """Run all epochs; writes a checkpoint and a history record per epoch."""
        t = self.train_cfg
        rng = RngStream(t.seed).spawn(TRAIN_STREAM)
        val_episodes = self.validation_episodes()
        result = TrainResult()

        logger.info(
            "Starting training",
            extra={
                "epochs": t.epochs,
                "iters_per_epoch": t.iters_per_epoch,
                "batch_size": t.batch_size,
                "use_detail_miner": self.model.detail is not None,
            },
        )
        pool = ThreadPoolExecutor(max_workers=self.workers) if self.workers > 1 else None
        try:
            for epoch in range(1, t.epochs + 1):
                started = time.perf_counter()
                reports = [
                    self.train_step(self._sample_batch(rng, pool)) for _ in range(t.iters_per_epoch)
                ]
                epoch_report = LossReport.mean(reports)
                validation = evaluate(self.model, val_episodes, workers=self.workers)

                record = {
                    "epoch": epoch,
                    "iteration": self.iteration,
                    "lr": poly_lr(t.lr, self.iteration, self.max_iterations, t.poly_power),
                    **epoch_report.to_dict(),
                    "val_miou": validation.miou,
                    "val_fb_iou": validation.fb_iou,
                }
                self.storage.append_line(f"{self.prefix}{HISTORY_PATH}", format_record(record))
                result.history.append(record)

                epoch_path = f"{self.prefix}checkpoints/epoch_{epoch:03d}.pt"
                save_checkpoint(self.model, self.storage, epoch_path, epoch, t.seed)
                result.checkpoint_path = save_checkpoint(
                    self.model, self.storage, f"{self.prefix}{CHECKPOINT_PATH}", epoch, t.seed
                )
                logger.info(
                    "Epoch complete",
                    extra={
                        "epoch": epoch,
                        "l_g_total": round(epoch_report.l_g_total, 5),
                        "l_d_total": round(epoch_report.l_d_total, 5),
                        "val_miou": round(validation.miou, 2),
                        "duration_ms": round((time.perf_counter() - started) * 1000),
                    },
                )
        finally:
            if pool is not None:
                pool.shutdown()

        result.steps = self.iteration
        return result
