"""Training loop, validation metrics, and the two-arm comparison harness.

Trains the residual refiner with Adam under the composite loss, evaluating
PSNR and the DWI/b0 ratio distance over the full validation set at a fixed
step interval. ``compare_arms`` runs the baseline objective (ratio-log weight
zero) against the full objective with identical initialization and data
order per seed, isolating the extra loss term as the only variable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import EmptyDataset
from .losses import (
    LossWeights,
    fft_loss_batched,
    mse_loss_batched,
    psnr_batched,
    ratio_distance_batched,
    ratio_log_loss_batched,
)
from .network import AdamState, ConvNetParams, adam_step, backward, forward, init_network
from .phantom import DatasetSplits, TrainingSample

BASELINE_RATIO_WEIGHT = 0.0


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr0: float = 1e-4
    lr_halving_period_epochs: int = 10
    epochs: int = 40
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    deterministic_mode: bool = True
    validation_interval: int = 50

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if self.lr_halving_period_epochs < 1:
            raise ValueError("lr_halving_period_epochs must be >= 1")
        if self.validation_interval < 1:
            raise ValueError("validation_interval must be >= 1")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step-decayed learning rate: lr0 * 0.5 ** floor(epoch / period)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * 0.5 ** (epoch // cfg.lr_halving_period_epochs)


@dataclass
class ValidationRecord:
    """One row of the training curve (the CSV schema follows this order)."""

    step: int
    epoch: int
    lr: float
    loss_total: float
    loss_mse: float
    loss_fft: float
    loss_ratio_log: float
    val_psnr: float
    val_d_ratio: float


CSV_HEADER = "step,epoch,lr,loss_total,loss_mse,loss_fft,loss_ratio_log,val_psnr,val_d_ratio"


@dataclass
class TrainingLog:
    """Validation-point records plus the raw per-step training losses."""

    records: list[ValidationRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    def final(self) -> ValidationRecord:
        return self.records[-1]

    def best_psnr(self) -> float:
        return max(r.val_psnr for r in self.records)

    def best_d_ratio(self) -> float:
        return min(r.val_d_ratio for r in self.records)

    def converged_d_ratio(self, tail: int = 5) -> float:
        """Mean d_ratio over the last ``tail`` validation points."""
        values = [r.val_d_ratio for r in self.records[-tail:]]
        return float(np.mean(values))


def _stack(samples: Sequence[TrainingSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    inputs = np.stack([s.model_input for s in samples])
    dwis = np.stack([s.gt_dwi for s in samples])
    b0s = np.stack([s.gt_b0 for s in samples])
    return inputs, dwis, b0s


def evaluate(params: ConvNetParams, validation: Sequence[TrainingSample],
             chunk_size: int = 256) -> tuple[float, float]:
    """Mean PSNR (dB) and mean d_ratio of the refiner over a validation set."""
    if len(validation) == 0:
        raise EmptyDataset("validation set is empty")
    inputs, dwis, b0s = _stack(validation)
    psnrs = []
    dratios = []
    for lo in range(0, len(validation), chunk_size):
        sl = slice(lo, lo + chunk_size)
        pred, _ = forward(params, inputs[sl])
        psnrs.append(psnr_batched(pred, dwis[sl]))
        dratios.append(ratio_distance_batched(pred, dwis[sl], b0s[sl]))
    return float(np.mean(np.concatenate(psnrs))), float(np.mean(np.concatenate(dratios)))


def _batch_losses(pred, gt_dwi, gt_b0, weights: LossWeights):
    """Per-batch mean loss components and the gradient of their weighted sum."""
    n = pred.shape[0]
    mse_v, mse_g = mse_loss_batched(pred, gt_dwi)
    fft_v, fft_g = fft_loss_batched(pred, gt_dwi)
    rlog_v, rlog_g = ratio_log_loss_batched(pred, gt_dwi, gt_b0)
    components = (float(np.mean(mse_v)), float(np.mean(fft_v)), float(np.mean(rlog_v)))
    total = (
        weights.w_mse * components[0]
        + weights.w_fft * components[1]
        + weights.w_ratio_log * components[2]
    )
    grad = (weights.w_mse * mse_g + weights.w_fft * fft_g
            + weights.w_ratio_log * rlog_g) / n
    return total, components, grad


def train(dataset: DatasetSplits, cfg: TrainConfig) -> tuple[ConvNetParams, TrainingLog]:
    """Minibatch Adam training with periodic full-validation evaluation.

    Shuffling, initialization, and reduction order are fixed functions of
    cfg.seed, so identical (dataset, cfg) pairs reproduce the log exactly.
    Logged loss components are means over the batches since the previous
    validation point.
    """
    if len(dataset.train) == 0:
        raise EmptyDataset("training set is empty")
    if len(dataset.validation) == 0:
        raise EmptyDataset("validation set is empty")
    inputs, dwis, b0s = _stack(dataset.train)
    n_train = len(dataset.train)

    params = init_network(cfg.seed)
    state = AdamState.init_like(params)
    shuffle_rng = np.random.Generator(np.random.Philox(key=int(cfg.seed)))
    log = TrainingLog()
    window: list[tuple[float, float, float, float]] = []
    step = 0
    total_steps = cfg.epochs * math.ceil(n_train / cfg.batch_size)

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = shuffle_rng.permutation(n_train)
        for lo in range(0, n_train, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            pred, cache = forward(params, inputs[idx])
            total, comps, pred_grad = _batch_losses(pred, dwis[idx], b0s[idx], cfg.weights)
            grads, _ = backward(params, cache, pred_grad)
            params, state = adam_step(params, grads, state, lr)
            step += 1
            log.step_losses.append(total)
            window.append((total, *comps))
            if step % cfg.validation_interval == 0 or step == total_steps:
                val_psnr, val_d_ratio = evaluate(params, dataset.validation)
                means = np.mean(window, axis=0)
                log.records.append(
                    ValidationRecord(
                        step=step,
                        epoch=epoch,
                        lr=lr,
                        loss_total=float(means[0]),
                        loss_mse=float(means[1]),
                        loss_fft=float(means[2]),
                        loss_ratio_log=float(means[3]),
                        val_psnr=val_psnr,
                        val_d_ratio=val_d_ratio,
                    )
                )
                window = []
    return params, log


@dataclass
class ArmResult:
    """Summary of one trained arm for one seed."""

    seed: int
    final_psnr: float
    best_psnr: float
    final_d_ratio: float
    best_d_ratio: float
    converged_d_ratio: float
    log: TrainingLog

    @classmethod
    def from_log(cls, seed: int, log: TrainingLog) -> "ArmResult":
        final = log.final()
        return cls(
            seed=seed,
            final_psnr=final.val_psnr,
            best_psnr=log.best_psnr(),
            final_d_ratio=final.val_d_ratio,
            best_d_ratio=log.best_d_ratio(),
            converged_d_ratio=log.converged_d_ratio(),
            log=log,
        )


@dataclass
class ComparisonReport:
    """Side-by-side results of the baseline and ratio-loss arms."""

    seeds: list[int]
    baseline: list[ArmResult]
    ratio: list[ArmResult]
    baseline_weights: LossWeights
    ratio_weights: LossWeights

    def d_ratio_diff_signs(self) -> list[int]:
        """Sign of (ratio arm - baseline) converged d_ratio per seed; -1 is a win."""
        out = []
        for b, r in zip(self.baseline, self.ratio):
            diff = r.converged_d_ratio - b.converged_d_ratio
            out.append(0 if diff == 0 else int(math.copysign(1, diff)))
        return out

    def summary_dict(self) -> dict:
        def arm_entry(a: ArmResult) -> dict:
            return {
                "seed": a.seed,
                "final_psnr": a.final_psnr,
                "best_psnr": a.best_psnr,
                "final_d_ratio": a.final_d_ratio,
                "best_d_ratio": a.best_d_ratio,
                "converged_d_ratio": a.converged_d_ratio,
            }

        signs = self.d_ratio_diff_signs()
        return {
            "seeds": self.seeds,
            "baseline_weights": vars(self.baseline_weights),
            "ratio_weights": vars(self.ratio_weights),
            "baseline": [arm_entry(a) for a in self.baseline],
            "ratio": [arm_entry(a) for a in self.ratio],
            "d_ratio_diff_signs": signs,
            "ratio_arm_wins": sum(1 for s in signs if s < 0),
        }


def compare_arms(dataset: DatasetSplits, cfg: TrainConfig,
                 seeds: Sequence[int]) -> ComparisonReport:
    """Train baseline (ratio-log weight 0) and ratio arms for each seed.

    Both arms of a seed share the same initialization and shuffle stream,
    so the loss weights are the only difference between them.
    """
    if len(seeds) == 0:
        raise ValueError("need at least one seed")
    base_w = replace(cfg.weights, w_ratio_log=BASELINE_RATIO_WEIGHT)
    baseline = []
    ratio = []
    for seed in seeds:
        for weights, bucket in ((base_w, baseline), (cfg.weights, ratio)):
            arm_cfg = replace(cfg, seed=int(seed), weights=weights)
            _, log = train(dataset, arm_cfg)
            bucket.append(ArmResult.from_log(int(seed), log))
    return ComparisonReport(
        seeds=[int(s) for s in seeds],
        baseline=baseline,
        ratio=ratio,
        baseline_weights=base_w,
        ratio_weights=cfg.weights,
    )
