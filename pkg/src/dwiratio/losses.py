"""Loss and evaluation functions for DWI enhancement, with analytic gradients.

Covers pixel MSE, a frequency-domain loss on non-unitary 2D DFTs, the
DWI/b0 ratio distance used for validation, the log-ratio training loss, the
weighted composite of the three, and PSNR. Every loss returns its value
together with the exact gradient with respect to the predicted image.

The public functions take single 2D grids. Internal ``*_batched`` variants
accept (..., h, w) stacks and are what the training loop uses; both share
one implementation so there is a single source of truth per formula.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch

# Denominator/log guard of the ratio losses (the same epsilon in both).
RATIO_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite loss; defaults follow the training recipe."""

    w_mse: float = 15.0
    w_fft: float = 0.0025
    w_ratio_log: float = 0.01

    def __post_init__(self):
        for name in ("w_mse", "w_fft", "w_ratio_log"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class LossValue:
    """Scalar loss plus its gradient with respect to the predicted image."""

    value: float
    gradient: np.ndarray


@dataclass
class SlicePair:
    """A normalized 2D DWI slice with its paired b=0 reference slice."""

    dwi: np.ndarray
    b0: np.ndarray

    def __post_init__(self):
        self.dwi = np.asarray(self.dwi, dtype=float)
        self.b0 = np.asarray(self.b0, dtype=float)
        if self.dwi.ndim != 2 or self.dwi.shape != self.b0.shape:
            raise DimMismatch(f"dwi {self.dwi.shape} vs b0 {self.b0.shape}")
        if not (np.isfinite(self.dwi).all() and np.isfinite(self.b0).all()):
            raise ValueError("slice values must be finite")
        if np.any(self.b0 < 0):
            raise ValueError("b0 values must be >= 0")

    @property
    def dims(self) -> tuple[int, int]:
        return self.dwi.shape


def _as_grids(*grids: np.ndarray) -> tuple[np.ndarray, ...]:
    out = tuple(np.asarray(g, dtype=float) for g in grids)
    first = out[0]
    if first.ndim != 2:
        raise DimMismatch(f"expected 2D grids, got shape {first.shape}")
    for g in out[1:]:
        if g.shape != first.shape:
            raise DimMismatch(f"grid shapes differ: {first.shape} vs {g.shape}")
    return out


def _check_batch(*grids: np.ndarray) -> None:
    for g in grids[1:]:
        if g.shape != grids[0].shape:
            raise DimMismatch(f"grid shapes differ: {grids[0].shape} vs {g.shape}")


# --- pixel MSE ---------------------------------------------------------------

def mse_loss_batched(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    _check_batch(pred, gt)
    diff = pred - gt
    n = pred.shape[-1] * pred.shape[-2]
    values = np.mean(diff * diff, axis=(-2, -1))
    return values, (2.0 / n) * diff


def mse_loss(pred, gt) -> LossValue:
    """Mean squared pixel error; gradient 2*(pred - gt)/N."""
    pred, gt = _as_grids(pred, gt)
    values, grad = mse_loss_batched(pred, gt)
    return LossValue(float(values), grad)


# --- discrete Fourier transform ----------------------------------------------

def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=int)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


def _dft_axis0(x: np.ndarray) -> np.ndarray:
    """Forward non-unitary DFT along axis 0 of a complex array.

    Radix-2 decimation in time when the length is a power of two, direct
    matrix transform otherwise (grids here are small).
    """
    n = x.shape[0]
    if n == 1:
        return x.copy()
    if n & (n - 1) == 0:
        trail = x.shape[1:]
        y = x[_bit_reverse_indices(n)]
        m = 1
        while m < n:
            tw = np.exp(-1j * np.pi * np.arange(m) / m)
            tw = tw.reshape((1, m) + (1,) * len(trail))
            y = y.reshape((n // (2 * m), 2, m) + trail)
            a = y[:, 0]
            b = y[:, 1] * tw
            y = np.concatenate((a + b, a - b), axis=1)
            m *= 2
        return y.reshape((n,) + trail)
    k = np.arange(n)
    fourier = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return np.tensordot(fourier, x, axes=(1, 0))


def dft2d(img: np.ndarray) -> np.ndarray:
    """Non-unitary forward 2D DFT over the last two axes.

    X[u, v] = sum_mn x[m, n] * exp(-2*pi*i*(u*m/M + v*n/N)).
    """
    x = np.asarray(img, dtype=complex)
    x = np.moveaxis(_dft_axis0(np.moveaxis(x, -2, 0)), 0, -2)
    x = np.moveaxis(_dft_axis0(np.moveaxis(x, -1, 0)), 0, -1)
    return x


def idft2d(spec: np.ndarray) -> np.ndarray:
    """Inverse of dft2d, via the conjugation identity."""
    spec = np.asarray(spec, dtype=complex)
    n = spec.shape[-1] * spec.shape[-2]
    return np.conj(dft2d(np.conj(spec))) / n


# --- frequency-domain loss -----------------------------------------------------

def fft_loss_batched(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    _check_batch(pred, gt)
    err = dft2d(pred) - dft2d(gt)
    values = np.mean(err.real * err.real + err.imag * err.imag, axis=(-2, -1))
    # adjoint of the forward transform is MN times the inverse transform
    grad = 2.0 * idft2d(err).real
    return values, grad


def fft_loss(pred, gt) -> LossValue:
    """Mean squared complex difference of the 2D spectra.

    The gradient is computed through the adjoint transform; Parseval's
    identity (value = M*N * mse) serves as an independent check, not as the
    implementation.
    """
    pred, gt = _as_grids(pred, gt)
    values, grad = fft_loss_batched(pred, gt)
    return LossValue(float(values), grad)


# --- ratio metrics -------------------------------------------------------------

def ratio_distance_batched(pred_dwi, gt_dwi, gt_b0) -> np.ndarray:
    _check_batch(pred_dwi, gt_dwi, gt_b0)
    den = gt_b0 + RATIO_EPS
    diff = pred_dwi / den - gt_dwi / den
    return np.mean(diff * diff, axis=(-2, -1))


def ratio_distance(pred_dwi, gt_dwi, gt_b0) -> float:
    """d_ratio: mean squared error between predicted and true DWI/b0 ratios."""
    pred_dwi, gt_dwi, gt_b0 = _as_grids(pred_dwi, gt_dwi, gt_b0)
    return float(ratio_distance_batched(pred_dwi, gt_dwi, gt_b0))


def ratio_log_loss_batched(pred_dwi, gt_dwi, gt_b0) -> tuple[np.ndarray, np.ndarray]:
    _check_batch(pred_dwi, gt_dwi, gt_b0)
    n = pred_dwi.shape[-1] * pred_dwi.shape[-2]
    den = gt_b0 + RATIO_EPS
    raw_pred = pred_dwi / den
    log_diff = np.log(np.maximum(raw_pred, RATIO_EPS)) - np.log(
        np.maximum(gt_dwi / den, RATIO_EPS)
    )
    values = np.mean(log_diff * log_diff, axis=(-2, -1))
    unclamped = raw_pred >= RATIO_EPS
    grad = np.zeros_like(log_diff)
    np.divide(2.0 * log_diff, n * pred_dwi, out=grad, where=unclamped)
    return values, grad


def ratio_log_loss(pred_dwi, gt_dwi, gt_b0) -> LossValue:
    """Mean squared difference of log DWI/b0 ratios.

    Ratios are clamped below at the shared epsilon before the log; the
    gradient is zero wherever the prediction's clamp is active (subgradient
    choice for non-positive predictions).
    """
    pred_dwi, gt_dwi, gt_b0 = _as_grids(pred_dwi, gt_dwi, gt_b0)
    values, grad = ratio_log_loss_batched(pred_dwi, gt_dwi, gt_b0)
    return LossValue(float(values), grad)


# --- composite -----------------------------------------------------------------

def total_loss(pred, gt_dwi, gt_b0, weights: LossWeights = LossWeights()) -> LossValue:
    """Weighted sum of MSE, frequency, and ratio-log losses.

    With w_ratio_log = 0 this reduces to the baseline objective and is
    independent of gt_b0.
    """
    pred, gt_dwi, gt_b0 = _as_grids(pred, gt_dwi, gt_b0)
    mse = mse_loss(pred, gt_dwi)
    fft = fft_loss(pred, gt_dwi)
    rlog = ratio_log_loss(pred, gt_dwi, gt_b0)
    value = weights.w_mse * mse.value + weights.w_fft * fft.value + weights.w_ratio_log * rlog.value
    grad = (
        weights.w_mse * mse.gradient
        + weights.w_fft * fft.gradient
        + weights.w_ratio_log * rlog.gradient
    )
    return LossValue(value, grad)


def psnr(pred, gt) -> float:
    """Peak signal-to-noise ratio in dB for the normalized [0, 1] range.

    Returns +inf when the images are identical.
    """
    pred, gt = _as_grids(pred, gt)
    return float(psnr_batched(pred, gt))


def psnr_batched(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    _check_batch(pred, gt)
    diff = pred - gt
    mse = np.mean(diff * diff, axis=(-2, -1))
    shape = np.shape(mse)
    mse = np.atleast_1d(mse)
    out = np.full(mse.shape, np.inf)
    nonzero = mse > 0
    out[nonzero] = 10.0 * np.log10(1.0 / mse[nonzero])
    return out.reshape(shape)
