"""Diffusion signal model, tensor fitting, and derived scalar metrics.

Implements the single-shell Gaussian model S = S0 * exp(-b * g'Dg), its
log-linear least-squares inversion, a cyclic-Jacobi eigensolver for the
symmetric 3x3 tensor, and the standard scalar maps (MD, FA, ADC).

All functions are pure; units are s/mm^2 for b-values and mm^2/s for
diffusivities.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import LengthMismatch, NonPositiveInput, NonPositiveS0, RankDeficientScheme

# Floor applied to signals before the log in fitting; keeps noisy voxels finite.
LOG_SIGNAL_FLOOR = 1e-12

# Component order used everywhere a tensor is flattened to 6 values.
TENSOR_COMPONENTS = ("dxx", "dyy", "dzz", "dxy", "dxz", "dyz")


@dataclass(frozen=True)
class UnitDirection:
    """A unit-length 3-vector; inputs are normalized at construction."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        norm = math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)
        if not math.isfinite(norm) or norm == 0.0:
            raise ValueError("direction must be a finite, nonzero vector")
        object.__setattr__(self, "x", self.x / norm)
        object.__setattr__(self, "y", self.y / norm)
        object.__setattr__(self, "z", self.z / norm)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @classmethod
    def from_array(cls, v) -> "UnitDirection":
        v = np.asarray(v, dtype=float)
        return cls(float(v[0]), float(v[1]), float(v[2]))

    def dot(self, other: "UnitDirection") -> float:
        return self.x * other.x + self.y * other.y + self.z * other.z


@dataclass(frozen=True)
class DiffusionTensor:
    """Symmetric 3x3 diffusion tensor stored as its 6 unique components."""

    dxx: float
    dyy: float
    dzz: float
    dxy: float = 0.0
    dxz: float = 0.0
    dyz: float = 0.0

    def as_matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.dxx, self.dxy, self.dxz],
                [self.dxy, self.dyy, self.dyz],
                [self.dxz, self.dyz, self.dzz],
            ]
        )

    def as_vector(self) -> np.ndarray:
        """Components in the canonical (dxx, dyy, dzz, dxy, dxz, dyz) order."""
        return np.array([self.dxx, self.dyy, self.dzz, self.dxy, self.dxz, self.dyz])

    @classmethod
    def from_vector(cls, d) -> "DiffusionTensor":
        d = np.asarray(d, dtype=float)
        return cls(*(float(v) for v in d[:6]))

    @classmethod
    def from_matrix(cls, m) -> "DiffusionTensor":
        m = np.asarray(m, dtype=float)
        return cls(
            float(m[0, 0]),
            float(m[1, 1]),
            float(m[2, 2]),
            float(0.5 * (m[0, 1] + m[1, 0])),
            float(0.5 * (m[0, 2] + m[2, 0])),
            float(0.5 * (m[1, 2] + m[2, 1])),
        )

    @classmethod
    def isotropic(cls, d: float) -> "DiffusionTensor":
        return cls(d, d, d)

    def is_positive_semidefinite(self, tol: float = 1e-12) -> bool:
        eig = eigendecompose_sym3(self)
        return eig.lambda3 >= -tol


class GradientScheme:
    """Ordered acquisition scheme of (b-value, unit direction) pairs."""

    def __init__(self, entries: Sequence[tuple[float, UnitDirection]]):
        entries = tuple((float(b), g) for b, g in entries)
        if len(entries) == 0:
            raise ValueError("scheme needs at least one entry")
        for b, _ in entries:
            if not (b >= 0.0):
                raise ValueError(f"b-values must be >= 0, got {b}")
        self._entries = entries
        self._bvals = np.array([b for b, _ in entries])
        self._bvecs = np.array([[g.x, g.y, g.z] for _, g in entries])

    @property
    def bvals(self) -> np.ndarray:
        return self._bvals

    @property
    def bvecs(self) -> np.ndarray:
        """Directions as an (n, 3) array, row i pairing with bvals[i]."""
        return self._bvecs

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[tuple[float, UnitDirection]]:
        return iter(self._entries)

    def __getitem__(self, i: int) -> tuple[float, UnitDirection]:
        return self._entries[i]


@dataclass(frozen=True)
class EigenSystem:
    """Sorted eigendecomposition of a diffusion tensor (lambda1 >= lambda2 >= lambda3)."""

    lambda1: float
    lambda2: float
    lambda3: float
    v1: UnitDirection
    v2: UnitDirection
    v3: UnitDirection

    def eigenvalues(self) -> np.ndarray:
        return np.array([self.lambda1, self.lambda2, self.lambda3])


def predict_attenuation(tensor: DiffusionTensor, b: float, g: UnitDirection) -> float:
    """Signal attenuation S/S0 = exp(-b * g'Dg) for one encoding."""
    quad = (
        tensor.dxx * g.x * g.x
        + tensor.dyy * g.y * g.y
        + tensor.dzz * g.z * g.z
        + 2.0 * (tensor.dxy * g.x * g.y + tensor.dxz * g.x * g.z + tensor.dyz * g.y * g.z)
    )
    return math.exp(-b * quad)


def synthesize_signals(tensor: DiffusionTensor, s0: float, scheme: GradientScheme) -> np.ndarray:
    """Noise-free signals s0 * exp(-b_i * g_i'Dg_i) over the scheme."""
    return s0 * np.exp(design_matrix(scheme) @ tensor.as_vector())


def design_matrix(scheme: GradientScheme) -> np.ndarray:
    """Log-linear design matrix A with row_i . d = -b_i * g_i'Dg_i.

    Columns follow the (dxx, dyy, dzz, dxy, dxz, dyz) component order.
    """
    b = scheme.bvals
    g = scheme.bvecs
    gx, gy, gz = g[:, 0], g[:, 1], g[:, 2]
    cols = [gx * gx, gy * gy, gz * gz, 2 * gx * gy, 2 * gx * gz, 2 * gy * gz]
    return -b[:, None] * np.stack(cols, axis=1)


def _check_scheme_rank(A: np.ndarray, bvals: np.ndarray) -> None:
    n_diffusion = int(np.count_nonzero(bvals > 0))
    if n_diffusion < 6:
        raise RankDeficientScheme(
            f"need >= 6 entries with b > 0, scheme has {n_diffusion}"
        )
    if np.linalg.matrix_rank(A) < 6:
        raise RankDeficientScheme("design matrix rank < 6; directions too degenerate")


def _solve_ols(A: np.ndarray, y: np.ndarray) -> np.ndarray:
    # Ordinary least squares via reduced QR; y may be (n,) or (n, k).
    q, r = np.linalg.qr(A)
    return np.linalg.solve(r, q.T @ y)


def fit_tensor(signals, s0: float, scheme: GradientScheme) -> DiffusionTensor:
    """Fit a diffusion tensor by least squares on log-attenuations.

    Solves A d = log(max(signals, floor) / s0) where A is the design matrix;
    a noiseless forward synthesis round-trips to the generating tensor.
    """
    signals = np.asarray(signals, dtype=float)
    if signals.ndim != 1 or signals.shape[0] != len(scheme):
        raise LengthMismatch(
            f"signal vector of shape {signals.shape} for a {len(scheme)}-entry scheme"
        )
    if not (s0 > 0):
        raise NonPositiveS0(f"s0 must be > 0, got {s0}")
    A = design_matrix(scheme)
    _check_scheme_rank(A, scheme.bvals)
    y = np.log(np.maximum(signals, LOG_SIGNAL_FLOOR) / s0)
    return DiffusionTensor.from_vector(_solve_ols(A, y))


def fit_tensor_volume(signals: np.ndarray, s0: np.ndarray, scheme: GradientScheme) -> np.ndarray:
    """Voxel-wise tensor fit over a volume.

    signals has shape (nx, ny, nz, n_meas) ordered like the scheme; s0 has
    shape (nx, ny, nz). Returns (nx, ny, nz, 6) component volumes. Voxels
    with s0 <= 0 are left as zero tensors.
    """
    signals = np.asarray(signals, dtype=float)
    s0 = np.asarray(s0, dtype=float)
    if signals.shape[-1] != len(scheme) or signals.shape[:-1] != s0.shape:
        raise LengthMismatch(
            f"signals {signals.shape} incompatible with s0 {s0.shape} "
            f"and {len(scheme)}-entry scheme"
        )
    A = design_matrix(scheme)
    _check_scheme_rank(A, scheme.bvals)
    flat = signals.reshape(-1, len(scheme))
    s0_flat = s0.reshape(-1)
    valid = s0_flat > 0
    out = np.zeros((flat.shape[0], 6))
    if np.any(valid):
        y = np.log(np.maximum(flat[valid], LOG_SIGNAL_FLOOR) / s0_flat[valid, None])
        out[valid] = _solve_ols(A, y.T).T
    return out.reshape(*s0.shape, 6)


def _jacobi_sym3(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi sweeps on a symmetric 3x3 matrix.

    Returns (eigenvalues, eigenvectors-as-columns), unsorted. Converges when
    the off-diagonal Frobenius norm drops below 1e-14 (50-sweep cap).
    """
    a = np.array(m, dtype=float)
    v = np.eye(3)
    for _ in range(50):
        off = math.sqrt(2.0 * (a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2))
        if off < 1e-14:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[p, q]
            if apq == 0.0:
                continue
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
            c = 1.0 / math.sqrt(t * t + 1.0)
            s = t * c
            rot = np.eye(3)
            rot[p, p] = rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            a = rot.T @ a @ rot
            # the rotation annihilates this element by construction
            a[p, q] = a[q, p] = 0.0
            v = v @ rot
    return np.diag(a).copy(), v


def eigendecompose_sym3(tensor: DiffusionTensor) -> EigenSystem:
    """Eigendecomposition with descending eigenvalues and a fixed sign convention."""
    evals, evecs = _jacobi_sym3(tensor.as_matrix())
    order = np.argsort(-evals, kind="stable")
    evals = evals[order]
    evecs = evecs[:, order]
    vecs = []
    for k in range(3):
        vec = evecs[:, k]
        for comp in vec:
            if abs(comp) > 1e-12:
                if comp < 0:
                    vec = -vec
                break
        vecs.append(UnitDirection.from_array(vec))
    return EigenSystem(float(evals[0]), float(evals[1]), float(evals[2]), *vecs)


def mean_diffusivity(eig: EigenSystem) -> float:
    """MD = (lambda1 + lambda2 + lambda3) / 3, equal to trace(D)/3."""
    return (eig.lambda1 + eig.lambda2 + eig.lambda3) / 3.0


def fractional_anisotropy(eig: EigenSystem) -> float:
    """FA in [0, 1]; 0 for the degenerate all-zero spectrum.

    FA = sqrt(1/2) * sqrt(sum of squared eigenvalue differences) / ||lambda||.
    """
    l1, l2, l3 = eig.lambda1, eig.lambda2, eig.lambda3
    denom = l1 * l1 + l2 * l2 + l3 * l3
    if denom == 0.0:
        return 0.0
    num = (l1 - l2) ** 2 + (l2 - l3) ** 2 + (l3 - l1) ** 2
    # mathematical range is [0, 1]; the min() guards roundoff at stick tensors
    return min(math.sqrt(0.5 * num / denom), 1.0)


def adc(s: float, s0: float, b: float) -> float:
    """Apparent diffusion coefficient -(1/b) * log(s/s0) for one direction."""
    if not (s > 0 and s0 > 0 and b > 0):
        raise NonPositiveInput(f"adc requires s, s0, b > 0; got s={s}, s0={s0}, b={b}")
    return -math.log(s / s0) / b
