"""Synthetic tensor-field phantoms, DWI rendering, and the slice dataset.

A phantom is a brain-like arrangement of tissue classes on a voxel grid:
CSF-everywhere background, a gray-matter annulus, a tangentially oriented
white-matter ring inside it, and two straight crossing fiber bundles through
the interior. Volumes are rendered through the forward signal model with
optional Gaussian or Rician noise, anisotropically downsampled in-plane, and
cut into normalized 2D training triples.

All randomness comes from numpy's Philox counter-based generator so that a
(spec, seed) pair reproduces bit-identical data on any platform.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateB0, InvalidSpec, InvalidSplit, NonDivisibleDim
from .losses import SlicePair
from .tensor import GradientScheme, UnitDirection

# Tissue class ids stored in TensorField.tissue_label.
CSF, GRAY, RING, BUNDLE_A, BUNDLE_B = 0, 1, 2, 3, 4

# Fraction of the in-plane b0 intensity distribution used as the scale.
NORMALIZATION_PERCENTILE = 99.5

NOISE_MODELS = ("none", "gaussian", "rician")

DOWNSAMPLE_METHODS = ("box", "stride")


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed)))


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and tissue parameters of a synthetic phantom."""

    dims: tuple[int, int, int] = (24, 24, 16)
    csf_diffusivity: float = 3.0e-3
    gray_diffusivity: float = 0.8e-3
    fiber_axial_diffusivity: float = 1.7e-3
    fiber_radial_diffusivity: float = 0.3e-3
    ring_radius_fraction: float = 0.52
    bundle_width_voxels: float = 3.0
    annulus_thickness_voxels: float = 3.0
    crossing_angles_deg: tuple[float, float] = (30.0, 120.0)
    s0_csf: float = 1.0
    s0_gray: float = 0.75
    s0_fiber: float = 0.6

    def __post_init__(self):
        nx, ny, nz = self.dims
        if nx < 16 or ny < 16 or nz < 4:
            raise InvalidSpec(f"dims must be >= (16, 16, 4), got {self.dims}")
        diffs = (
            self.csf_diffusivity,
            self.gray_diffusivity,
            self.fiber_axial_diffusivity,
            self.fiber_radial_diffusivity,
        )
        for d in diffs:
            if not (0 < d <= 4e-3):
                raise InvalidSpec(f"diffusivities must be in (0, 4e-3], got {d}")
        if self.fiber_axial_diffusivity < self.fiber_radial_diffusivity:
            raise InvalidSpec("axial diffusivity must be >= radial")
        if not (0 < self.ring_radius_fraction < 1):
            raise InvalidSpec("ring_radius_fraction must be in (0, 1)")
        if self.bundle_width_voxels <= 0 or self.annulus_thickness_voxels <= 0:
            raise InvalidSpec("widths must be positive")
        for s0 in (self.s0_csf, self.s0_gray, self.s0_fiber):
            if s0 <= 0:
                raise InvalidSpec("s0 levels must be positive")


@dataclass
class TensorField:
    """Ground-truth tensor volume: (nx, ny, nz, 6) components plus s0 and labels."""

    tensors: np.ndarray
    s0: np.ndarray
    tissue_label: np.ndarray

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.s0.shape


@dataclass(frozen=True)
class AcquisitionSpec:
    """Scheme plus noise model for rendering a phantom into DWI volumes."""

    scheme: GradientScheme
    noise_model: str = "rician"
    noise_sigma: float = 0.03  # fraction of the mean s0
    b0_repeats: int = 5

    def __post_init__(self):
        if self.noise_model not in NOISE_MODELS:
            raise InvalidSpec(f"noise_model must be one of {NOISE_MODELS}")
        if self.noise_sigma < 0:
            raise InvalidSpec("noise_sigma must be >= 0")
        if self.b0_repeats < 1:
            raise InvalidSpec("b0_repeats must be >= 1")


@dataclass
class DwiVolumeSet:
    """Rendered volumes: averaged b0 plus one DWI volume per b>0 scheme entry."""

    b0: np.ndarray
    dwis: list[np.ndarray]
    acquisition: AcquisitionSpec
    seed: int


def make_gradient_scheme(n_directions: int = 45, b_value: float = 1000.0, seed: int = 0,
                         iterations: int = 200) -> GradientScheme:
    """Evenly spread diffusion directions by antipodal electrostatic repulsion.

    Deterministic for a given seed; the single-shell result is well spread
    enough that the tensor design matrix has full rank for n >= 6.
    """
    if n_directions < 1:
        raise ValueError("need at least one direction")
    rng = _rng(seed)
    v = rng.standard_normal((n_directions, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    step = 0.1
    for it in range(iterations):
        # pairwise forces from both hemispheres (directions are axes: g ~ -g)
        diff_p = v[:, None, :] - v[None, :, :]
        diff_m = v[:, None, :] + v[None, :, :]
        dp = np.linalg.norm(diff_p, axis=2) ** 3
        dm = np.linalg.norm(diff_m, axis=2) ** 3
        np.fill_diagonal(dp, np.inf)
        np.fill_diagonal(dm, np.inf)
        force = (diff_p / dp[:, :, None]).sum(axis=1) + (diff_m / dm[:, :, None]).sum(axis=1)
        # keep the move tangential so the step size stays meaningful
        force -= (force * v).sum(axis=1, keepdims=True) * v
        v += step * force / max(n_directions, 1)
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        step *= 0.98
    return GradientScheme([(b_value, UnitDirection.from_array(d)) for d in v])


def _tangential_tensor(axial: float, radial: float, direction: np.ndarray) -> np.ndarray:
    """Components (dxx, dyy, dzz, dxy, dxz, dyz) of axial*tt' + radial*(I - tt')."""
    t = direction / np.linalg.norm(direction)
    outer = np.outer(t, t)
    m = axial * outer + radial * (np.eye(3) - outer)
    return np.array([m[0, 0], m[1, 1], m[2, 2], m[0, 1], m[0, 2], m[1, 2]])


def _smooth_field(dims: tuple[int, int, int], rng: np.random.Generator) -> np.ndarray:
    """Low-frequency random field scaled to max |value| = 1."""
    nx, ny, nz = dims
    x = np.arange(nx)[:, None, None] / nx
    y = np.arange(ny)[None, :, None] / ny
    z = np.arange(nz)[None, None, :] / nz
    out = np.zeros(dims)
    for _ in range(4):
        fx, fy, fz = rng.integers(0, 3, size=3)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.3, 1.0)
        out += amp * np.cos(2 * np.pi * (fx * x + fy * y + fz * z) + phase)
    peak = np.max(np.abs(out))
    if peak > 0:
        out /= peak
    return out


def generate_phantom(spec: PhantomSpec, seed: int) -> TensorField:
    """Build the class-labeled tensor field; deterministic for (spec, seed)."""
    nx, ny, nz = spec.dims
    cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0
    xs = np.arange(nx)[:, None] - cx
    ys = np.arange(ny)[None, :] - cy
    r = np.hypot(xs, ys)

    ring_radius = spec.ring_radius_fraction * min(nx, ny) / 2.0
    half_w = spec.bundle_width_voxels / 2.0

    labels_2d = np.full((nx, ny), CSF, dtype=np.int32)
    on_ring = np.abs(r - ring_radius) <= half_w
    on_annulus = (r > ring_radius + half_w) & (
        r <= ring_radius + half_w + spec.annulus_thickness_voxels
    )
    labels_2d[on_annulus] = GRAY
    labels_2d[on_ring] = RING

    interior = r < ring_radius - half_w
    bundle_dirs = []
    for label, angle_deg in zip((BUNDLE_A, BUNDLE_B), spec.crossing_angles_deg):
        theta = math.radians(angle_deg)
        u = np.array([math.cos(theta), math.sin(theta), 0.0])
        # in-plane distance from the line through the center along u
        dist = np.abs(xs * u[1] - ys * u[0])
        labels_2d[interior & (dist <= half_w)] = label
        bundle_dirs.append(u)

    tensors_2d = np.empty((nx, ny, 6))
    tensors_2d[:] = [spec.csf_diffusivity] * 3 + [0.0, 0.0, 0.0]
    tensors_2d[labels_2d == GRAY] = [spec.gray_diffusivity] * 3 + [0.0, 0.0, 0.0]
    axial, radial = spec.fiber_axial_diffusivity, spec.fiber_radial_diffusivity
    ring_idx = np.argwhere(labels_2d == RING)
    for i, j in ring_idx:
        tangent = np.array([-(ys[0, j]), xs[i, 0], 0.0])
        tensors_2d[i, j] = _tangential_tensor(axial, radial, tangent)
    for label, u in zip((BUNDLE_A, BUNDLE_B), bundle_dirs):
        tensors_2d[labels_2d == label] = _tangential_tensor(axial, radial, u)

    s0_levels = {CSF: spec.s0_csf, GRAY: spec.s0_gray}
    s0_2d = np.full((nx, ny), spec.s0_fiber)
    for label, level in s0_levels.items():
        s0_2d[labels_2d == label] = level

    labels = np.repeat(labels_2d[:, :, None], nz, axis=2)
    tensors = np.repeat(tensors_2d[:, :, None, :], nz, axis=2)
    rng = _rng(seed)
    variation = 1.0 + 0.1 * _smooth_field(spec.dims, rng)
    s0 = np.repeat(s0_2d[:, :, None], nz, axis=2) * variation
    return TensorField(tensors=tensors, s0=s0, tissue_label=labels)


def attenuation_exponents(tensors: np.ndarray, scheme: GradientScheme) -> np.ndarray:
    """b_i * g_i'Dg_i per voxel and scheme entry; shape (..., n_entries)."""
    g = scheme.bvecs
    gx, gy, gz = g[:, 0], g[:, 1], g[:, 2]
    coeff = np.stack(
        [gx * gx, gy * gy, gz * gz, 2 * gx * gy, 2 * gx * gz, 2 * gy * gz], axis=0
    )
    return (tensors @ coeff) * scheme.bvals


def render_dwis(tensor_field: TensorField, acq: AcquisitionSpec, seed: int) -> DwiVolumeSet:
    """Render noisy DWI volumes and the repeat-averaged b0 volume.

    Noise draws are ordered: b0 repeats first, then DWIs in scheme order
    (b>0 entries only), so the output is reproducible for a given seed.
    """
    rng = _rng(seed)
    s0 = tensor_field.s0
    sigma = acq.noise_sigma * float(np.mean(s0)) if acq.noise_model != "none" else 0.0

    def noisy(clean: np.ndarray) -> np.ndarray:
        if sigma == 0.0 or acq.noise_model == "none":
            return clean.copy()
        if acq.noise_model == "gaussian":
            return clean + rng.normal(0.0, sigma, clean.shape)
        return np.hypot(
            clean + rng.normal(0.0, sigma, clean.shape),
            rng.normal(0.0, sigma, clean.shape),
        )

    if sigma == 0.0:
        b0 = s0.copy()
    else:
        b0 = np.mean([noisy(s0) for _ in range(acq.b0_repeats)], axis=0)
    exponents = attenuation_exponents(tensor_field.tensors, acq.scheme)
    dwis = []
    for i, (b, _) in enumerate(acq.scheme):
        if b > 0:
            dwis.append(noisy(s0 * np.exp(-exponents[..., i])))
    return DwiVolumeSet(b0=b0, dwis=dwis, acquisition=acq, seed=seed)


def downsample_anisotropic(vol: np.ndarray, axis: int, factor: int,
                           method: str = "box") -> np.ndarray:
    """Reduce one in-plane axis by an integer factor.

    "box" averages each group of ``factor`` consecutive samples (the bilinear
    antialiasing kernel at factor 2). "stride" instead interpolates linearly
    at the group centers, i.e. plain undersampling without the full-width
    average; at factor 2 the two coincide.
    """
    vol = np.asarray(vol, dtype=float)
    if axis not in (0, 1):
        raise ValueError("axis must be 0 or 1 (in-plane)")
    if method not in DOWNSAMPLE_METHODS:
        raise ValueError(f"method must be one of {DOWNSAMPLE_METHODS}")
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    n = vol.shape[axis]
    if n % factor != 0:
        raise NonDivisibleDim(f"dim {n} along axis {axis} not divisible by {factor}")
    if factor == 1:
        return vol.copy()
    moved = np.moveaxis(vol, axis, 0)
    if method == "box":
        out = moved.reshape(n // factor, factor, *moved.shape[1:]).mean(axis=1)
    else:
        centers = np.arange(n // factor) * factor + (factor - 1) / 2.0
        lo = np.floor(centers).astype(int)
        frac = (centers - lo).reshape(-1, *([1] * (moved.ndim - 1)))
        hi = np.minimum(lo + 1, n - 1)
        out = moved[lo] * (1.0 - frac) + moved[hi] * frac
    return np.moveaxis(out, 0, axis)


def bilinear_upsample(slice2d: np.ndarray, axis: int, factor: int) -> np.ndarray:
    """Linear interpolation along one axis with edge replication at the borders."""
    arr = np.asarray(slice2d, dtype=float)
    if axis not in (0, 1):
        raise ValueError("axis must be 0 or 1")
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return arr.copy()
    moved = np.moveaxis(arr, axis, 0)
    n = moved.shape[0]
    pos = (np.arange(n * factor) + 0.5) / factor - 0.5
    pos = np.clip(pos, 0.0, n - 1.0)
    if n == 1:
        out = np.repeat(moved, factor, axis=0)
    else:
        lo = np.minimum(np.floor(pos).astype(int), n - 2)
        frac = (pos - lo).reshape(-1, *([1] * (moved.ndim - 1)))
        out = moved[lo] * (1.0 - frac) + moved[lo + 1] * frac
    return np.moveaxis(out, 0, axis)


def normalization_scale(b0: np.ndarray) -> float:
    """Intensity scale for [0, 1] normalization: the b0's 99.5th percentile."""
    b0 = np.asarray(b0, dtype=float)
    scale = float(np.percentile(b0, NORMALIZATION_PERCENTILE))
    if not (scale > 0):
        raise DegenerateB0(f"normalization scale must be positive, got {scale}")
    return scale


def normalize_pair(dwi_slices: Sequence[np.ndarray], b0_slice: np.ndarray
                   ) -> tuple[list[SlicePair], float]:
    """Divide every DWI slice and the b0 by the shared b0-derived scale."""
    scale = normalization_scale(b0_slice)
    b0n = np.asarray(b0_slice, dtype=float) / scale
    pairs = [SlicePair(np.asarray(d, dtype=float) / scale, b0n) for d in dwi_slices]
    return pairs, scale


@dataclass
class TrainingSample:
    """One supervised triple: degraded input, ground-truth DWI, ground-truth b0."""

    model_input: np.ndarray
    gt_dwi: np.ndarray
    gt_b0: np.ndarray


@dataclass
class DatasetSplits:
    train: list[TrainingSample] = field(default_factory=list)
    validation: list[TrainingSample] = field(default_factory=list)


def retained_slices(nz: int) -> range:
    """Mid-and-upper axial slices kept for the dataset (lower brain dropped)."""
    start = (3 * nz + 7) // 8
    return range(start, start + nz // 2)


def make_dataset(field_count: int, spec: PhantomSpec, acq: AcquisitionSpec,
                 split: tuple[float, float], seed: int,
                 downsample_factor: int = 2, downsample_axis: int = 0,
                 downsample_method: str = "box") -> DatasetSplits:
    """Render ``field_count`` phantoms and cut them into normalized 2D triples.

    Each triple pairs a bilinearly re-upsampled low-resolution DWI slice with
    its ground-truth slice and b0 reference. Phantom/render seeds derive from
    ``seed`` through a SeedSequence, so the result is fully deterministic.
    """
    if abs(split[0] + split[1] - 1.0) > 1e-9 or split[0] < 0 or split[1] < 0:
        raise InvalidSplit(f"split fractions must be >= 0 and sum to 1, got {split}")
    if field_count < 1:
        raise InvalidSpec("field_count must be >= 1")
    n_train = int(round(field_count * split[0]))
    children = np.random.SeedSequence(seed).spawn(field_count)
    out = DatasetSplits()
    for i in range(field_count):
        phantom_seed, render_seed = (int(s) for s in children[i].generate_state(2, np.uint64))
        tensor_field = generate_phantom(spec, phantom_seed)
        volumes = render_dwis(tensor_field, acq, render_seed)
        scale = normalization_scale(volumes.b0)
        b0n = volumes.b0 / scale
        dest = out.train if i < n_train else out.validation
        zs = retained_slices(spec.dims[2])
        for dwi in volumes.dwis:
            dwin = dwi / scale
            lowres = downsample_anisotropic(
                dwin, downsample_axis, downsample_factor, downsample_method
            )
            for z in zs:
                model_input = bilinear_upsample(
                    lowres[:, :, z], downsample_axis, downsample_factor
                )
                dest.append(
                    TrainingSample(
                        model_input=model_input,
                        gt_dwi=dwin[:, :, z].copy(),
                        gt_b0=b0n[:, :, z].copy(),
                    )
                )
    return out
