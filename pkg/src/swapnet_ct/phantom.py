"""Procedural double-shell phantoms.

A metal shell between a perturbed interior surface and a spherical exterior
surface, filled with gas, in vacuum. The interior radius carries azimuthal
cosine modes whose phase drifts smoothly with height (a seeded per-mode
twist), so each latitude band sees the same lobe count but the surface is
genuinely 3D. Voxel values are region occupancy (2x supersampled) times
``mass_atten * density``, rescaled so the densest material maps to 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .geometry import Volume

GAS_MASS_ATTEN = 9.40  # cm^2/g
METAL_MASS_ATTEN = 13.03  # cm^2/g
DISPLAY_MAX = 2.0
SUPERSAMPLE = 2


@dataclass(frozen=True)
class Mode:
    order: int
    amplitude: float
    phase: float = 0.0


@dataclass(frozen=True)
class PhantomSpec:
    n: int = 32
    voxel_mm: float = 0.08
    gas_mass_atten: float = GAS_MASS_ATTEN
    metal_mass_atten: float = METAL_MASS_ATTEN
    inner_radius_frac: float = 0.5
    outer_radius_frac: float = 0.8
    perturbation: tuple[Mode, ...] = ()
    metal_density: float = 1.0
    gas_density: float = 0.1
    max_twist: float = np.pi / 2
    rng_seed: int = 0

    @property
    def half_width_mm(self) -> float:
        return 0.5 * self.n * self.voxel_mm

    @property
    def inner_radius_mm(self) -> float:
        return self.inner_radius_frac * self.half_width_mm

    @property
    def outer_radius_mm(self) -> float:
        return self.outer_radius_frac * self.half_width_mm

    def validate(self) -> None:
        if self.n < 1 or self.voxel_mm <= 0:
            raise ValueError(f"grid extent n={self.n} and voxel_mm={self.voxel_mm} must be positive")
        if not 0 < self.inner_radius_frac:
            raise ValueError(f"inner radius must be > 0, got fraction {self.inner_radius_frac}")
        if not self.inner_radius_frac < self.outer_radius_frac:
            raise ValueError(
                f"inner radius fraction {self.inner_radius_frac} must be < outer {self.outer_radius_frac}"
            )
        if not self.outer_radius_frac < 1.0:
            raise ValueError(
                f"outer radius {self.outer_radius_mm:.4g} mm must be < half width {self.half_width_mm:.4g} mm"
            )
        total = sum(abs(m.amplitude) for m in self.perturbation)
        if self.inner_radius_frac * (1 + total) >= self.outer_radius_frac:
            raise ValueError(
                f"perturbation amplitudes (sum {total:.4g}) push the interior surface past the exterior radius"
            )
        if total >= 1:
            raise ValueError(f"perturbation amplitudes (sum {total:.4g}) collapse the interior surface")
        for m in self.perturbation:
            if m.order < 0:
                raise ValueError(f"mode number must be >= 0, got {m.order}")
        if self.metal_density <= 0 or self.gas_density <= 0:
            raise ValueError("densities must be positive")

    @property
    def metal_value(self) -> float:
        return self.metal_mass_atten * self.metal_density

    @property
    def gas_value(self) -> float:
        return self.gas_mass_atten * self.gas_density


def _twists(spec: PhantomSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.rng_seed)
    return rng.uniform(-spec.max_twist, spec.max_twist, size=len(spec.perturbation))


def interior_radius(spec: PhantomSpec, theta: np.ndarray, z_frac: np.ndarray | float = 0.0) -> np.ndarray:
    """Interior radius (mm) at azimuth ``theta`` and height ``z / r_out``."""
    r = np.ones(np.broadcast(theta, z_frac).shape)
    for mode, twist in zip(spec.perturbation, _twists(spec)):
        r = r + mode.amplitude * np.cos(mode.order * theta + mode.phase + twist * z_frac)
    return spec.inner_radius_mm * r


def _occupancy(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    n, s, p = spec.n, SUPERSAMPLE, spec.voxel_mm
    c = ((np.arange(n * s) + 0.5) / s - n / 2) * p
    zz, yy, xx = np.meshgrid(c, c, c, indexing="ij")
    rr = np.sqrt(xx * xx + yy * yy + zz * zz)
    inside_outer = rr < spec.outer_radius_mm
    if spec.perturbation:
        theta = np.arctan2(yy, xx)
        r_in = interior_radius(spec, theta, zz / spec.outer_radius_mm)
    else:
        r_in = spec.inner_radius_mm
    gas = rr < r_in
    metal = inside_outer & ~gas

    def down(mask):
        return mask.reshape(n, s, n, s, n, s).mean(axis=(1, 3, 5))

    return down(metal), down(gas)


def generate_phantom(spec: PhantomSpec, normalize: bool = True) -> Volume:
    """Voxelise ``spec``. With ``normalize`` the metal value maps to 2."""
    spec.validate()
    metal, gas = _occupancy(spec)
    values = metal * spec.metal_value + gas * spec.gas_value
    if normalize:
        values = values * (DISPLAY_MAX / max(spec.metal_value, spec.gas_value))
    return Volume(values.astype(np.float32), spec.voxel_mm)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PerturbationRanges:
    n_modes: tuple[int, int] = (1, 3)
    order: tuple[int, int] = (2, 8)
    amplitude: tuple[float, float] = (0.03, 0.12)


def split_sizes(count: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError(f"need three non-negative split fractions, got {fractions}")
    if not np.isclose(sum(fractions), 1.0):
        raise ValueError(f"split fractions must sum to 1, got {sum(fractions)}")
    if count < 3:
        raise ValueError(f"need at least 3 phantoms for a train/val/test split, got {count}")
    n_val = int(round(count * fractions[1]))
    n_test = int(round(count * fractions[2]))
    n_train = count - n_val - n_test
    sizes = (n_train, n_val, n_test)
    for name, k, f in zip(("train", "val", "test"), sizes, fractions):
        if f > 0 and k < 1:
            raise ValueError(f"count={count} is too small for a non-empty {name} split at fraction {f}")
    return sizes


def phantom_seeds(count: int, seed: int) -> list[int]:
    """Distinct per-phantom seeds derived from (seed, index)."""
    out = []
    for i in range(count):
        out.append(int(np.random.SeedSequence([seed, i]).generate_state(1, dtype=np.uint32)[0]))
    if len(set(out)) != count:
        raise RuntimeError("seed collision while deriving phantom seeds")
    return out


def randomize_spec(base: PhantomSpec, seed: int, ranges: PerturbationRanges = PerturbationRanges()) -> PhantomSpec:
    """Copy of ``base`` with randomised interior-surface modes (radii untouched)."""
    rng = np.random.default_rng(seed)
    inner, outer = base.inner_radius_frac, base.outer_radius_frac
    n_modes = int(rng.integers(ranges.n_modes[0], ranges.n_modes[1] + 1))
    budget = 0.9 * (outer / inner - 1)
    modes = []
    for _ in range(n_modes):
        amp = rng.uniform(*ranges.amplitude)
        modes.append(Mode(int(rng.integers(ranges.order[0], ranges.order[1] + 1)), amp, rng.uniform(0, 2 * np.pi)))
    total = sum(m.amplitude for m in modes)
    if total > budget:
        modes = [replace(m, amplitude=m.amplitude * budget / total) for m in modes]
    return replace(
        base,
        perturbation=tuple(modes),
        rng_seed=seed,
    )


@dataclass
class PhantomSet:
    train: list[Volume] = field(default_factory=list)
    val: list[Volume] = field(default_factory=list)
    test: list[Volume] = field(default_factory=list)
    seeds: dict[str, list[int]] = field(default_factory=dict)
    specs: dict[str, list[PhantomSpec]] = field(default_factory=dict)

    def __iter__(self):
        return iter((self.train, self.val, self.test))


def generate_dataset(
    count: int,
    base_spec: PhantomSpec,
    split: Sequence[float] = (90 / 126, 18 / 126, 18 / 126),
    seed: int = 0,
    ranges: PerturbationRanges = PerturbationRanges(),
) -> PhantomSet:
    """Randomised phantoms split into disjoint train/val/test lists."""
    sizes = split_sizes(count, split)
    seeds = phantom_seeds(count, seed)
    order = np.random.default_rng(seed).permutation(count)
    out = PhantomSet()
    start = 0
    for name, k in zip(("train", "val", "test"), sizes):
        idx = order[start : start + k]
        start += k
        specs = [randomize_spec(base_spec, seeds[i], ranges) for i in idx]
        getattr(out, name).extend(generate_phantom(s) for s in specs)
        out.seeds[name] = [seeds[i] for i in idx]
        out.specs[name] = specs
    return out
