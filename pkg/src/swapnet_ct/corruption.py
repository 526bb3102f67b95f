"""Radiograph degradation: white Gaussian noise on post-log data, and the
non-ideal transmission model

    Phi(D) = D_blur + D_scat + B_scat + eta

with source/detector blur, a wide-kernel correlated scatter term, a
low-order polynomial background and two coloured Poisson noise components.
Every 2D convolution uses reflective boundaries and unit-sum kernels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .geometry import POST_LOG, TRANSMISSION, ProjectionStack, ScanGeometry, Volume, forward_project

I0 = 3.201e-4
LOG_FLOOR = 1e-6  # relative to I0
ALL_COMPONENTS = ("blur", "scatter", "background", "noise")


@dataclass(frozen=True)
class CorruptionRanges:
    """Sampling ranges for one radiograph plus the fixed (unsampled) kernels."""

    blur_sigma_px: tuple[float, float] = (1.0, 3.0)
    blur_orientation_deg: tuple[float, float] = (5.0, 26.0)
    scatter_sigma_px: tuple[float, float] = (10.0, 30.0)
    scatter_kappa: tuple[float, float] = (0.1, 0.3)
    background_level: tuple[float, float] = (0.5, 1.5)
    background_tilt: tuple[float, float] = (-0.1, 0.1)
    gamma_level: tuple[float, float] = (39000.0, 50000.0)
    photon_level: tuple[float, float] = (350.0, 450.0)
    blur_aspect: float = 0.5
    detector_blur_sigma_px: float = 1.0
    gamma_kernel_sigma_px: float = 2.0
    photon_kernel_sigma_px: float = 0.5
    i0: float = I0


@dataclass(frozen=True)
class CorruptionParams:
    """Parameters for a single radiograph.

    ``kappa_g``/``kappa_p`` of ``None`` mean ``1 / level``. A kernel sigma of
    0 is a delta kernel. ``components`` selects which terms of Phi are on.
    """

    i0: float = I0
    blur_sigma_px: float = 2.0
    blur_orientation_deg: float = 15.0
    blur_aspect: float = 0.5
    detector_blur_sigma_px: float = 1.0
    scatter_sigma_px: float = 20.0
    scatter_kappa: float = 0.2
    background_level: float = 1.0
    background_tilt_x: float = 0.0
    background_tilt_y: float = 0.0
    gamma_level: float = 45000.0
    photon_level: float = 400.0
    gamma_kernel_sigma_px: float = 2.0
    photon_kernel_sigma_px: float = 0.5
    kappa_g: float | None = None
    kappa_p: float | None = None
    components: tuple[str, ...] = ALL_COMPONENTS
    rng_seed: int = 0

    def __post_init__(self):
        if self.i0 <= 0:
            raise ValueError(f"i0 must be positive, got {self.i0}")
        bad = set(self.components) - set(ALL_COMPONENTS)
        if bad:
            raise ValueError(f"unknown corruption components {sorted(bad)}")

    @classmethod
    def disabled(cls, **kw) -> "CorruptionParams":
        return cls(components=(), **kw)

    def has(self, name: str) -> bool:
        return name in self.components

    @property
    def gamma_scale(self) -> float:
        return 1.0 / self.gamma_level if self.kappa_g is None else self.kappa_g

    @property
    def photon_scale(self) -> float:
        return 1.0 / self.photon_level if self.kappa_p is None else self.kappa_p

    def to_dict(self) -> dict:
        d = asdict(self)
        d["components"] = list(self.components)
        return d


def _seed_for(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, path)]))


def sample_params(ranges: CorruptionRanges = CorruptionRanges(), rng_seed: int = 0) -> CorruptionParams:
    """Draw every random parameter uniformly within its range."""
    rng = np.random.default_rng(rng_seed)
    u = lambda r: float(rng.uniform(r[0], r[1]))  # noqa: E731
    return CorruptionParams(
        i0=ranges.i0,
        blur_sigma_px=u(ranges.blur_sigma_px),
        blur_orientation_deg=u(ranges.blur_orientation_deg),
        blur_aspect=ranges.blur_aspect,
        detector_blur_sigma_px=ranges.detector_blur_sigma_px,
        scatter_sigma_px=u(ranges.scatter_sigma_px),
        scatter_kappa=u(ranges.scatter_kappa),
        background_level=u(ranges.background_level),
        background_tilt_x=u(ranges.background_tilt),
        background_tilt_y=u(ranges.background_tilt),
        gamma_level=u(ranges.gamma_level),
        photon_level=u(ranges.photon_level),
        gamma_kernel_sigma_px=ranges.gamma_kernel_sigma_px,
        photon_kernel_sigma_px=ranges.photon_kernel_sigma_px,
        rng_seed=int(rng_seed),
    )


def sample_stack_params(ranges: CorruptionRanges, seed: int, n_views: int) -> list[CorruptionParams]:
    """Independent parameters per radiograph, streams keyed by (seed, view)."""
    out = []
    for v in range(n_views):
        s = int(np.random.SeedSequence([int(seed), v]).generate_state(1, dtype=np.uint32)[0])
        out.append(sample_params(ranges, s))
    return out


# ---------------------------------------------------------------------------
# kernels and convolutions
# ---------------------------------------------------------------------------


def gaussian_kernel2d(sigma_major: float, sigma_minor: float | None = None, angle_deg: float = 0.0) -> np.ndarray:
    """Unit-sum sampled 2D Gaussian; the major axis sits ``angle_deg`` from the column axis."""
    sigma_minor = sigma_major if sigma_minor is None else sigma_minor
    radius = max(1, int(math.ceil(4.0 * max(sigma_major, sigma_minor))))
    ax = np.arange(-radius, radius + 1, dtype=float)
    rr, cc = np.meshgrid(ax, ax, indexing="ij")
    t = math.radians(angle_deg)
    along = cc * math.cos(t) + rr * math.sin(t)
    across = -cc * math.sin(t) + rr * math.cos(t)
    k = np.exp(-0.5 * ((along / sigma_major) ** 2 + (across / sigma_minor) ** 2))
    return k / k.sum()


def _convolve(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return ndimage.convolve(img, kernel, mode="reflect")


def _gaussian(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img.copy()
    # scipy's reflect mode is symmetric half-sample extension; unit-sum weights
    return ndimage.gaussian_filter(img, sigma, mode="reflect", truncate=4.0)


def apply_blur(direct: np.ndarray, params: CorruptionParams) -> np.ndarray:
    """Anisotropic source blur followed by isotropic detector blur, per view."""
    direct = np.asarray(direct, dtype=np.float64)
    views = direct[None] if direct.ndim == 2 else direct
    out = np.empty_like(views)
    kern = None
    if params.blur_sigma_px > 0:
        kern = gaussian_kernel2d(params.blur_sigma_px, params.blur_sigma_px * params.blur_aspect, params.blur_orientation_deg)
        if kern.shape[0] > views.shape[1] or kern.shape[1] > views.shape[2]:
            raise ValueError(f"blur kernel {kern.shape} is larger than the detector {views.shape[1:]}")
    for i, img in enumerate(views):
        b = _convolve(img, kern) if kern is not None else img
        out[i] = _gaussian(b, params.detector_blur_sigma_px)
    return out[0] if direct.ndim == 2 else out


def apply_scatter(direct: np.ndarray, params: CorruptionParams) -> np.ndarray:
    """Correlated scatter: kappa times a wide Gaussian blur of the direct signal."""
    direct = np.asarray(direct, dtype=np.float64)
    if direct.ndim == 2:
        return params.scatter_kappa * _gaussian(direct, params.scatter_sigma_px)
    return np.stack([params.scatter_kappa * _gaussian(v, params.scatter_sigma_px) for v in direct])


@dataclass(frozen=True)
class BackgroundPoly:
    """B(x, y) = sum_i a[i] x^i + b[i] y^i on x, y in [-1, 1] (x along columns)."""

    a: tuple[float, ...] = (0.0,)
    b: tuple[float, ...] = (0.0,)


def background_coeffs(params: CorruptionParams, centre_mean: float) -> BackgroundPoly:
    """First-order field: centre level and edge tilts relative to ``centre_mean``."""
    level = params.background_level * centre_mean
    return BackgroundPoly(a=(level, params.background_tilt_x * level), b=(0.0, params.background_tilt_y * level))


def background_field(coeffs: BackgroundPoly, shape: tuple[int, int]) -> np.ndarray:
    rows, cols = shape
    y = np.linspace(-1.0, 1.0, rows) if rows > 1 else np.zeros(1)
    x = np.linspace(-1.0, 1.0, cols) if cols > 1 else np.zeros(1)
    fx = np.polynomial.polynomial.polyval(x, np.asarray(coeffs.a, dtype=float))
    fy = np.polynomial.polynomial.polyval(y, np.asarray(coeffs.b, dtype=float))
    return fy[:, None] + fx[None, :]


def centre_mean(img: np.ndarray) -> float:
    """Mean over the central half-width window of a detector image."""
    r, c = img.shape
    return float(img[r // 4 : r - r // 4, c // 4 : c - c // 4].mean())


def poisson_field(signal: np.ndarray, level: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Counts with per-pixel mean ``level * signal / mean(signal)``; returns (counts, mean)."""
    m = float(signal.mean())
    lam = level * signal / m if m > 0 else np.zeros_like(signal)
    return rng.poisson(lam).astype(np.float64), lam


def colored_noise(total_signal: np.ndarray, params: CorruptionParams, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean gamma + photon Poisson noise, each blurred by its kernel.

    Each component is ``kappa * (counts - mean) * phi`` in units relative to
    the spatial mean of the signal, then rescaled by that mean so it adds
    directly to the transmission.
    """
    s = np.asarray(total_signal, dtype=np.float64)
    if np.any(s < 0):
        raise ValueError("colored_noise: total signal must be non-negative")
    m = float(s.mean())
    if m == 0:
        return np.zeros_like(s)
    pg, lg = poisson_field(s, params.gamma_level, rng)
    pp, lp = poisson_field(s, params.photon_level, rng)
    eta = params.gamma_scale * _gaussian(pg - lg, params.gamma_kernel_sigma_px)
    eta += params.photon_scale * _gaussian(pp - lp, params.photon_kernel_sigma_px)
    return m * eta


def phi(direct: np.ndarray, params: CorruptionParams, rng: np.random.Generator) -> np.ndarray:
    """Non-ideal transmission for one view (2D direct image in intensity units)."""
    d_blur = apply_blur(direct, params) if params.has("blur") else np.asarray(direct, dtype=np.float64)
    total = d_blur.copy()
    if params.has("scatter"):
        total += apply_scatter(d_blur, params)
    if params.has("background"):
        total += background_field(background_coeffs(params, centre_mean(direct)), direct.shape)
    if params.has("noise"):
        total = total + colored_noise(np.clip(total, 0, None), params, rng)
    return total


def _clean_stack(vol, geom: ScanGeometry, clean: ProjectionStack | None) -> ProjectionStack:
    if clean is None:
        clean = forward_project(vol, geom)
    if not np.all(np.isfinite(clean.data)):
        raise ValueError("clean projections contain non-finite values; check the volume")
    return clean


def corrupt_post_log(
    vol: Volume | np.ndarray,
    geom: ScanGeometry,
    params: CorruptionParams | list[CorruptionParams],
    clean: ProjectionStack | None = None,
) -> ProjectionStack:
    """Forward project, pass I0 exp(-Ax) through Phi view by view, take -log(./I0).

    ``params`` is either one parameter set per view or a single set reused
    for every view (noise streams still differ per view).
    """
    clean = _clean_stack(vol, geom, clean)
    n = clean.n_views
    per_view = params if isinstance(params, (list, tuple)) else [params] * n
    if len(per_view) != n:
        raise ValueError(f"{len(per_view)} parameter sets for {n} views")
    out = np.empty(clean.data.shape, dtype=np.float64)
    for v in range(n):
        p = per_view[v]
        direct = p.i0 * np.exp(-clean.data[v])
        rng = _seed_for(p.rng_seed, v, 1)
        t = np.maximum(phi(direct, p, rng), LOG_FLOOR * p.i0)
        out[v] = -np.log(t / p.i0)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("corrupt_post_log produced non-finite values after clamping")
    return ProjectionStack(out, clean.angles, POST_LOG)


def transmission(clean: ProjectionStack, i0: float = I0) -> ProjectionStack:
    return ProjectionStack(i0 * np.exp(-clean.data), clean.angles, TRANSMISSION)


@dataclass(frozen=True)
class AwgnParams:
    target_input_snr_db: float = 40.0
    rng_seed: int = 0

    def __post_init__(self):
        if math.isnan(self.target_input_snr_db):
            raise ValueError("target SNR must not be NaN")


def corrupt_awgn(
    vol: Volume | np.ndarray, geom: ScanGeometry, params: AwgnParams = AwgnParams(), clean: ProjectionStack | None = None
) -> ProjectionStack:
    """y = Ax + e with ||Ax|| / ||e|| fixed exactly by the target input SNR.

    An infinite target disables the noise.
    """
    clean = _clean_stack(vol, geom, clean)
    ax = clean.data.astype(np.float64)
    energy = float(np.linalg.norm(ax))
    if energy == 0:
        raise ValueError("corrupt_awgn: clean projections have zero energy; input SNR is undefined")
    if math.isinf(params.target_input_snr_db) and params.target_input_snr_db > 0:
        return ProjectionStack(ax.copy(), clean.angles, POST_LOG)
    rng = np.random.default_rng(params.rng_seed)
    e = rng.standard_normal(ax.shape)
    e *= energy / (np.linalg.norm(e) * 10 ** (params.target_input_snr_db / 20))
    return ProjectionStack(ax + e, clean.angles, POST_LOG)


def input_snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    return float(20 * np.log10(np.linalg.norm(clean) / np.linalg.norm(noisy - clean)))
