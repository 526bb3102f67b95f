"""Classical baselines and image-quality metrics.

TV reconstruction minimises ``0.5 ||y - A x||^2 + tau * TV_eps(x)`` where
``TV_eps`` is the anisotropic 3D total variation with each absolute
difference replaced by a Huber function of width ``eps``. The solver is a
monotone accelerated proximal gradient method (the prox being projection
onto ``x >= 0``) with backtracking on the step and a momentum restart
whenever a trial point would raise the objective, so accepted iterates never
increase it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import ProjectionStack, ScanGeometry, Volume, back_project, fdk_reconstruct, forward_project

SNR_CAP_DB = 300.0


class TvDivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _arr(v) -> np.ndarray:
    return np.asarray(v.data if isinstance(v, Volume) else v, dtype=np.float64)


def snr_db(reference, estimate) -> float:
    """20 log10(||ref|| / ||ref - est||), capped at 300 dB for an exact match."""
    ref, est = _arr(reference), _arr(estimate)
    if ref.shape != est.shape:
        raise ValueError(f"snr_db: shape mismatch {ref.shape} vs {est.shape}")
    num = np.linalg.norm(ref)
    if num == 0:
        raise ValueError("snr_db: reference has zero energy")
    den = np.linalg.norm(ref - est)
    if den == 0:
        return SNR_CAP_DB
    return float(min(SNR_CAP_DB, 20 * math.log10(num / den)))


SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11 taps
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _gauss_taps(sigma: float = SSIM_SIGMA, radius: int = SSIM_RADIUS) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def ssim_2d(ref: np.ndarray, est: np.ndarray, data_range: float = 2.0) -> float:
    """Mean local SSIM of one image pair over the window-valid interior."""
    taps = _gauss_taps()

    def filt(img):
        return ndimage.correlate1d(ndimage.correlate1d(img, taps, axis=0, mode="reflect"), taps, axis=1, mode="reflect")

    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    mx, my = filt(ref), filt(est)
    vx = filt(ref * ref) - mx * mx
    vy = filt(est * est) - my * my
    cxy = filt(ref * est) - mx * my
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    r = SSIM_RADIUS
    if min(ref.shape) <= 2 * r:
        raise ValueError(f"ssim needs images larger than {2 * r + 1} pixels, got {ref.shape}")
    return float(s[r:-r, r:-r].mean())


def ssim(reference, estimate, data_range: float = 2.0) -> float:
    """SSIM averaged over z-slices (axis 0 of a ``[z, y, x]`` volume)."""
    ref, est = _arr(reference), _arr(estimate)
    if ref.shape != est.shape:
        raise ValueError(f"ssim: shape mismatch {ref.shape} vs {est.shape}")
    if ref.ndim == 2:
        return ssim_2d(ref, est, data_range)
    if np.array_equal(ref, est):
        return 1.0
    return float(np.mean([ssim_2d(a, b, data_range) for a, b in zip(ref, est)]))


def _slice_snr(ref: np.ndarray, est: np.ndarray) -> float:
    if np.array_equal(ref, est):
        return SNR_CAP_DB
    if not np.any(ref):
        return float("nan")
    return snr_db(ref, est)


SLICE_AXES = {"z": 0, "y": 1, "x": 2}


def _summary(values: np.ndarray) -> dict:
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return {"mean": float("nan"), "std": float("nan"), "q1": float("nan"), "median": float("nan"), "q3": float("nan")}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"mean": float(v.mean()), "std": float(v.std()), "q1": float(q1), "median": float(med), "q3": float(q3)}


@dataclass
class MetricsReport:
    snr_db: float
    ssim: float
    slice_snr: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def slice_lengths(self) -> tuple[int, int, int]:
        return tuple(len(self.slice_snr[a]) for a in ("z", "y", "x"))

    def slice_summary(self) -> dict[str, dict]:
        return {a: _summary(v) for a, v in self.slice_snr.items()}


def slicewise_stats(reference, estimate, data_range: float = 2.0) -> MetricsReport:
    """Volume SNR/SSIM plus per-slice SNR along z, y and x.

    Slices where the reference is empty and the estimate differs get NaN and
    are ignored by the summaries. SSIM is NaN when z-slices are smaller than
    the SSIM window.
    """
    ref, est = _arr(reference), _arr(estimate)
    if ref.shape != est.shape:
        raise ValueError(f"slicewise_stats: shape mismatch {ref.shape} vs {est.shape}")
    per_axis = {}
    for name, ax in SLICE_AXES.items():
        r = np.moveaxis(ref, ax, 0)
        e = np.moveaxis(est, ax, 0)
        per_axis[name] = np.array([_slice_snr(a, b) for a, b in zip(r, e)])
    small = min(ref.shape[-2:]) <= 2 * SSIM_RADIUS
    s = float("nan") if small else ssim(ref, est, data_range)
    return MetricsReport(snr_db(ref, est), s, per_axis)


def aggregate(values) -> dict:
    """Mean, std and quartiles of a list of scalars."""
    return _summary(np.asarray(values, dtype=np.float64))


# ---------------------------------------------------------------------------
# TV
# ---------------------------------------------------------------------------


def _diffs(x: np.ndarray) -> list[np.ndarray]:
    return [np.diff(x, axis=a) for a in range(3)]


def _div_adjoint(grads: list[np.ndarray], shape) -> np.ndarray:
    """D^T applied to per-axis forward-difference fields."""
    out = np.zeros(shape)
    for a, g in enumerate(grads):
        pad_lo = [(0, 0)] * 3
        pad_hi = [(0, 0)] * 3
        pad_lo[a] = (1, 0)
        pad_hi[a] = (0, 1)
        out += np.pad(g, pad_lo) - np.pad(g, pad_hi)
    return out


def huber_tv(x: np.ndarray, eps: float) -> float:
    total = 0.0
    for d in _diffs(x):
        a = np.abs(d)
        total += float(np.sum(np.where(a <= eps, 0.5 * a * a / eps, a - 0.5 * eps)))
    return total


def huber_tv_grad(x: np.ndarray, eps: float) -> np.ndarray:
    return _div_adjoint([np.clip(d / eps, -1.0, 1.0) for d in _diffs(x)], x.shape)


def tv_seminorm(x) -> float:
    """Anisotropic TV, sum of absolute forward differences along each axis."""
    a = _arr(x)
    return float(sum(np.abs(d).sum() for d in _diffs(a)))


@dataclass
class TvConfig:
    tau: float = 0.0
    max_iters: int = 100
    eps: float | None = None  # Huber width; None -> 1e-3 * data_range
    data_range: float = 2.0
    power_iters: int = 20
    tol: float = 0.0
    nonneg: bool = True
    divergence_tol: float = 1.0
    tau_bounds: tuple[float, float] | None = None  # absolute; None -> auto-scaled
    tau_bounds_rel: tuple[float, float] = (1e-4, 1.0)
    max_evals: int = 20
    hann_cutoff: float = 0.3

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")

    @property
    def huber_eps(self) -> float:
        return 1e-3 * self.data_range if self.eps is None else self.eps


@dataclass
class TvResult:
    volume: Volume
    objective: list[float]
    data_term: list[float]
    iterations: int
    lipschitz: float


def estimate_lipschitz(geom: ScanGeometry, iters: int = 20, seed: int = 0) -> float:
    """Largest eigenvalue of A^T A by power iteration."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(geom.volume_shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = back_project(forward_project(v, geom).data, geom).data
        lam = float(np.linalg.norm(w))
        if lam == 0:
            return 0.0
        v = w / lam
    return lam


_LIPSCHITZ_CACHE: dict = {}


def _lipschitz(geom: ScanGeometry, iters: int) -> float:
    key = (geom, iters)
    if key not in _LIPSCHITZ_CACHE:
        _LIPSCHITZ_CACHE[key] = estimate_lipschitz(geom, iters)
    return _LIPSCHITZ_CACHE[key]


def tv_reconstruct(
    proj: ProjectionStack, geom: ScanGeometry, cfg: TvConfig, init: Volume | None = None
) -> TvResult:
    """Huber-smoothed TV least squares, started from the FDK reconstruction."""
    if tuple(proj.data.shape) != geom.proj_shape:
        raise ValueError(f"projection shape {proj.data.shape} does not match geometry {geom.proj_shape}")
    y = proj.data.astype(np.float64)
    if init is None:
        init = fdk_reconstruct(proj, geom, cfg.hann_cutoff)
    x = init.data.astype(np.float64).copy()
    if cfg.nonneg:
        # monotone acceptance compares against f(x), so x must be feasible
        np.maximum(x, 0.0, out=x)
    eps, tau = cfg.huber_eps, cfg.tau

    def smooth(v):
        r = forward_project(v, geom).data - y
        data = 0.5 * float(np.vdot(r, r))
        return data + tau * huber_tv(v, eps), data, r

    def grad(v, r):
        g = back_project(r, geom).data
        if tau > 0:
            g += tau * huber_tv_grad(v, eps)
        return g

    L_data = 1.01 * _lipschitz(geom, cfg.power_iters)
    L = max(L_data, 1e-12)

    f_x, d_x, _ = smooth(x)
    objective, data_terms = [f_x], [d_x]
    yk = x.copy()
    t = 1.0
    bad = 0
    it = 0
    for it in range(1, cfg.max_iters + 1):
        f_y, _, r_y = smooth(yk)
        g_y = grad(yk, r_y)
        L = max(L_data, 0.5 * L)
        while True:
            z = yk - g_y / L
            if cfg.nonneg:
                np.maximum(z, 0.0, out=z)
            step = z - yk
            f_z, d_z, _ = smooth(z)
            bound = f_y + float(np.vdot(g_y, step)) + 0.5 * L * float(np.vdot(step, step))
            if f_z <= bound + 1e-12 * abs(bound):
                break
            L *= 2.0
            if not np.isfinite(L) or L > 1e30:
                raise TvDivergenceError(f"step-size search failed at iteration {it}")
        if not np.isfinite(f_z):
            raise TvDivergenceError(f"non-finite objective at iteration {it}")
        t_next = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        if f_z <= f_x:
            bad = 0
            x_next, f_next, d_next = z, f_z, d_z
            yk = x_next + ((t - 1) / t_next) * (x_next - x) if it > 1 else x_next.copy()
            t = t_next
        else:
            if f_z > f_x * (1 + cfg.divergence_tol):
                bad += 1
                if bad >= 5:
                    raise TvDivergenceError(
                        f"objective grew beyond tolerance for 5 consecutive iterations (iteration {it})"
                    )
            # reject the trial point and restart momentum from the current iterate
            x_next, f_next, d_next = x, f_x, d_x
            yk = x.copy()
            t = 1.0
        rel_change = abs(f_x - f_next) / max(abs(f_x), 1e-300)
        x, f_x, d_x = x_next, f_next, d_next
        objective.append(f_x)
        data_terms.append(d_x)
        if cfg.tol > 0 and 0 < rel_change < cfg.tol:
            break
    return TvResult(Volume(x, geom.voxel_mm), objective, data_terms, it, L)


def auto_tau_bounds(proj: ProjectionStack, geom: ScanGeometry, rel=(1e-4, 1.0)) -> tuple[float, float]:
    scale = float(np.max(np.abs(back_project(proj, geom).data)))
    return rel[0] * scale, rel[1] * scale


GOLDEN = (math.sqrt(5) - 1) / 2


def golden_section_max(f, low: float, high: float, max_evals: int = 20, log_scale: bool = True):
    """Maximise a unimodal ``f`` on ``[low, high]``.

    Both endpoints are evaluated, then interior golden-section probes until
    ``max_evals`` calls are spent. Returns ``(best_x, best_f, bracket, history)``
    where ``bracket`` is the final interval (in log space when
    ``log_scale``).
    """
    if not (low > 0 if log_scale else True) or not low <= high:
        raise ValueError(f"invalid bracket [{low}, {high}]")
    if max_evals < 1:
        raise ValueError("max_evals must be >= 1")
    fwd = math.log if log_scale else (lambda v: v)
    inv = math.exp if log_scale else (lambda v: v)
    history: list[tuple[float, float]] = []

    def ev(u):
        xv = inv(u)
        val = f(xv)
        history.append((xv, val))
        return val

    a, b = fwd(low), fwd(high)
    if high == low or b - a <= 1e-12 * max(1.0, abs(a)):
        val = ev(a)
        return low, val, (a, b), history
    fa = ev(a)
    if max_evals >= 2:
        ev(b)
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc = ev(c) if max_evals >= 3 else -math.inf
    fd = ev(d) if max_evals >= 4 else -math.inf
    while len(history) < max_evals:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = ev(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = ev(d)
    best_x, best_f = max(history, key=lambda h: h[1])
    return best_x, best_f, (a, b), history


@dataclass
class TauSearchResult:
    tau: float
    volume: Volume
    snr_db: float
    history: list[tuple[float, float]]


def search_tau(proj: ProjectionStack, geom: ScanGeometry, cfg: TvConfig, reference: Volume) -> TauSearchResult:
    """Pick tau by golden-section search on SNR against a known reference."""
    if cfg.tau_bounds is None:
        low, high = auto_tau_bounds(proj, geom, cfg.tau_bounds_rel)
    else:
        low, high = cfg.tau_bounds
    if not 0 < low <= high:
        raise ValueError(f"tau bounds must satisfy 0 < low <= high, got ({low}, {high})")
    init = fdk_reconstruct(proj, geom, cfg.hann_cutoff)
    cache: dict[float, Volume] = {}

    def score(tau):
        vol = tv_reconstruct(proj, geom, _with_tau(cfg, tau), init=init).volume
        cache[tau] = vol
        return snr_db(reference, vol)

    best_tau, best_snr, _, history = golden_section_max(score, low, high, cfg.max_evals)
    return TauSearchResult(best_tau, cache[best_tau], best_snr, history)


def _with_tau(cfg: TvConfig, tau: float) -> TvConfig:
    return TvConfig(**{**cfg.__dict__, "tau": tau})


def fbp(proj: ProjectionStack, geom: ScanGeometry, hann_cutoff: float = 0.3) -> Volume:
    return fdk_reconstruct(proj, geom, hann_cutoff)
