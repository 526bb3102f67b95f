"""Circular cone-beam geometry, a ray-marching projector and FDK.

Conventions
-----------
* World axes are (x, y, z) in mm with the origin at the volume centre; the
  source rotates about z.
* ``Volume.data`` is indexed ``[z, y, x]`` (x fastest in memory).
* ``ProjectionStack.data`` is indexed ``[view, row, col]``; detector rows run
  along z and columns along the in-plane detector axis.
* View ``k`` sits at angle ``k * span / n_views``. The source is at
  ``R (cos b, sin b, 0)``, the detector centre at ``-(D - R) (cos b, sin b, 0)``,
  and the column axis points along ``(-sin b, cos b, 0)``.

The forward projector samples the trilinearly interpolated volume at the
midpoints of equal sub-segments (at most half a voxel long) of each ray's
chord through the grid's support. It is materialised as a sparse matrix so
that the back projector is its exact transpose.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

LINE_INTEGRAL = "line_integral"
TRANSMISSION = "transmission"
POST_LOG = "post_log"
SEMANTIC_TAGS = (LINE_INTEGRAL, TRANSMISSION, POST_LOG)

# fraction of a voxel pitch between ray samples
MARCH_STEP = 0.5


@dataclass(frozen=True)
class ScanGeometry:
    n_views: int = 4
    angular_span_deg: float = 180.0
    source_to_axis_mm: float = 8.0
    source_to_detector_mm: float = 12.0
    detector_rows: int = 48
    detector_cols: int = 48
    detector_pixel_mm: float = 0.12
    volume_shape: tuple[int, int, int] = (32, 32, 32)  # (nz, ny, nx)
    voxel_mm: float = 0.08

    def __post_init__(self):
        object.__setattr__(self, "volume_shape", tuple(int(n) for n in self.volume_shape))
        if self.n_views < 1:
            raise ValueError(f"n_views must be >= 1, got {self.n_views}")
        if not self.source_to_detector_mm > self.source_to_axis_mm > 0:
            raise ValueError(
                "need source_to_detector_mm > source_to_axis_mm > 0, got "
                f"{self.source_to_detector_mm} and {self.source_to_axis_mm}"
            )
        if min(self.detector_rows, self.detector_cols) < 1 or self.detector_pixel_mm <= 0:
            raise ValueError("detector extents and pitch must be positive")
        if len(self.volume_shape) != 3 or min(self.volume_shape) < 1 or self.voxel_mm <= 0:
            raise ValueError(f"bad volume grid {self.volume_shape} @ {self.voxel_mm} mm")
        if self.source_to_axis_mm <= self.volume_radius_mm:
            raise ValueError(
                f"source at {self.source_to_axis_mm} mm lies inside the volume bounding sphere "
                f"(radius {self.volume_radius_mm:.3f} mm)"
            )

    @property
    def volume_radius_mm(self) -> float:
        half = 0.5 * np.asarray(self.volume_shape, dtype=float) * self.voxel_mm
        return float(np.sqrt(np.sum(half**2)))

    @property
    def magnification(self) -> float:
        return self.source_to_detector_mm / self.source_to_axis_mm

    @property
    def angles(self) -> np.ndarray:
        """View angles in radians, equally spaced from 0 over the span."""
        return np.arange(self.n_views) * (np.deg2rad(self.angular_span_deg) / self.n_views)

    @property
    def angle_step(self) -> float:
        return np.deg2rad(self.angular_span_deg) / self.n_views

    @property
    def proj_shape(self) -> tuple[int, int, int]:
        return (self.n_views, self.detector_rows, self.detector_cols)

    def with_views(self, n_views: int) -> "ScanGeometry":
        return ScanGeometry(**{**self.__dict__, "n_views": n_views})

    def detector_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-centre coordinates (rows along z, cols in-plane) in mm."""
        rows = (np.arange(self.detector_rows) - (self.detector_rows - 1) / 2) * self.detector_pixel_mm
        cols = (np.arange(self.detector_cols) - (self.detector_cols - 1) / 2) * self.detector_pixel_mm
        return rows, cols


def desk_geometry(n_views: int = 4, n: int = 32) -> ScanGeometry:
    """Default desk-scale setup: n^3 grid, 1.5n square detector, magnification 1.5."""
    voxel = 0.08
    det = int(round(1.5 * n))
    return ScanGeometry(
        n_views=n_views,
        source_to_axis_mm=100 * voxel * n / 32,
        source_to_detector_mm=150 * voxel * n / 32,
        detector_rows=det,
        detector_cols=det,
        detector_pixel_mm=1.5 * voxel,
        volume_shape=(n, n, n),
        voxel_mm=voxel,
    )


@dataclass
class Volume:
    data: np.ndarray  # [z, y, x]
    voxel_mm: float = 1.0

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume data must be 3D with positive extents, got {self.data.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def extents_xyz(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    def to_xyz(self) -> np.ndarray:
        """Array view in canonical (x, y, z) order."""
        return np.ascontiguousarray(self.data.transpose(2, 1, 0))

    @classmethod
    def from_xyz(cls, arr: np.ndarray, voxel_mm: float = 1.0) -> "Volume":
        return cls(np.ascontiguousarray(np.asarray(arr).transpose(2, 1, 0)), voxel_mm)


@dataclass
class ProjectionStack:
    data: np.ndarray  # [view, row, col]
    angles: np.ndarray
    tag: str = LINE_INTEGRAL

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=float)
        if self.data.ndim != 3:
            raise ValueError(f"projection data must be (views, rows, cols), got {self.data.shape}")
        if len(self.angles) != self.data.shape[0]:
            raise ValueError(f"{len(self.angles)} angles for {self.data.shape[0]} views")
        if self.tag not in SEMANTIC_TAGS:
            raise ValueError(f"unknown projection tag {self.tag!r}")
        if self.tag == TRANSMISSION and np.any(self.data < 0):
            raise ValueError("transmission values must be >= 0")

    @property
    def n_views(self) -> int:
        return self.data.shape[0]


# ---------------------------------------------------------------------------
# system matrix
# ---------------------------------------------------------------------------


def _view_matrix(geom: ScanGeometry, beta: float) -> sp.csr_matrix:
    nz, ny, nx = geom.volume_shape
    p = geom.voxel_mm
    R, D = geom.source_to_axis_mm, geom.source_to_detector_mm
    c, s = math.cos(beta), math.sin(beta)
    src = np.array([R * c, R * s, 0.0])
    centre = -(D - R) * np.array([c, s, 0.0])
    eu = np.array([-s, c, 0.0])
    rows, cols = geom.detector_coords()
    vv, uu = np.meshgrid(rows, cols, indexing="ij")
    pix = centre + uu[..., None] * eu + vv[..., None] * np.array([0.0, 0.0, 1.0])
    direction = (pix - src).reshape(-1, 3)
    length = np.linalg.norm(direction, axis=1)
    direction /= length[:, None]

    # trilinear support extends half a voxel past the grid boundary
    half = 0.5 * np.array([nx + 1, ny + 1, nz + 1], dtype=float) * p
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / direction
        t1 = (-half - src) * inv
        t2 = (half - src) * inv
    tlo = np.where(np.isfinite(t1), np.minimum(t1, t2), -np.inf)
    thi = np.where(np.isfinite(t2), np.maximum(t1, t2), np.inf)
    # rays parallel to a slab and outside it never enter
    parallel_out = (direction == 0) & (np.abs(src) >= half)
    t_in = np.max(tlo, axis=1)
    t_out = np.min(thi, axis=1)
    t_in = np.maximum(t_in, 0.0)
    chord = np.where(parallel_out.any(axis=1), 0.0, np.clip(t_out - t_in, 0.0, None))

    n_ray = direction.shape[0]
    n_samp = np.ceil(chord / (MARCH_STEP * p)).astype(int)
    hit = n_samp > 0
    ray_ids = np.repeat(np.arange(n_ray)[hit], n_samp[hit])
    starts = np.concatenate(([0], np.cumsum(n_samp[hit])[:-1]))
    k = np.arange(ray_ids.size) - np.repeat(starts, n_samp[hit])
    seg = chord[ray_ids] / n_samp[ray_ids]
    t = t_in[ray_ids] + (k + 0.5) * seg
    pts = src + t[:, None] * direction[ray_ids]

    fx = pts[:, 0] / p + (nx - 1) / 2
    fy = pts[:, 1] / p + (ny - 1) / 2
    fz = pts[:, 2] / p + (nz - 1) / 2
    ix, iy, iz = np.floor(fx).astype(int), np.floor(fy).astype(int), np.floor(fz).astype(int)
    wx, wy, wz = fx - ix, fy - iy, fz - iz

    r_list, c_list, v_list = [], [], []
    for dz in (0, 1):
        az = wz if dz else 1 - wz
        jz = iz + dz
        for dy in (0, 1):
            ay = wy if dy else 1 - wy
            jy = iy + dy
            for dx in (0, 1):
                ax = wx if dx else 1 - wx
                jx = ix + dx
                ok = (jx >= 0) & (jx < nx) & (jy >= 0) & (jy < ny) & (jz >= 0) & (jz < nz)
                w = (az * ay * ax * seg)[ok]
                r_list.append(ray_ids[ok])
                c_list.append(((jz * ny + jy) * nx + jx)[ok])
                v_list.append(w)
    mat = sp.coo_matrix(
        (np.concatenate(v_list), (np.concatenate(r_list), np.concatenate(c_list))),
        shape=(n_ray, nz * ny * nx),
    ).tocsr()
    mat.sum_duplicates()
    return mat


@functools.lru_cache(maxsize=4)
def system_matrix(geom: ScanGeometry) -> sp.csr_matrix:
    """Sparse A with one row per (view, row, col) detector pixel."""
    mat = sp.vstack([_view_matrix(geom, b) for b in geom.angles], format="csr")
    return mat


# views above this count are projected one at a time instead of caching A
_CACHE_VIEWS = 16


def _check_volume(vol_data: np.ndarray, geom: ScanGeometry) -> None:
    if tuple(vol_data.shape) != geom.volume_shape:
        raise ValueError(f"volume shape {vol_data.shape} does not match geometry {geom.volume_shape}")


def forward_project(vol: Volume | np.ndarray, geom: ScanGeometry) -> ProjectionStack:
    """Line integrals (value * mm) of the volume along every source-pixel ray."""
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    _check_volume(data, geom)
    flat = data.reshape(-1).astype(np.float64)
    if geom.n_views <= _CACHE_VIEWS:
        out = system_matrix(geom) @ flat
    else:
        out = np.concatenate([_view_matrix(geom, b) @ flat for b in geom.angles])
    return ProjectionStack(out.reshape(geom.proj_shape), geom.angles, LINE_INTEGRAL)


def back_project(proj: ProjectionStack | np.ndarray, geom: ScanGeometry) -> Volume:
    """Exact transpose of :func:`forward_project`."""
    if isinstance(proj, ProjectionStack):
        if proj.tag == TRANSMISSION:
            raise ValueError("back_project expects line_integral or post_log data, got transmission")
        data = proj.data
    else:
        data = np.asarray(proj)
    if tuple(data.shape) != geom.proj_shape:
        raise ValueError(f"projection shape {data.shape} does not match geometry {geom.proj_shape}")
    flat = data.reshape(-1).astype(np.float64)
    if geom.n_views <= _CACHE_VIEWS:
        out = system_matrix(geom).T @ flat
    else:
        per = geom.detector_rows * geom.detector_cols
        out = np.zeros(int(np.prod(geom.volume_shape)))
        for i, b in enumerate(geom.angles):
            out += _view_matrix(geom, b).T @ flat[i * per : (i + 1) * per]
    return Volume(out.reshape(geom.volume_shape), geom.voxel_mm)


# ---------------------------------------------------------------------------
# FDK
# ---------------------------------------------------------------------------


def _next_pow2(n: int) -> int:
    return 1 << (int(n) - 1).bit_length()


def ramp_filter(n_cols: int, spacing: float, hann_cutoff: float = 1.0) -> np.ndarray:
    """Frequency response of the band-limited ramp with Hann apodisation.

    Built from the spatial Ram-Lak kernel so the DC term is handled
    correctly. ``hann_cutoff`` is relative to Nyquist; frequencies above it
    are zeroed. The returned array has length ``next_pow2(2 * n_cols)``.
    """
    if not 0 < hann_cutoff <= 1:
        raise ValueError(f"hann_cutoff must lie in (0, 1], got {hann_cutoff}")
    size = max(64, _next_pow2(2 * n_cols))
    n = np.concatenate((np.arange(0, size // 2 + 1), np.arange(-size // 2 + 1, 0)))
    h = np.zeros(size)
    h[0] = 0.25 / spacing**2
    odd = n % 2 == 1
    h[odd] = -1.0 / (np.pi * n[odd] * spacing) ** 2
    resp = np.real(np.fft.fft(h)) * spacing
    freq = np.abs(np.fft.fftfreq(size))  # cycles per sample, in [0, 0.5]
    rel = freq / 0.5
    window = np.where(rel <= hann_cutoff, 0.5 * (1 + np.cos(np.pi * rel / hann_cutoff)), 0.0)
    return resp * window


def fdk_reconstruct(proj: ProjectionStack, geom: ScanGeometry, hann_cutoff: float = 0.3) -> Volume:
    """Feldkamp-Davis-Kress reconstruction over the scan's angular span.

    Cosine pre-weighting, row-wise Hann-apodised ramp filtering on the
    detector rescaled to the rotation axis, then voxel-driven distance
    weighted back projection scaled by the angular increment (divided by the
    average ray redundancy for spans past 180 degrees). No short-scan
    weighting is applied, so 180-degree scans carry the usual cone/fan
    redundancy artifacts.
    """
    if proj.tag == TRANSMISSION:
        raise ValueError("fdk_reconstruct expects line_integral or post_log data")
    if proj.n_views < 1:
        raise ValueError("fdk_reconstruct needs at least one view")
    if tuple(proj.data.shape) != geom.proj_shape:
        raise ValueError(f"projection shape {proj.data.shape} does not match geometry {geom.proj_shape}")
    R, D = geom.source_to_axis_mm, geom.source_to_detector_mm
    scale_iso = R / D
    rows, cols = geom.detector_coords()
    v_iso, u_iso = rows * scale_iso, cols * scale_iso
    du = geom.detector_pixel_mm * scale_iso

    vv, uu = np.meshgrid(v_iso, u_iso, indexing="ij")
    cosw = R / np.sqrt(R**2 + uu**2 + vv**2)
    weighted = proj.data.astype(np.float64) * cosw

    ncols = geom.detector_cols
    resp = ramp_filter(ncols, du, hann_cutoff)
    size = resp.size
    spec = np.fft.fft(weighted, n=size, axis=2)
    filtered = np.real(np.fft.ifft(spec * resp, axis=2))[:, :, :ncols]

    nz, ny, nx = geom.volume_shape
    p = geom.voxel_mm
    x = (np.arange(nx) - (nx - 1) / 2) * p
    y = (np.arange(ny) - (ny - 1) / 2) * p
    z = (np.arange(nz) - (nz - 1) / 2) * p
    yy, xx = np.meshgrid(y, x, indexing="ij")  # (ny, nx)
    out = np.zeros((nz, ny, nx))
    for view, beta in enumerate(proj.angles):
        c, s = math.cos(beta), math.sin(beta)
        t_src = xx * c + yy * s
        t_col = -xx * s + yy * c
        mag = R / (R - t_src)  # (ny, nx)
        col_idx = (t_col * mag - u_iso[0]) / du
        row_idx = (z[:, None, None] * mag[None] - v_iso[0]) / du
        coords = np.stack(
            (row_idx, np.broadcast_to(col_idx, (nz, ny, nx))),
        )
        sample = ndimage.map_coordinates(filtered[view], coords.reshape(2, -1), order=1, mode="constant", cval=0.0)
        out += (mag**2)[None] * sample.reshape(nz, ny, nx)
    # spans beyond 180 degrees see each ray more than once
    out *= geom.angle_step * min(1.0, math.pi / math.radians(geom.angular_span_deg))
    return Volume(out, geom.voxel_mm)
