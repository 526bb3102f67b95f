"""Little-endian binary formats for volumes, projection stacks and weights.

Volume ``SWV1``: 3 x u32 extents (nx, ny, nz), 3 x f32 pitch in mm, then
f32 values with x fastest.

Projections ``SWP1``: u32 n_views, u32 rows, u32 cols, n_views x f32
angles (radians), u8 tag, then f32 values as [view, row, col].

Weights ``SWW1``: config block (3 x u32 extents, 3 x u8 swap-order axis
indices, u8 variant, u8 dtype code), then for each block its three kernels
followed by its three biases, in the stored dtype.

Manifests are JSON with sorted keys. Readers check the whole file size
before decoding anything, so truncated or padded files are rejected
without a partial load.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .geometry import SEMANTIC_TAGS, ProjectionStack, Volume
from .swapnet import AXES, CONVS_PER_BLOCK, KERNEL, VARIANTS, SwapNetConfig, SwapNetWeights
from .tensor import tensor

VOLUME_MAGIC = b"SWV1"
PROJ_MAGIC = b"SWP1"
WEIGHTS_MAGIC = b"SWW1"
MANIFEST_VERSION = 1

_F32 = np.dtype("<f4")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    """A file does not decode as the expected format."""


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, field: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated while reading {field}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, field: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), field))

    def array(self, dtype: np.dtype, count: int, field: str) -> np.ndarray:
        return np.frombuffer(self.take(count * dtype.itemsize, field), dtype=dtype).copy()

    def magic(self, expected: bytes) -> None:
        got = self.take(4, "magic")
        if got != expected:
            raise FormatError(f"{self.path}: bad magic {got!r}, expected {expected!r}")

    def expect_size(self, total: int) -> None:
        if len(self.buf) < total:
            raise FormatError(f"{self.path}: truncated payload ({len(self.buf)} of {total} bytes)")
        if len(self.buf) > total:
            raise FormatError(f"{self.path}: {len(self.buf) - total} trailing bytes after payload")

    def positive(self, values, field: str) -> None:
        if any(v < 1 for v in values):
            raise FormatError(f"{self.path}: {field} must be >= 1, got {tuple(values)}")


def _read(path) -> _Reader:
    return _Reader(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------------------
# volumes
# ---------------------------------------------------------------------------


def save_volume(path, vol: Volume) -> None:
    nz, ny, nx = vol.shape
    head = VOLUME_MAGIC + struct.pack("<3I3f", nx, ny, nz, vol.voxel_mm, vol.voxel_mm, vol.voxel_mm)
    Path(path).write_bytes(head + np.ascontiguousarray(vol.data, dtype=_F32).tobytes())


def load_volume(path) -> Volume:
    r = _read(path)
    r.magic(VOLUME_MAGIC)
    nx, ny, nz = r.unpack("3I", "extents")
    r.positive((nx, ny, nz), "extents")
    pitch = r.unpack("3f", "voxel pitch")
    if not (pitch[0] == pitch[1] == pitch[2]) or not pitch[0] > 0:
        raise FormatError(f"{r.path}: voxel pitch must be isotropic and positive, got {pitch}")
    r.expect_size(r.pos + nx * ny * nz * 4)
    data = r.array(_F32, nx * ny * nz, "payload").reshape(nz, ny, nx)
    return Volume(data.astype(np.float32), float(pitch[0]))


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------


def save_projections(path, proj: ProjectionStack) -> None:
    n, rows, cols = proj.data.shape
    head = PROJ_MAGIC + struct.pack("<3I", n, rows, cols)
    angles = np.asarray(proj.angles, dtype=_F32).tobytes()
    tag = struct.pack("<B", SEMANTIC_TAGS.index(proj.tag))
    Path(path).write_bytes(head + angles + tag + np.ascontiguousarray(proj.data, dtype=_F32).tobytes())


def load_projections(path) -> ProjectionStack:
    r = _read(path)
    r.magic(PROJ_MAGIC)
    n, rows, cols = r.unpack("3I", "dimensions")
    r.positive((n, rows, cols), "dimensions")
    r.expect_size(r.pos + 4 * n + 1 + 4 * n * rows * cols)
    angles = r.array(_F32, n, "angles")
    (code,) = r.unpack("B", "semantic tag")
    if code >= len(SEMANTIC_TAGS):
        raise FormatError(f"{r.path}: unknown semantic tag code {code}")
    data = r.array(_F32, n * rows * cols, "payload").reshape(n, rows, cols)
    return ProjectionStack(data.astype(np.float32), angles.astype(np.float64), SEMANTIC_TAGS[code])


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


def save_weights(path, cfg: SwapNetConfig, weights: SwapNetWeights) -> None:
    dtype = np.dtype(weights.kernels[0][0].dtype).newbyteorder("<")
    code = {v.str: k for k, v in _DTYPES.items()}.get(dtype.str)
    if code is None:
        raise ValueError(f"cannot store weights of dtype {dtype}")
    head = WEIGHTS_MAGIC + struct.pack(
        "<3I5B", *cfg.extents, *(AXES.index(a) for a in cfg.swap_order), VARIANTS.index(cfg.variant), code
    )
    parts = [head]
    for ks, bs in zip(weights.kernels, weights.biases):
        parts += [np.ascontiguousarray(k.data, dtype=dtype).tobytes() for k in ks]
        parts += [np.ascontiguousarray(b.data, dtype=dtype).tobytes() for b in bs]
    Path(path).write_bytes(b"".join(parts))


def load_weights(path) -> tuple[SwapNetConfig, SwapNetWeights]:
    r = _read(path)
    r.magic(WEIGHTS_MAGIC)
    ext = r.unpack("3I", "config extents")
    r.positive(ext, "config extents")
    *order, variant, code = r.unpack("5B", "config flags")
    if sorted(order) != [0, 1, 2]:
        raise FormatError(f"{r.path}: swap order {tuple(order)} is not a permutation of the axes")
    if variant >= len(VARIANTS):
        raise FormatError(f"{r.path}: unknown variant code {variant}")
    if code not in _DTYPES:
        raise FormatError(f"{r.path}: unknown dtype code {code}")
    cfg = SwapNetConfig(tuple(ext), tuple(AXES[i] for i in order), VARIANTS[variant])
    dtype = _DTYPES[code]
    per_block = [CONVS_PER_BLOCK * (c * c * KERNEL * KERNEL + c) for c in cfg.channels]
    r.expect_size(r.pos + sum(per_block) * dtype.itemsize)
    w = SwapNetWeights()
    native = dtype.newbyteorder("=")
    for i, c in enumerate(cfg.channels):
        shape = (c, c, KERNEL, KERNEL)
        ks = [r.array(dtype, c * c * KERNEL * KERNEL, f"block {i} kernel {j}").reshape(shape) for j in range(3)]
        bs = [r.array(dtype, c, f"block {i} bias {j}") for j in range(3)]
        w.kernels.append([tensor(k, dtype=native, requires_grad=True) for k in ks])
        w.biases.append([tensor(b, dtype=native, requires_grad=True) for b in bs])
    return cfg, w


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def dumps_manifest(manifest: dict) -> str:
    body = {"format_version": MANIFEST_VERSION, **manifest}
    return json.dumps(_jsonable(body), indent=2, sort_keys=True) + "\n"


def save_manifest(path, manifest: dict) -> None:
    Path(path).write_text(dumps_manifest(manifest))


def load_manifest(path) -> dict:
    text = Path(path).read_text()
    try:
        out = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: manifest is not valid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(out, dict) or out.get("format_version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: manifest format_version missing or unsupported")
    return out
