"""Swap-Net: a 2.5D residual network that cycles its channel axis through x, y, z.

The network acts on a volume tensor laid out canonically as ``(nx, ny, nz)``.
Each block picks one spatial axis as the channel dimension and runs
conv-ReLU-conv-ReLU-conv over the plane of the other two, then adds the
block input. A block whose channel axis is ``a`` holds its data as
``(a, p, q)`` with ``p, q`` the two remaining axes in canonical order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor, add, conv2d, permute_axes, relu, tensor

AXES = ("x", "y", "z")
CONVS_PER_BLOCK = 3
KERNEL = 3

VARIANTS = ("swap", "non_swap")


def block_layout(axis: str) -> tuple[int, int, int]:
    """Canonical-axis order for a block whose channel axis is ``axis``."""
    a = AXES.index(axis)
    rest = [i for i in range(3) if i != a]
    return (a, rest[0], rest[1])


def _relative_order(src: Sequence[int], dst: Sequence[int]) -> tuple[int, ...]:
    # order such that transpose(data_in_src_layout, order) is in dst layout
    return tuple(list(src).index(d) for d in dst)


@dataclass(frozen=True)
class SwapNetConfig:
    extents: tuple[int, int, int]
    swap_order: tuple[str, str, str] = ("x", "y", "z")
    variant: str = "swap"

    def __post_init__(self):
        object.__setattr__(self, "extents", tuple(int(e) for e in self.extents))
        object.__setattr__(self, "swap_order", tuple(self.swap_order))
        if len(self.extents) != 3 or min(self.extents) < 1:
            raise ValueError(f"extents must be three positive ints, got {self.extents}")
        if sorted(self.swap_order) != sorted(AXES):
            raise ValueError(f"swap_order must be a permutation of {AXES}, got {self.swap_order}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @property
    def block_axes(self) -> tuple[str, str, str]:
        """Channel axis used by each of the three blocks."""
        if self.variant == "non_swap":
            return (self.swap_order[0],) * 3
        return self.swap_order

    @property
    def channels(self) -> tuple[int, int, int]:
        return tuple(self.extents[AXES.index(a)] for a in self.block_axes)

    @property
    def label(self) -> str:
        return "non-swap" if self.variant == "non_swap" else "-".join(self.swap_order)


@dataclass
class SwapNetWeights:
    """Per block: three (C, C, 3, 3) kernels and three (C,) biases."""

    kernels: list[list[Tensor]] = field(default_factory=list)
    biases: list[list[Tensor]] = field(default_factory=list)

    def parameters(self) -> list[Tensor]:
        out = []
        for ks, bs in zip(self.kernels, self.biases):
            for k, b in zip(ks, bs):
                out.extend((k, b))
        return out

    def num_scalars(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def copy(self) -> "SwapNetWeights":
        return SwapNetWeights(
            kernels=[[tensor(k.data, dtype=k.dtype, requires_grad=k.requires_grad) for k in ks] for ks in self.kernels],
            biases=[[tensor(b.data, dtype=b.dtype, requires_grad=b.requires_grad) for b in bs] for bs in self.biases],
        )

    def astype(self, dtype) -> "SwapNetWeights":
        return SwapNetWeights(
            kernels=[[tensor(k.data, dtype=dtype, requires_grad=True) for k in ks] for ks in self.kernels],
            biases=[[tensor(b.data, dtype=dtype, requires_grad=True) for b in bs] for bs in self.biases],
        )


def parameter_count(cfg: SwapNetConfig) -> int:
    return sum(CONVS_PER_BLOCK * (c * c * KERNEL * KERNEL + c) for c in cfg.channels)


def init_weights(cfg: SwapNetConfig, seed: int = 0, dtype=np.float32, last_gain: float = 1.0) -> SwapNetWeights:
    """Kaiming (fan-in, ReLU gain) normal kernels and zero biases.

    ``last_gain`` rescales the final conv of every block; 0 starts each
    residual branch switched off so the untrained network is the identity.
    """
    rng = np.random.default_rng(seed)
    w = SwapNetWeights()
    for c in cfg.channels:
        std = np.sqrt(2.0 / (c * KERNEL * KERNEL))
        gains = [1.0] * (CONVS_PER_BLOCK - 1) + [last_gain]
        w.kernels.append(
            [
                tensor(g * rng.normal(0.0, std, size=(c, c, KERNEL, KERNEL)), dtype=dtype, requires_grad=True)
                for g in gains
            ]
        )
        w.biases.append([tensor(np.zeros(c), dtype=dtype, requires_grad=True) for _ in range(CONVS_PER_BLOCK)])
    return w


def zero_weights(cfg: SwapNetConfig, dtype=np.float32) -> SwapNetWeights:
    w = SwapNetWeights()
    for c in cfg.channels:
        w.kernels.append([tensor(np.zeros((c, c, KERNEL, KERNEL)), dtype=dtype, requires_grad=True) for _ in range(3)])
        w.biases.append([tensor(np.zeros(c), dtype=dtype, requires_grad=True) for _ in range(3)])
    return w


def check_weights(cfg: SwapNetConfig, weights: SwapNetWeights) -> None:
    if len(weights.kernels) != 3 or len(weights.biases) != 3:
        raise ValueError("weights must hold exactly three blocks")
    for i, c in enumerate(cfg.channels):
        for k, b in zip(weights.kernels[i], weights.biases[i]):
            if k.shape != (c, c, KERNEL, KERNEL) or b.shape != (c,):
                raise ValueError(
                    f"block {i}: expected kernel {(c, c, KERNEL, KERNEL)} and bias {(c,)}, "
                    f"got {k.shape} and {b.shape}"
                )


def residual_block(h: Tensor, kernels: Sequence[Tensor], biases: Sequence[Tensor]) -> Tensor:
    """conv-ReLU-conv-ReLU-conv plus identity, in the tensor's own layout."""
    t = relu(conv2d(h, kernels[0], biases[0]))
    t = relu(conv2d(t, kernels[1], biases[1]))
    t = conv2d(t, kernels[2], biases[2])
    return add(h, t)


def _check_input(cfg: SwapNetConfig, x: Tensor) -> None:
    if tuple(x.shape) != cfg.extents:
        raise ValueError(f"input extents {tuple(x.shape)} do not match config extents {cfg.extents}")


def forward(cfg: SwapNetConfig, weights: SwapNetWeights, x: Tensor) -> Tensor:
    """Run the network on a canonical ``(nx, ny, nz)`` tensor."""
    if cfg.variant == "non_swap":
        return forward_non_swap(cfg, weights, x)
    _check_input(cfg, x)
    layout = (0, 1, 2)
    h = x
    for i, axis in enumerate(cfg.block_axes):
        target = block_layout(axis)
        if target != layout:
            h = permute_axes(h, _relative_order(layout, target))
            layout = target
        h = residual_block(h, weights.kernels[i], weights.biases[i])
    if layout != (0, 1, 2):
        h = permute_axes(h, _relative_order(layout, (0, 1, 2)))
    return h


def forward_non_swap(cfg: SwapNetConfig, weights: SwapNetWeights, x: Tensor) -> Tensor:
    """Ablation: the same three blocks all convolving with one fixed channel axis."""
    _check_input(cfg, x)
    layout = block_layout(cfg.swap_order[0])
    h = x if layout == (0, 1, 2) else permute_axes(x, layout)
    for i in range(3):
        h = residual_block(h, weights.kernels[i], weights.biases[i])
    if layout != (0, 1, 2):
        h = permute_axes(h, _relative_order(layout, (0, 1, 2)))
    return h


def predict(cfg: SwapNetConfig, weights: SwapNetWeights, volume_xyz: np.ndarray) -> np.ndarray:
    """Inference on a plain array in canonical layout; no graph is kept."""
    frozen = SwapNetWeights(
        kernels=[[Tensor(k.data) for k in ks] for ks in weights.kernels],
        biases=[[Tensor(b.data) for b in bs] for bs in weights.biases],
    )
    dtype = weights.kernels[0][0].dtype
    return forward(cfg, frozen, Tensor(np.asarray(volume_xyz, dtype=dtype))).data
