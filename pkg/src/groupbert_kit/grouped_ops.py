"""Grouped (block-diagonal) linear maps, grouped 1-D convolution and GLU."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, _result, apply_mask, bias_add, default_dtype, getitem, mul, sigmoid


class ConfigError(ValueError):
    """Invalid structural configuration (divisibility, kernel size, ...)."""


def truncated_normal(rng: np.random.Generator, shape, std: float, dtype=None, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside +-bound*std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(dtype or default_dtype())


@dataclass
class GroupedWeight:
    """Block-diagonal ``in_features x out_features`` weight stored as its ``groups`` blocks.

    ``blocks`` has shape ``(groups, in_features // groups, out_features // groups)``.
    """

    blocks: Tensor
    bias: Tensor | None = None

    def __post_init__(self):
        if self.blocks.ndim != 3:
            raise ConfigError(f"grouped blocks must be 3-d (groups, b/G, c/G), got {self.blocks.shape}")
        if self.bias is not None and self.bias.shape != (self.out_features,):
            raise ConfigError(f"bias shape {self.bias.shape} != ({self.out_features},)")

    @classmethod
    def create(cls, in_features: int, out_features: int, groups: int, *, rng=None, std: float = 0.02,
               bias: bool = True, requires_grad: bool = False) -> "GroupedWeight":
        check_grouping(in_features, out_features, groups)
        rng = rng if rng is not None else np.random.default_rng()
        shape = (groups, in_features // groups, out_features // groups)
        blocks = Tensor(truncated_normal(rng, shape, std), requires_grad=requires_grad)
        b = Tensor(np.zeros(out_features, dtype=default_dtype()), requires_grad=requires_grad) if bias else None
        return cls(blocks, b)

    @property
    def groups(self) -> int:
        return self.blocks.shape[0]

    @property
    def in_features(self) -> int:
        return self.blocks.shape[0] * self.blocks.shape[1]

    @property
    def out_features(self) -> int:
        return self.blocks.shape[0] * self.blocks.shape[2]

    @property
    def num_weight_params(self) -> int:
        return self.blocks.size

    @property
    def num_params(self) -> int:
        return self.blocks.size + (self.bias.size if self.bias is not None else 0)


def check_grouping(in_features: int, out_features: int, groups: int) -> None:
    if groups < 1:
        raise ConfigError(f"groups must be a positive integer, got {groups}")
    bad = [name for name, n in (("in_features", in_features), ("out_features", out_features)) if n % groups]
    if bad:
        raise ConfigError(f"groups={groups} does not divide {', '.join(bad)} "
                          f"(in_features={in_features}, out_features={out_features})")


def grouped_matmul(h: Tensor, blocks: Tensor) -> Tensor:
    """``h[..., b]`` times the block-diagonal matrix held by ``blocks[G, b/G, c/G]``.

    Each group is an independent dense product of the matching input slice
    with its block; the group outputs are laid side by side.
    """
    g, bg, cg = blocks.shape
    b = g * bg
    if h.shape[-1] != b:
        raise ShapeError(f"grouped_linear: input extent {h.shape[-1]} != in_features {b}")
    lead = h.shape[:-1]
    n = int(np.prod(lead)) if lead else 1
    x = h.data.reshape(n, g, bg).transpose(1, 0, 2)  # (G, N, b/G)
    w = blocks.data
    out = np.matmul(x, w)  # (G, N, c/G)

    def adjoint(grad):
        gy = grad.reshape(n, g, cg).transpose(1, 0, 2)
        gx = np.matmul(gy, w.transpose(0, 2, 1)).transpose(1, 0, 2).reshape(h.shape)
        gw = np.matmul(x.transpose(0, 2, 1), gy)
        return gx, gw

    return _result(out.transpose(1, 0, 2).reshape(*lead, g * cg), (h, blocks), adjoint, "grouped_matmul")


def grouped_linear(h: Tensor, w: GroupedWeight) -> Tensor:
    out = grouped_matmul(h, w.blocks)
    return bias_add(out, w.bias) if w.bias is not None else out


def expand_dense(w: GroupedWeight | Tensor) -> Tensor:
    """The full ``b x c`` block-diagonal matrix, zeros off the blocks."""
    blocks = w.blocks if isinstance(w, GroupedWeight) else w
    g, bg, cg = blocks.shape
    dense = np.zeros((g * bg, g * cg), dtype=blocks.dtype)
    for i in range(g):
        dense[i * bg:(i + 1) * bg, i * cg:(i + 1) * cg] = blocks.data[i]
    return Tensor(dense, dtype=blocks.dtype)


@dataclass
class ConvWeight:
    """Grouped 1-D convolution weight.

    ``kernels`` has shape ``(channels // group_size, kernel_size, group_size, group_size)``
    and is indexed ``[group, tap, in_channel, out_channel]``. Group ``g`` owns
    channels ``[g*s, (g+1)*s)``.
    """

    kernels: Tensor
    bias: Tensor | None = None

    def __post_init__(self):
        if self.kernels.ndim != 4 or self.kernels.shape[2] != self.kernels.shape[3]:
            raise ConfigError(f"conv kernels must be (d/s, k, s, s), got {self.kernels.shape}")
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"only odd kernel sizes are supported, got {self.kernel_size}")
        if self.bias is not None and self.bias.shape != (self.channels,):
            raise ConfigError(f"conv bias shape {self.bias.shape} != ({self.channels},)")

    @classmethod
    def create(cls, channels: int, kernel_size: int = 7, group_size: int = 16, *, rng=None, std: float = 0.02,
               bias: bool = True, requires_grad: bool = False) -> "ConvWeight":
        check_conv(channels, kernel_size, group_size)
        rng = rng if rng is not None else np.random.default_rng()
        shape = (channels // group_size, kernel_size, group_size, group_size)
        kernels = Tensor(truncated_normal(rng, shape, std), requires_grad=requires_grad)
        b = Tensor(np.zeros(channels, dtype=default_dtype()), requires_grad=requires_grad) if bias else None
        return cls(kernels, b)

    @property
    def kernel_size(self) -> int:
        return self.kernels.shape[1]

    @property
    def group_size(self) -> int:
        return self.kernels.shape[2]

    @property
    def channels(self) -> int:
        return self.kernels.shape[0] * self.kernels.shape[2]

    @property
    def num_params(self) -> int:
        return self.kernels.size + (self.bias.size if self.bias is not None else 0)


def check_conv(channels: int, kernel_size: int, group_size: int) -> None:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigError(f"conv kernel size must be a positive odd integer, got {kernel_size}")
    if group_size < 1 or channels % group_size:
        raise ConfigError(f"conv group size {group_size} does not divide channels {channels}")


def conv1d_core(x: Tensor, kernels: Tensor) -> Tensor:
    """Unmasked "same"-padded grouped convolution of ``x[B, L, d]`` along ``L``."""
    ng, k, s, _ = kernels.shape
    if x.ndim != 3 or x.shape[-1] != ng * s:
        raise ShapeError(f"grouped_conv1d: input {x.shape} does not have {ng * s} channels")
    batch, length, d = x.shape
    half = (k - 1) // 2
    xp = np.zeros((batch, length + k - 1, d), dtype=x.dtype)
    xp[:, half:half + length] = x.data
    # windows[b, l, c, t] = xp[b, l + t, c]
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)
    cols = windows.reshape(batch, length, ng, s, k).transpose(2, 0, 1, 4, 3).reshape(ng, batch * length, k * s)
    wmat = kernels.data.reshape(ng, k * s, s)
    out = np.matmul(cols, wmat)  # (ng, B*L, s)

    def adjoint(grad):
        gy = grad.reshape(batch * length, ng, s).transpose(1, 0, 2)
        gw = np.matmul(cols.transpose(0, 2, 1), gy).reshape(kernels.shape)
        gcols = np.matmul(gy, wmat.transpose(0, 2, 1)).reshape(ng, batch, length, k, s)
        gcols = gcols.transpose(1, 2, 3, 0, 4).reshape(batch, length, k, d)
        gxp = np.zeros_like(xp)
        for t in range(k):
            gxp[:, t:t + length] += gcols[:, :, t]
        return gxp[:, half:half + length], gw

    y = out.transpose(1, 0, 2).reshape(batch, length, d)
    return _result(y, (x, kernels), adjoint, "grouped_conv1d")


def grouped_conv1d(x: Tensor, w: ConvWeight, mask: np.ndarray | None = None) -> Tensor:
    """Grouped convolution over the sequence axis of ``x[B, L, d]``.

    Padding positions (``mask`` false) are zeroed before the convolution and
    again on the output, so they never leak into real tokens.
    """
    if x.ndim != 3 or x.shape[1] < 1:
        raise ShapeError(f"grouped_conv1d expects [batch, length, channels], got {x.shape}")
    if mask is not None:
        x = apply_mask(x, mask)
    y = conv1d_core(x, w.kernels)
    if w.bias is not None:
        y = bias_add(y, w.bias)
    if mask is not None:
        y = apply_mask(y, mask)
    return y


def glu(x: Tensor) -> Tensor:
    """First channel half gated by the sigmoid of the second half."""
    two_d = x.shape[-1]
    if two_d % 2:
        raise ShapeError(f"glu needs an even channel extent, got {two_d}")
    d = two_d // 2
    return mul(getitem(x, (Ellipsis, slice(0, d))), sigmoid(getitem(x, (Ellipsis, slice(d, two_d)))))
