"""Decoder feature-fusion block: residual skip fusion plus a parallel low-rank branch.

The block combines high-resolution encoder features with the upsampled
memory/decoder path in two steps:

    residual_fuse:  y  = ReLU(H(x_high) + x_mem)        H = 3x3 conv + batchnorm
    lora_modulate:  y' = f(y) + alpha * B @ (A @ y)     f = 3x3 conv + batchnorm

A (rank x channels) and B (channels x rank) act per spatial location, i.e.
as 1x1 convolutions over the channel vector. B starts at zero so a fresh
block's low-rank branch is a no-op. Both conv+norm stages expose an
identity mode (dirac kernel, zero bias, frozen unit batch statistics) so
unit tests can remove them from the arithmetic.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Optional

import torch
from torch import nn

from .errors import ConfigurationError, DimensionError, NonFiniteError


@dataclass
class FeatureMap:
    """A rank-4 (batch, channels, height, width) feature array tagged with its stride."""

    data: torch.Tensor
    stride: int

    def __post_init__(self):
        if self.data.dim() != 4:
            raise DimensionError(
                f"feature map must be rank 4 (batch, channels, height, width), got shape {tuple(self.data.shape)}"
            )
        if min(self.data.shape) <= 0:
            raise DimensionError(f"all feature-map dimensions must be positive, got {tuple(self.data.shape)}")
        if self.stride < 1:
            raise ConfigurationError(f"stride must be a positive integer, got {self.stride}")

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape)


@dataclass
class FusionOutput:
    """Result of a full fusion forward, optionally carrying intermediates for checking."""

    value: FeatureMap
    residual: Optional[FeatureMap] = None
    lora_branch: Optional[torch.Tensor] = None
    pre_activation: Optional[torch.Tensor] = None


class ConvNormStage(nn.Module):
    """3x3 convolution followed by batch normalization, no activation."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.norm = nn.BatchNorm2d(channels)

    def set_identity(self):
        """Make the stage compute the identity map (in eval mode).

        Dirac kernel + zero bias for the conv; unit scale, zero shift and
        frozen unit running statistics for the norm. The caller is expected
        to keep the module in eval mode so the frozen statistics are used.
        """
        with torch.no_grad():
            nn.init.dirac_(self.conv.weight)
            nn.init.zeros_(self.conv.bias)
            nn.init.ones_(self.norm.weight)
            nn.init.zeros_(self.norm.bias)
            self.norm.running_mean.zero_()
            self.norm.running_var.fill_(1.0)
        self.eval()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(self.conv(x))


def _check_finite(name: str, x: torch.Tensor):
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"{name} contains non-finite entries; refusing to propagate NaN/Inf")


class FusionBlock(nn.Module):
    """Residual skip fusion with a parallel low-rank modulation branch.

    Args:
        channels: channel width ``d`` of the block.
        rank: low-rank branch rank ``r``; must satisfy ``r < d``.
        alpha: scaling of the low-rank branch.
        lora_enabled: site-level toggle for the low-rank branch.
        learn_alpha: make ``alpha`` a trainable parameter instead of a constant.
    """

    def __init__(
        self,
        channels: int,
        rank: int = 4,
        alpha: float = 1.0,
        lora_enabled: bool = True,
        learn_alpha: bool = False,
    ):
        super().__init__()
        if channels < 1 or rank < 1:
            raise ConfigurationError(f"channels and rank must be positive, got d={channels}, r={rank}")
        if rank >= channels:
            raise ConfigurationError(f"low-rank branch requires r < d, got r={rank}, d={channels}")
        self.channels = channels
        self.rank = rank
        self.lora_enabled = lora_enabled

        self.high_path = ConvNormStage(channels)  # H
        self.main_path = ConvNormStage(channels)  # f
        # Down-projection starts small and random, up-projection at zero so the
        # branch is exactly a no-op at initialization.
        bound = 1.0 / math.sqrt(channels)
        self.lora_down = nn.Parameter(torch.empty(rank, channels).uniform_(-bound, bound))
        self.lora_up = nn.Parameter(torch.zeros(channels, rank))
        if learn_alpha:
            self.alpha = nn.Parameter(torch.tensor(float(alpha)))
        else:
            self.register_buffer("alpha", torch.tensor(float(alpha)))

    def set_identity_paths(self):
        """Put both conv+norm stages into identity mode (for deterministic tests)."""
        self.high_path.set_identity()
        self.main_path.set_identity()
        return self

    def _check_channels(self, fmap: FeatureMap, name: str):
        if fmap.channels != self.channels:
            raise DimensionError(
                f"{name} has {fmap.channels} channels but this block is configured for d={self.channels}"
            )

    def residual_fuse(self, f_high: FeatureMap, f_mem: FeatureMap) -> FeatureMap:
        """ReLU(H(f_high) + f_mem); output entries are all nonnegative."""
        if f_high.shape != f_mem.shape:
            raise DimensionError(
                f"residual fusion needs identical shapes, got high={f_high.shape} vs mem={f_mem.shape}"
            )
        self._check_channels(f_high, "f_high")
        _check_finite("f_high", f_high.data)
        _check_finite("f_mem", f_mem.data)
        pre = self.high_path(f_high.data) + f_mem.data
        return FeatureMap(torch.relu(pre), f_high.stride)

    def lora_branch(self, x: torch.Tensor) -> torch.Tensor:
        """The isolated alpha * B(A x) path, applied per spatial location."""
        if x.shape[1] != self.channels:
            raise ConfigurationError(
                f"low-rank branch expects {self.channels} channels, got {x.shape[1]}"
            )
        down = torch.einsum("rd,bdhw->brhw", self.lora_down, x)
        up = torch.einsum("dr,brhw->bdhw", self.lora_up, down)
        return self.alpha * up

    def lora_modulate(self, f_res: FeatureMap) -> FeatureMap:
        """f(f_res) + alpha * B(A f_res); shape preserving."""
        self._check_channels(f_res, "f_res")
        if self.lora_down.shape != (self.rank, self.channels) or self.lora_up.shape != (
            self.channels,
            self.rank,
        ):
            raise ConfigurationError(
                f"low-rank matrices must have shapes ({self.rank},{self.channels}) and "
                f"({self.channels},{self.rank}), got {tuple(self.lora_down.shape)} and {tuple(self.lora_up.shape)}"
            )
        out = self.main_path(f_res.data)
        if self.lora_enabled:
            out = out + self.lora_branch(f_res.data)
        return FeatureMap(out, f_res.stride)

    def forward(
        self, f_high: FeatureMap, f_mem: FeatureMap, keep_intermediates: bool = False
    ) -> FusionOutput:
        """Residual fusion followed by low-rank modulation."""
        if f_high.shape != f_mem.shape:
            raise DimensionError(
                f"fusion needs identical shapes, got high={f_high.shape} vs mem={f_mem.shape}"
            )
        self._check_channels(f_high, "f_high")
        _check_finite("f_high", f_high.data)
        _check_finite("f_mem", f_mem.data)
        pre = self.high_path(f_high.data) + f_mem.data
        residual = FeatureMap(torch.relu(pre), f_high.stride)
        branch = self.lora_branch(residual.data) if self.lora_enabled else None
        out = self.main_path(residual.data)
        if branch is not None:
            out = out + branch
        value = FeatureMap(out, f_high.stride)
        if keep_intermediates:
            return FusionOutput(value, residual=residual, lora_branch=branch, pre_activation=pre)
        return FusionOutput(value)

    def trainable_param_count(self, lora_only: bool = False) -> int:
        """Number of trainable scalars; exactly 2*r*d when counting the low-rank branch only."""
        if lora_only:
            return self.lora_down.numel() + self.lora_up.numel()
        return sum(p.numel() for p in self.parameters())


@dataclass
class GradCheckResult:
    """Outcome of a central-difference gradient check."""

    max_rel_error: float
    flagged: list = field(default_factory=list)
    checked: int = 0


def grad_check(
    block: FusionBlock,
    f_high: FeatureMap,
    f_mem: FeatureMap,
    epsilon: float = 1e-5,
    seed: int = 0,
) -> GradCheckResult:
    """Compare autograd gradients of the fusion block against central differences.

    Works on a float64 copy of the block in eval mode. The scalar objective is a
    fixed random projection of the output. Coordinates whose perturbation flips
    the ReLU activation pattern (a kink within epsilon) are flagged and excluded
    from the reported maximum.

    Relative error per coordinate: |analytic - numeric| / max(1, |numeric|).
    """
    if not (1e-6 <= epsilon <= 1e-3):
        raise ConfigurationError(f"epsilon must lie in [1e-6, 1e-3], got {epsilon}")
    if f_high.height > 8 or f_high.width > 8:
        raise ConfigurationError(
            f"gradient check requires spatial size <= 8x8, got {f_high.height}x{f_high.width}"
        )

    work = copy.deepcopy(block).double().eval()
    x_high = f_high.data.detach().double().clone().requires_grad_(True)
    x_mem = f_mem.data.detach().double().clone().requires_grad_(True)

    gen = torch.Generator().manual_seed(seed)
    out_shape = f_high.data.shape
    proj = torch.rand(out_shape, generator=gen, dtype=torch.float64)

    res = work(FeatureMap(x_high, f_high.stride), FeatureMap(x_mem, f_mem.stride), keep_intermediates=True)
    loss = (res.value.data * proj).sum()
    params = [(name, p) for name, p in work.named_parameters()]
    leaves = [p for _, p in params] + [x_high, x_mem]
    analytic = torch.autograd.grad(loss, leaves, allow_unused=True)
    analytic = [torch.zeros_like(leaf) if g is None else g for leaf, g in zip(leaves, analytic)]

    names = [name for name, _ in params] + ["input:f_high", "input:f_mem"]
    max_err = 0.0
    flagged = []
    checked = 0
    with torch.no_grad():
        for name, leaf, grad in zip(names, leaves, analytic):
            flat = leaf.view(-1)
            gflat = grad.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                loss_plus, pre_plus = _eval_no_grad(work, x_high, x_mem, f_high.stride, f_mem.stride, proj)
                flat[i] = orig - epsilon
                loss_minus, pre_minus = _eval_no_grad(work, x_high, x_mem, f_high.stride, f_mem.stride, proj)
                flat[i] = orig
                if not torch.equal(pre_plus > 0, pre_minus > 0):
                    flagged.append((name, i))
                    continue
                numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
                err = abs(gflat[i].item() - numeric) / max(1.0, abs(numeric))
                max_err = max(max_err, err)
                checked += 1
    return GradCheckResult(max_rel_error=max_err, flagged=flagged, checked=checked)


def _eval_no_grad(work, x_high, x_mem, stride_high, stride_mem, proj):
    res = work(FeatureMap(x_high, stride_high), FeatureMap(x_mem, stride_mem), keep_intermediates=True)
    return (res.value.data * proj).sum().item(), res.pre_activation.detach()
