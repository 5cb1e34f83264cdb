"""Shared building blocks: spectral norm, AdaIN, self-attention, residual blocks."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

NORM_EPS = 1e-5
SN_EPS = 1e-12
INIT_STD = 0.02


def spectral_normalize(
    weight: torch.Tensor,
    u: torch.Tensor,
    n_power_iterations: int = 1,
    eps: float = SN_EPS,
    update: bool = True,
) -> torch.Tensor:
    """Divide `weight` by its top singular value estimated by power iteration.

    The weight is viewed as a 2-D matrix (out features x rest). `u` is the
    persisted left singular vector estimate; it is advanced in place when
    `update` is true (training forwards) and left untouched otherwise. A zero
    weight matrix is returned unchanged (sigma clamps to eps).
    """
    if n_power_iterations < 1:
        raise ValueError("n_power_iterations must be >= 1")
    mat = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        u_est = u
        for _ in range(n_power_iterations):
            v_est = F.normalize(mat.t() @ u_est, dim=0, eps=eps)
            u_est = F.normalize(mat @ v_est, dim=0, eps=eps)
        if update:
            u.copy_(u_est)
        u_est = u_est.clone()
        v_est = v_est.clone()
    sigma = torch.dot(u_est, mat @ v_est).clamp(min=eps)
    return weight / sigma


class SNConv2d(nn.Module):
    """Conv2d with spectral weight normalization (persisted power-iteration state)."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, bias=True):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = nn.Parameter(
            torch.randn(out_channels, in_channels, kernel_size, kernel_size) * INIT_STD
        )
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        self.register_buffer("u", F.normalize(torch.randn(out_channels), dim=0))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        w = spectral_normalize(self.weight, self.u, update=self.training)
        return F.conv2d(x, w, self.bias, stride=self.stride, padding=self.padding)


class SNLinear(nn.Module):
    """Linear layer with spectral weight normalization."""

    def __init__(self, in_features, out_features, bias=True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features) * INIT_STD)
        self.bias = nn.Parameter(torch.zeros(out_features)) if bias else None
        self.register_buffer("u", F.normalize(torch.randn(out_features), dim=0))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        w = spectral_normalize(self.weight, self.u, update=self.training)
        return F.linear(x, w, self.bias)


def adain(
    feature_map: torch.Tensor,
    scale: torch.Tensor,
    bias: torch.Tensor,
    eps: float = NORM_EPS,
) -> torch.Tensor:
    """Per-channel standardization over the spatial dims, then affine transform.

    Accepts (B, C, H, W) or (C, H, W) feature maps; scale/bias may be (C,) or
    (B, C). `scale` is the full multiplier (callers using the 1+delta
    convention add the 1 before calling).
    """
    squeeze = feature_map.dim() == 3
    x = feature_map.unsqueeze(0) if squeeze else feature_map
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), unbiased=False, keepdim=True)
    normalized = (x - mean) / torch.sqrt(var + eps)
    scale = scale.reshape(-1, x.shape[1]).unsqueeze(-1).unsqueeze(-1)
    bias = bias.reshape(-1, x.shape[1]).unsqueeze(-1).unsqueeze(-1)
    out = scale * normalized + bias
    return out.squeeze(0) if squeeze else out


class InstanceNorm(nn.Module):
    """Non-adaptive instance normalization with learned per-channel affine."""

    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return adain(x, self.weight, self.bias)


class SelfAttention(nn.Module):
    """Residually gated self-attention over spatial positions (gamma starts at 0)."""

    def __init__(self, channels: int):
        super().__init__()
        dk = max(channels // 8, 1)
        dv = max(channels // 2, 1)
        self.query = SNConv2d(channels, dk, 1)
        self.key = SNConv2d(channels, dk, 1)
        self.value = SNConv2d(channels, dv, 1)
        self.out_proj = SNConv2d(dv, channels, 1)
        self.gamma = nn.Parameter(torch.zeros(()))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        n = h * w
        q = self.query(x).reshape(b, -1, n)
        k = self.key(x).reshape(b, -1, n)
        v = self.value(x).reshape(b, -1, n)
        # energy[b, i, j]: similarity of source position i to output position j
        energy = torch.bmm(q.transpose(1, 2), k)
        attention = F.softmax(energy, dim=1)
        o = torch.bmm(v, attention).reshape(b, -1, h, w)
        return x + self.gamma * self.out_proj(o)


class DownBlock(nn.Module):
    """Pre-activated residual block with 2x average-pool downsampling.

    The first block of a network applies no pre-activation (plain conv front),
    matching the trunk layout where subsequent blocks supply the leading ReLU.
    """

    def __init__(self, in_channels: int, out_channels: int, instance_norm: bool = False, first: bool = False):
        super().__init__()
        self.first = first
        self.conv1 = SNConv2d(in_channels, out_channels, 3, padding=1)
        self.conv2 = SNConv2d(out_channels, out_channels, 3, padding=1)
        self.skip = SNConv2d(in_channels, out_channels, 1)
        self.norm1 = InstanceNorm(in_channels) if instance_norm and not first else None
        self.norm2 = InstanceNorm(out_channels) if instance_norm else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        if not self.first:
            if self.norm1 is not None:
                h = self.norm1(h)
            h = F.relu(h)
        h = self.conv1(h)
        if self.norm2 is not None:
            h = self.norm2(h)
        h = F.relu(h)
        h = self.conv2(h)
        h = F.avg_pool2d(h, 2)
        return h + F.avg_pool2d(self.skip(x), 2)


class PlainBlock(nn.Module):
    """Pre-activated residual block at constant resolution (identity skip)."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = SNConv2d(channels, channels, 3, padding=1)
        self.conv2 = SNConv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv2(F.relu(self.conv1(F.relu(x))))
        return x + h


class BottleneckBlock(nn.Module):
    """Adaptive residual block at constant resolution; each norm consumes one
    (scale, bias) pair from the generator's adaptive vector."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = SNConv2d(channels, channels, 3, padding=1)
        self.conv2 = SNConv2d(channels, channels, 3, padding=1)
        self.norm_channels = (channels, channels)

    def forward(self, x: torch.Tensor, ada: tuple) -> torch.Tensor:
        (s1, b1), (s2, b2) = ada
        h = self.conv1(F.relu(adain(x, s1, b1)))
        h = self.conv2(F.relu(adain(h, s2, b2)))
        return x + h


class UpBlock(nn.Module):
    """Adaptive residual block that doubles resolution at its end."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = SNConv2d(in_channels, out_channels, 3, padding=1)
        self.conv2 = SNConv2d(out_channels, out_channels, 3, padding=1)
        self.skip = SNConv2d(in_channels, out_channels, 1)
        self.norm_channels = (in_channels, out_channels)

    def forward(self, x: torch.Tensor, ada: tuple) -> torch.Tensor:
        (s1, b1), (s2, b2) = ada
        h = self.conv1(F.relu(adain(x, s1, b1)))
        h = self.conv2(F.relu(adain(h, s2, b2)))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        return h + F.interpolate(self.skip(x), scale_factor=2, mode="nearest")
