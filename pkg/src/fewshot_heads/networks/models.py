"""The embedder, generator, and discriminator networks.

The embedder and the discriminator trunk share one architecture: residual
downsampling blocks from the input resolution to 4x4 (the discriminator adds
one extra residual block at 4x4), then ReLU, global sum pooling over the
spatial dims, and a projection to the embedding dimension. Inputs are the
frame and its landmark image concatenated channel-wise (6 channels).

The generator encodes the landmark image with instance-normalized downsampling
blocks, then runs adaptive bottleneck/upsampling blocks whose AdaIN scales and
biases come from a flat adaptive vector. During meta-learning that vector is
the projection P @ e of the averaged identity embedding; during fine-tuning it
is optimized directly. AdaIN scale uses the 1+delta convention, so an all-zero
adaptive vector leaves every adaptive norm as pure standardization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from fewshot_heads.networks.config import (
    IMAGE_CHANNELS,
    TRUNK_INPUT_CHANNELS,
    NetworkConfig,
    adaptive_param_length,
)
from fewshot_heads.networks.layers import (
    INIT_STD,
    BottleneckBlock,
    DownBlock,
    PlainBlock,
    SelfAttention,
    SNConv2d,
    SNLinear,
    UpBlock,
    adain,
)


@dataclass(frozen=True)
class AdaptiveSlice:
    """Where one adaptive norm layer reads in the flat adaptive vector."""

    name: str
    channels: int
    scale_offset: int
    bias_offset: int


def _check_image_batch(x: torch.Tensor, resolution: int, what: str) -> torch.Tensor:
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != IMAGE_CHANNELS or x.shape[2:] != (resolution, resolution):
        raise ValueError(
            f"{what} must be (B, {IMAGE_CHANNELS}, {resolution}, {resolution}), got {tuple(x.shape)}"
        )
    return x


class FeatureTrunk(nn.Module):
    """Shared downsampling trunk ending in an embedding-dim projection."""

    def __init__(self, config: NetworkConfig, extra_block: bool):
        super().__init__()
        channels = config.trunk_channels()
        attn_after = set(config.down_attention_indices(len(channels)))
        stages: list[nn.Module] = []
        cin = TRUNK_INPUT_CHANNELS
        for i, cout in enumerate(channels):
            stages.append(DownBlock(cin, cout, instance_norm=False, first=(i == 0)))
            if i in attn_after:
                stages.append(SelfAttention(cout))
            cin = cout
        if extra_block:
            stages.append(PlainBlock(channels[-1]))
        self.stages = nn.ModuleList(stages)
        self.project = SNLinear(channels[-1], config.embedding_dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        features = []
        for stage in self.stages:
            x = stage(x)
            if not isinstance(stage, SelfAttention):
                features.append(x)
        pooled = F.relu(x).sum(dim=(2, 3))
        return self.project(pooled), features


class Embedder(nn.Module):
    """Maps (frame, landmark image) pairs to identity embedding vectors."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        self.trunk = FeatureTrunk(config, extra_block=False)

    def forward(self, frames: torch.Tensor, landmark_images: torch.Tensor) -> torch.Tensor:
        frames = _check_image_batch(frames, self.config.resolution, "frames")
        landmark_images = _check_image_batch(landmark_images, self.config.resolution, "landmark images")
        embedding, _ = self.trunk(torch.cat([frames, landmark_images], dim=1))
        return embedding


def embed_frame(embedder: Embedder, frame: torch.Tensor, landmark_image: torch.Tensor) -> torch.Tensor:
    """Embedding of a single (3, H, W) frame/landmark pair as a length-N vector."""
    return embedder(frame.unsqueeze(0), landmark_image.unsqueeze(0)).squeeze(0)


def average_embeddings(vectors: Sequence[torch.Tensor] | torch.Tensor) -> torch.Tensor:
    """Elementwise mean of a non-empty collection of equal-length embeddings."""
    if isinstance(vectors, torch.Tensor):
        if vectors.dim() < 2 or vectors.shape[-2] == 0:
            raise ValueError("need a non-empty (..., K, N) stack of embeddings")
        return vectors.mean(dim=-2)
    if len(vectors) == 0:
        raise ValueError("cannot average an empty list of embeddings")
    return torch.stack(list(vectors), dim=0).mean(dim=0)


def project_adaptive(projection: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
    """Flat adaptive parameter vector P @ e (batched when e is (B, N))."""
    if projection.shape[1] != embedding.shape[-1]:
        raise ValueError(
            f"projection expects embeddings of length {projection.shape[1]}, got {embedding.shape[-1]}"
        )
    return embedding @ projection.t()


class Generator(nn.Module):
    """Landmark-conditioned synthesis network with adaptive normalization."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        downs = config.generator_down_channels()
        ups = config.generator_up_channels()
        attn_down = set(config.down_attention_indices(len(downs)))
        attn_up = set(config.up_attention_indices())

        encoder: list[nn.Module] = []
        cin = IMAGE_CHANNELS
        for i, cout in enumerate(downs):
            encoder.append(DownBlock(cin, cout, instance_norm=True, first=(i == 0)))
            if i in attn_down:
                encoder.append(SelfAttention(cout))
            cin = cout
        self.encoder = nn.ModuleList(encoder)

        synthesis: list[nn.Module] = []
        for _ in range(config.n_bottleneck_blocks):
            synthesis.append(BottleneckBlock(config.bottleneck_channels))
        cin = config.bottleneck_channels
        for j, cout in enumerate(ups):
            synthesis.append(UpBlock(cin, cout))
            if j in attn_up:
                synthesis.append(SelfAttention(cout))
            cin = cout
        self.synthesis = nn.ModuleList(synthesis)
        self.final_channels = ups[-1]
        self.final_conv = SNConv2d(ups[-1], IMAGE_CHANNELS, 3, padding=1)

        self.adaptive_layout = self._build_layout()
        self.adaptive_size = self.adaptive_layout[-1].bias_offset + self.adaptive_layout[-1].channels
        assert self.adaptive_size == adaptive_param_length(config)
        self.projection = nn.Parameter(torch.randn(self.adaptive_size, config.embedding_dim) * INIT_STD)

    def _build_layout(self) -> list[AdaptiveSlice]:
        layout = []
        offset = 0
        for idx, module in enumerate(self.synthesis):
            if isinstance(module, SelfAttention):
                continue
            for norm_idx, ch in enumerate(module.norm_channels, start=1):
                layout.append(AdaptiveSlice(f"synthesis.{idx}.norm{norm_idx}", ch, offset, offset + ch))
                offset += 2 * ch
        layout.append(AdaptiveSlice("final_norm", self.final_channels, offset, offset + self.final_channels))
        return layout

    def adaptive_from_embedding(self, embedding: torch.Tensor) -> torch.Tensor:
        return project_adaptive(self.projection, embedding)

    def split_adaptive(self, adaptive: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
        """Per-norm (scale, bias) pairs; scale applies the 1+delta convention."""
        if adaptive.dim() == 1:
            adaptive = adaptive.unsqueeze(0)
        if adaptive.shape[-1] != self.adaptive_size:
            raise ValueError(
                f"adaptive vector length {adaptive.shape[-1]} != expected {self.adaptive_size}"
            )
        pairs = []
        for s in self.adaptive_layout:
            delta = adaptive[:, s.scale_offset : s.scale_offset + s.channels]
            bias = adaptive[:, s.bias_offset : s.bias_offset + s.channels]
            pairs.append((1.0 + delta, bias))
        return pairs

    def forward(self, landmark_images: torch.Tensor, adaptive: torch.Tensor) -> torch.Tensor:
        landmark_images = _check_image_batch(landmark_images, self.config.resolution, "landmark images")
        batch = landmark_images.shape[0]
        if adaptive.dim() == 2 and adaptive.shape[0] not in (1, batch):
            raise ValueError(f"adaptive batch {adaptive.shape[0]} incompatible with image batch {batch}")
        pairs = iter(self.split_adaptive(adaptive))

        h = landmark_images
        for module in self.encoder:
            h = module(h)
        for module in self.synthesis:
            if isinstance(module, SelfAttention):
                h = module(h)
            else:
                h = module(h, (next(pairs), next(pairs)))
        scale, bias = next(pairs)
        h = adain(h, scale, bias)
        return torch.tanh(self.final_conv(F.relu(h)))


def projection_score(features: torch.Tensor, direction: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Realism score v^T w + b; shared by both discriminator heads so the
    fine-tune initialization identity holds bitwise."""
    return (features * direction).sum(dim=-1) + bias


class Discriminator(nn.Module):
    """Conditional projection discriminator over (frame, landmark, video index)."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        self.trunk = FeatureTrunk(config, extra_block=True)
        self.video_embeddings = nn.Parameter(
            torch.randn(config.embedding_dim, config.num_videos) * INIT_STD
        )  # columns are per-video embeddings
        self.shared_direction = nn.Parameter(torch.randn(config.embedding_dim) * INIT_STD)
        self.bias = nn.Parameter(torch.zeros(()))

    def forward(
        self,
        frames: torch.Tensor,
        landmark_images: torch.Tensor,
        video_indices: torch.Tensor | Sequence[int] | int,
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        frames = _check_image_batch(frames, self.config.resolution, "frames")
        landmark_images = _check_image_batch(landmark_images, self.config.resolution, "landmark images")
        idx = torch.as_tensor(video_indices, dtype=torch.long, device=frames.device).reshape(-1)
        if idx.numel() == 1 and frames.shape[0] > 1:
            idx = idx.expand(frames.shape[0])
        if torch.any(idx < 0) or torch.any(idx >= self.config.num_videos):
            raise ValueError(f"video index out of range [0, {self.config.num_videos})")
        v, features = self.trunk(torch.cat([frames, landmark_images], dim=1))
        direction = self.video_embeddings[:, idx].t() + self.shared_direction
        return projection_score(v, direction, self.bias), features


class FinetuneDiscriminator(nn.Module):
    """Personalized discriminator: the trunk plus a single free direction w'."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        self.trunk = FeatureTrunk(config, extra_block=True)
        self.direction = nn.Parameter(torch.randn(config.embedding_dim) * INIT_STD)
        self.bias = nn.Parameter(torch.zeros(()))

    def forward(
        self, frames: torch.Tensor, landmark_images: torch.Tensor
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        frames = _check_image_batch(frames, self.config.resolution, "frames")
        landmark_images = _check_image_batch(landmark_images, self.config.resolution, "landmark images")
        v, features = self.trunk(torch.cat([frames, landmark_images], dim=1))
        return projection_score(v, self.direction, self.bias), features
