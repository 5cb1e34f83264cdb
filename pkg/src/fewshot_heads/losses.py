"""Training objectives: perceptual content loss, adversarial/feature-matching
terms, embedding match loss, and the discriminator hinge.

All L1 reductions are means (per layer, per element), then weighted sums, so
loss magnitudes are resolution-independent. Every function here is pure and
differentiable through its tensor arguments.

Perceptual feature extractors are pluggable by name. The hermetic default is
`random_pyramid`, a frozen fixed-seed conv stack; `identity` taps the raw
image; `vgg19`/`vggface` require pretrained weights reachable through the
FSH_CACHE directory and raise a configuration error when absent.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from fewshot_heads.errors import ConfigurationError

RANDOM_PYRAMID_SEED = 1844
CACHE_ENV = "FSH_CACHE"

# Layer taps used when the pretrained extractors are configured.
VGG19_DEFAULT_LAYERS = (1, 6, 11, 20, 29)
VGGFACE_DEFAULT_LAYERS = (1, 6, 11, 18, 25)
VGG19_PAPER_WEIGHT = 1.5e-1
VGGFACE_PAPER_WEIGHT = 2.5e-2


@dataclass(frozen=True)
class ExtractorTap:
    """One perceptual term: extractor id, layer ids within it, and its weight."""

    extractor: str
    layers: tuple[int, ...]
    weight: float

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(i) for i in self.layers))
        if not math.isfinite(self.weight) or self.weight < 0:
            raise ConfigurationError(f"extractor weight must be finite and >= 0, got {self.weight}")

    def to_dict(self) -> dict:
        return {"extractor": self.extractor, "layers": list(self.layers), "weight": self.weight}

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractorTap":
        return cls(d["extractor"], tuple(d["layers"]), float(d["weight"]))


def default_content_spec() -> tuple[ExtractorTap, ...]:
    """Hermetic desk-scale stand-in for the pretrained perceptual networks."""
    return (ExtractorTap("random_pyramid", (0, 1, 2, 3), VGG19_PAPER_WEIGHT),)


@dataclass(frozen=True)
class LossWeights:
    """Weights of the meta-learning objective terms."""

    fm_weight: float = 10.0
    mch_weight: float = 10.0
    content: tuple[ExtractorTap, ...] = field(default_factory=default_content_spec)

    def __post_init__(self):
        for name, value in (("fm_weight", self.fm_weight), ("mch_weight", self.mch_weight)):
            if not math.isfinite(value) or value < 0:
                raise ConfigurationError(f"{name} must be finite and >= 0, got {value}")
        if len(self.content) == 0:
            raise ConfigurationError("content spec needs at least one extractor tap")
        object.__setattr__(self, "content", tuple(self.content))

    def to_dict(self) -> dict:
        return {
            "fm_weight": self.fm_weight,
            "mch_weight": self.mch_weight,
            "content": [tap.to_dict() for tap in self.content],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(
            fm_weight=float(d["fm_weight"]),
            mch_weight=float(d["mch_weight"]),
            content=tuple(ExtractorTap.from_dict(t) for t in d["content"]),
        )


# -- feature extractors -------------------------------------------------------------


class IdentityExtractor(nn.Module):
    """Single 'activation': the raw image itself (layer id 0)."""

    def forward(self, images: torch.Tensor, layers: Sequence[int]) -> list[torch.Tensor]:
        if any(i != 0 for i in layers):
            raise ConfigurationError("identity extractor only has layer 0")
        return [images for _ in layers]


class RandomPyramid(nn.Module):
    """Frozen random conv pyramid: four stride-2 conv+ReLU stages (fixed seed)."""

    def __init__(self, seed: int = RANDOM_PYRAMID_SEED):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        channels = [3, 16, 32, 64, 128]
        convs = []
        for cin, cout in zip(channels[:-1], channels[1:]):
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (1.0 / math.sqrt(9 * cin)))
                conv.bias.zero_()
            convs.append(conv)
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, images: torch.Tensor, layers: Sequence[int]) -> list[torch.Tensor]:
        acts = []
        h = images
        for conv in self.convs:
            h = F.relu(conv(h))
            acts.append(h)
        try:
            return [acts[i] for i in layers]
        except IndexError:
            raise ConfigurationError(
                f"random_pyramid has layers 0..{len(acts) - 1}, requested {tuple(layers)}"
            ) from None


class _TorchvisionVGG(nn.Module):
    """VGG-style extractor tapping feature-stack indices; weights from FSH_CACHE."""

    def __init__(self, name: str):
        super().__init__()
        cache = os.environ.get(CACHE_ENV)
        if not cache:
            raise ConfigurationError(
                f"perceptual extractor '{name}' needs pretrained weights; set {CACHE_ENV} "
                "to a directory containing them"
            )
        os.environ.setdefault("TORCH_HOME", cache)
        try:
            import torchvision.models as tvm

            if name == "vgg19":
                features = tvm.vgg19(weights=tvm.VGG19_Weights.IMAGENET1K_V1).features
            else:
                weights_file = os.path.join(cache, "vggface.pt")
                if not os.path.isfile(weights_file):
                    raise FileNotFoundError(weights_file)
                vgg = tvm.vgg16()
                vgg.load_state_dict(torch.load(weights_file, map_location="cpu"))
                features = vgg.features
        except ConfigurationError:
            raise
        except Exception as exc:
            raise ConfigurationError(
                f"perceptual extractor '{name}' is unavailable: {exc}"
            ) from exc
        self.features = features.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, images: torch.Tensor, layers: Sequence[int]) -> list[torch.Tensor]:
        wanted = set(layers)
        acts = {}
        h = (images + 1.0) / 2.0  # extractors expect [0, 1]-range inputs
        for i, layer in enumerate(self.features):
            h = layer(h)
            if i in wanted:
                acts[i] = h
            if len(acts) == len(wanted):
                break
        missing = wanted - acts.keys()
        if missing:
            raise ConfigurationError(f"extractor layers {sorted(missing)} out of range")
        return [acts[i] for i in layers]


_EXTRACTOR_CACHE: dict[str, nn.Module] = {}


def get_extractor(name: str) -> nn.Module:
    if name not in _EXTRACTOR_CACHE:
        if name == "identity":
            _EXTRACTOR_CACHE[name] = IdentityExtractor()
        elif name == "random_pyramid":
            _EXTRACTOR_CACHE[name] = RandomPyramid()
        elif name in ("vgg19", "vggface"):
            _EXTRACTOR_CACHE[name] = _TorchvisionVGG(name)
        else:
            raise ConfigurationError(f"unknown perceptual extractor '{name}'")
    return _EXTRACTOR_CACHE[name]


# -- loss terms ---------------------------------------------------------------------


def content_loss(
    real: torch.Tensor, fake: torch.Tensor, spec: Sequence[ExtractorTap]
) -> torch.Tensor:
    """Weighted sum over extractor layers of mean absolute activation difference."""
    if real.shape != fake.shape:
        raise ValueError(f"content loss needs matching shapes, got {real.shape} vs {fake.shape}")
    total = real.new_zeros(())
    for tap in spec:
        extractor = get_extractor(tap.extractor)
        if next(extractor.parameters(), None) is not None:
            extractor.to(dtype=real.dtype)
        real_acts = extractor(real, tap.layers)
        fake_acts = extractor(fake, tap.layers)
        for ra, fa in zip(real_acts, fake_acts):
            total = total + tap.weight * (ra - fa).abs().mean()
    return total


def feature_matching(
    real_features: Sequence[torch.Tensor],
    fake_features: Sequence[torch.Tensor],
    fm_weight: float,
) -> torch.Tensor:
    """fm_weight times the sum over blocks of mean absolute feature difference."""
    if len(real_features) != len(fake_features):
        raise ValueError(
            f"feature stacks differ in length: {len(real_features)} vs {len(fake_features)}"
        )
    if len(fake_features) == 0:
        raise ValueError("feature matching needs at least one block")
    total = fake_features[0].new_zeros(())
    for rf, ff in zip(real_features, fake_features):
        if rf.shape != ff.shape:
            raise ValueError(f"feature block shapes differ: {rf.shape} vs {ff.shape}")
        total = total + (rf - ff).abs().mean()
    return fm_weight * total


def adversarial_loss_generator(score_fake: torch.Tensor, fm_term: torch.Tensor | float) -> torch.Tensor:
    """Generator adversarial term: -score (to be maximized) plus feature matching."""
    score_fake = torch.as_tensor(score_fake)
    return -score_fake.mean() + fm_term


def match_loss(
    support_embeddings: torch.Tensor | Sequence[torch.Tensor],
    video_embedding: torch.Tensor,
    mch_weight: float,
) -> torch.Tensor:
    """mch_weight times the mean (over support frames) of the mean absolute
    difference between each support embedding and the video's discriminator column."""
    if not isinstance(support_embeddings, torch.Tensor):
        if len(support_embeddings) == 0:
            raise ValueError("match loss needs at least one support embedding")
        support_embeddings = torch.stack(list(support_embeddings), dim=0)
    if support_embeddings.dim() < 2 or support_embeddings.shape[-2] == 0:
        raise ValueError("match loss needs a non-empty (..., K, N) embedding stack")
    if support_embeddings.shape[-1] != video_embedding.shape[-1]:
        raise ValueError(
            f"embedding length {support_embeddings.shape[-1]} != column length {video_embedding.shape[-1]}"
        )
    diff = (support_embeddings - video_embedding.unsqueeze(-2)).abs()
    return mch_weight * diff.mean()


def hinge_loss_discriminator(score_real: torch.Tensor, score_fake: torch.Tensor) -> torch.Tensor:
    """max(0, 1 + fake) + max(0, 1 - real), averaged over any batch dim."""
    score_real = torch.as_tensor(score_real)
    score_fake = torch.as_tensor(score_fake)
    return F.relu(1.0 + score_fake).mean() + F.relu(1.0 - score_real).mean()


def total_meta_objective(
    content: torch.Tensor | float,
    adversarial: torch.Tensor | float,
    match: torch.Tensor | float,
) -> torch.Tensor:
    """Plain sum of the three meta-learning terms (weights live inside each)."""
    return torch.as_tensor(content) + torch.as_tensor(adversarial) + torch.as_tensor(match)
