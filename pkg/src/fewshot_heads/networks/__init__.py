"""Network definitions: embedder, generator, discriminator, and shared layers."""

from fewshot_heads.networks.config import NetworkConfig, parameter_counts
from fewshot_heads.networks.layers import (
    SelfAttention,
    SNConv2d,
    SNLinear,
    adain,
    spectral_normalize,
)
from fewshot_heads.networks.models import (
    AdaptiveSlice,
    Discriminator,
    Embedder,
    FinetuneDiscriminator,
    Generator,
    average_embeddings,
    embed_frame,
    project_adaptive,
)

__all__ = [
    "AdaptiveSlice",
    "Discriminator",
    "Embedder",
    "FinetuneDiscriminator",
    "Generator",
    "NetworkConfig",
    "SelfAttention",
    "SNConv2d",
    "SNLinear",
    "adain",
    "average_embeddings",
    "embed_frame",
    "parameter_counts",
    "project_adaptive",
    "spectral_normalize",
]
