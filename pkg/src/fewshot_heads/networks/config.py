"""Architecture hyperparameters and the analytic parameter-count formula.

Channel plan: downsampling paths start at min_channels and double per block,
capped at max_channels; the generator's upsampling path halves back down,
floored at min_channels. Embedder and discriminator trunks always downsample
to 4x4. Self-attention is inserted in downsampling paths where a block's
output resolution is listed in self_attention_resolutions, and in the
generator's upsampling path at double those resolutions (mirroring the 32/64
down/up placement of the full-scale model).
"""

from __future__ import annotations

from dataclasses import dataclass

from fewshot_heads.errors import ConfigurationError

TRUNK_INPUT_CHANNELS = 6  # frame RGB concatenated with landmark-image RGB
IMAGE_CHANNELS = 3
TRUNK_FINAL_RESOLUTION = 4


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class NetworkConfig:
    resolution: int = 64
    min_channels: int = 16
    max_channels: int = 128
    embedding_dim: int = 64
    num_videos: int = 1
    n_down_blocks: int = 3
    n_bottleneck_blocks: int = 2
    n_up_blocks: int = 3
    self_attention_resolutions: tuple[int, ...] = (16,)

    def __post_init__(self):
        if not _is_power_of_two(self.resolution) or self.resolution < 16:
            raise ConfigurationError(f"resolution must be a power of two >= 16, got {self.resolution}")
        if self.embedding_dim < 4:
            raise ConfigurationError(f"embedding_dim must be >= 4, got {self.embedding_dim}")
        if self.num_videos < 1:
            raise ConfigurationError(f"num_videos must be >= 1, got {self.num_videos}")
        if not 0 < self.min_channels <= self.max_channels:
            raise ConfigurationError(
                f"need 0 < min_channels <= max_channels, got {self.min_channels}/{self.max_channels}"
            )
        if self.n_down_blocks < 1 or self.n_down_blocks != self.n_up_blocks:
            raise ConfigurationError("generator needs n_down_blocks == n_up_blocks >= 1")
        if self.n_bottleneck_blocks < 1:
            raise ConfigurationError("generator needs at least one bottleneck block")
        if self.resolution >> self.n_down_blocks < TRUNK_FINAL_RESOLUTION:
            raise ConfigurationError("too many generator downsampling blocks for this resolution")
        object.__setattr__(self, "self_attention_resolutions", tuple(self.self_attention_resolutions))

    # -- channel / placement plans -------------------------------------------------

    @property
    def n_trunk_blocks(self) -> int:
        """Embedder/discriminator downsampling blocks: resolution -> 4x4."""
        return (self.resolution // TRUNK_FINAL_RESOLUTION).bit_length() - 1

    def trunk_channels(self) -> list[int]:
        return [min(self.min_channels << i, self.max_channels) for i in range(self.n_trunk_blocks)]

    def generator_down_channels(self) -> list[int]:
        return [min(self.min_channels << i, self.max_channels) for i in range(self.n_down_blocks)]

    @property
    def bottleneck_channels(self) -> int:
        return self.generator_down_channels()[-1]

    @property
    def bottleneck_resolution(self) -> int:
        return self.resolution >> self.n_down_blocks

    def generator_up_channels(self) -> list[int]:
        c = self.bottleneck_channels
        return [max(c >> j, self.min_channels) for j in range(self.n_up_blocks)]

    def down_attention_indices(self, n_blocks: int) -> list[int]:
        """Blocks of a downsampling path followed by self-attention."""
        res = set(self.self_attention_resolutions)
        return [i for i in range(n_blocks) if self.resolution >> (i + 1) in res]

    def up_attention_indices(self) -> list[int]:
        res = {2 * r for r in self.self_attention_resolutions}
        base = self.bottleneck_resolution
        return [j for j in range(self.n_up_blocks) if base << (j + 1) in res]

    @classmethod
    def paper_scale(cls, num_videos: int = 1) -> "NetworkConfig":
        """Full-scale configuration: 256px, channels 64..512, N=512, 4/4/4 blocks."""
        return cls(
            resolution=256,
            min_channels=64,
            max_channels=512,
            embedding_dim=512,
            num_videos=num_videos,
            n_down_blocks=4,
            n_bottleneck_blocks=4,
            n_up_blocks=4,
            self_attention_resolutions=(32,),
        )


# -- analytic parameter counts (must match the instantiated modules exactly) -------


def _conv(cin: int, cout: int, k: int) -> int:
    return cin * cout * k * k + cout


def _linear(cin: int, cout: int) -> int:
    return cin * cout + cout


def _attention(channels: int) -> int:
    dk = max(channels // 8, 1)
    dv = max(channels // 2, 1)
    return 2 * _conv(channels, dk, 1) + _conv(channels, dv, 1) + _conv(dv, channels, 1) + 1


def _down_block(cin: int, cout: int, instance_norm: bool, first: bool) -> int:
    total = _conv(cin, cout, 3) + _conv(cout, cout, 3) + _conv(cin, cout, 1)
    if instance_norm:
        total += 2 * cout if first else 2 * cin + 2 * cout
    return total


def _plain_block(ch: int) -> int:
    return 2 * _conv(ch, ch, 3)


def _up_block(cin: int, cout: int) -> int:
    return _conv(cin, cout, 3) + _conv(cout, cout, 3) + _conv(cin, cout, 1)


def _trunk_params(config: NetworkConfig, extra_block: bool) -> int:
    channels = config.trunk_channels()
    total = 0
    cin = TRUNK_INPUT_CHANNELS
    for i, cout in enumerate(channels):
        total += _down_block(cin, cout, instance_norm=False, first=(i == 0))
        cin = cout
    for i in config.down_attention_indices(len(channels)):
        total += _attention(channels[i])
    if extra_block:
        total += _plain_block(channels[-1])
    total += _linear(channels[-1], config.embedding_dim)
    return total


def adaptive_param_length(config: NetworkConfig) -> int:
    """Length of the flat adaptive vector: 2*channels per adaptive norm layer."""
    bneck = config.bottleneck_channels
    ups = config.generator_up_channels()
    total = config.n_bottleneck_blocks * (2 * bneck + 2 * bneck)
    cin = bneck
    for cout in ups:
        total += 2 * cin + 2 * cout
        cin = cout
    total += 2 * ups[-1]  # final adaptive norm before the output conv
    return total


def _generator_params(config: NetworkConfig) -> int:
    downs = config.generator_down_channels()
    ups = config.generator_up_channels()
    bneck = config.bottleneck_channels
    total = 0
    cin = IMAGE_CHANNELS
    for i, cout in enumerate(downs):
        total += _down_block(cin, cout, instance_norm=True, first=(i == 0))
        cin = cout
    for i in config.down_attention_indices(len(downs)):
        total += _attention(downs[i])
    total += config.n_bottleneck_blocks * _plain_block(bneck)
    cin = bneck
    for cout in ups:
        total += _up_block(cin, cout)
        cin = cout
    for j in config.up_attention_indices():
        total += _attention(ups[j])
    total += _conv(ups[-1], IMAGE_CHANNELS, 3)
    total += adaptive_param_length(config) * config.embedding_dim  # projection matrix
    return total


def parameter_counts(config: NetworkConfig) -> dict[str, int]:
    """Expected trainable parameter counts per network.

    Discriminator count covers the convolutional trunk and its embedding
    projection only (the per-video matrix W, shared vector, and bias scale
    with the dataset and are excluded).
    """
    return {
        "embedder": _trunk_params(config, extra_block=False),
        "generator": _generator_params(config),
        "discriminator_trunk": _trunk_params(config, extra_block=True),
    }
