"""Declarative run configuration: an INI file with strict key validation.

Sections and keys mirror the module configs; unknown sections or keys are
rejected by name. Paper-default training values (K=8, learning rates 5e-5 and
2e-4, two discriminator steps per generator step, loss weights 10, 40
fine-tune epochs) are pre-filled, with the desk-scale network as the default
architecture. Every command prints the sha256 of the fully resolved form.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from fewshot_heads.errors import ConfigurationError
from fewshot_heads.losses import ExtractorTap, LossWeights, default_content_spec
from fewshot_heads.meta_trainer import MetaTrainConfig
from fewshot_heads.networks import NetworkConfig

_NETWORK_KEYS = {
    "resolution": int,
    "min_channels": int,
    "max_channels": int,
    "embedding_dim": int,
    "n_down_blocks": int,
    "n_bottleneck_blocks": int,
    "n_up_blocks": int,
    "self_attention_resolutions": "int_list",
}
_TRAINING_KEYS = {
    "k": int,
    "lr_eg": float,
    "lr_d": float,
    "d_steps_per_g": int,
    "batch_size": int,
    "max_steps": int,
    "variant": str,
    "disable_mch": "bool",
    "ckpt_every": int,
}
_LOSS_FIXED_KEYS = {"fm_weight": float, "mch_weight": float}
_FINETUNE_KEYS = {"epochs": int, "t": int, "freeze_generic": "bool"}
_RUN_KEYS = {"seed": int, "data_root": str, "out_dir": str}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data_root: str = ""
    out_dir: str = "runs/default"
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: MetaTrainConfig = field(default_factory=MetaTrainConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    finetune_epochs: int = 40
    finetune_t: int = 8
    freeze_generic: bool = False

    def resolved_dict(self) -> dict:
        return {
            "run": {"seed": self.seed, "data_root": self.data_root, "out_dir": self.out_dir},
            "network": {
                "resolution": self.network.resolution,
                "min_channels": self.network.min_channels,
                "max_channels": self.network.max_channels,
                "embedding_dim": self.network.embedding_dim,
                "n_down_blocks": self.network.n_down_blocks,
                "n_bottleneck_blocks": self.network.n_bottleneck_blocks,
                "n_up_blocks": self.network.n_up_blocks,
                "self_attention_resolutions": list(self.network.self_attention_resolutions),
            },
            "training": self.train.to_dict(),
            "losses": self.losses.to_dict(),
            "finetune": {
                "epochs": self.finetune_epochs,
                "t": self.finetune_t,
                "freeze_generic": self.freeze_generic,
            },
        }

    def config_hash(self) -> str:
        canonical = json.dumps(self.resolved_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def to_ini(self) -> str:
        d = self.resolved_dict()
        parser = configparser.ConfigParser()
        parser["run"] = {k: str(v) for k, v in d["run"].items()}
        network = dict(d["network"])
        network["self_attention_resolutions"] = ",".join(
            str(r) for r in network["self_attention_resolutions"]
        )
        parser["network"] = {k: str(v) for k, v in network.items()}
        training = {k: str(v) for k, v in d["training"].items() if k != "seed"}
        parser["training"] = training
        losses = {
            "fm_weight": str(self.losses.fm_weight),
            "mch_weight": str(self.losses.mch_weight),
        }
        for tap in self.losses.content:
            losses[f"content.{tap.extractor}"] = str(tap.weight)
            losses[f"content.{tap.extractor}.layers"] = ",".join(str(i) for i in tap.layers)
        parser["losses"] = losses
        parser["finetune"] = {k: str(v) for k, v in d["finetune"].items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def _convert(section: str, key: str, raw: str, kind) -> object:
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw.strip()
        if kind == "bool":
            lowered = raw.strip().lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "int_list":
            return tuple(int(part) for part in raw.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigurationError(f"[{section}] {key}: {exc}") from None
    raise AssertionError(f"unhandled kind {kind}")


def _parse_section(parser: configparser.ConfigParser, section: str, schema: dict) -> dict:
    out = {}
    if not parser.has_section(section):
        return out
    for key, raw in parser.items(section):
        if key not in schema:
            raise ConfigurationError(f"unknown key '{key}' in section [{section}]")
        out[key] = _convert(section, key, raw, schema[key])
    return out


def _parse_losses(parser: configparser.ConfigParser) -> LossWeights | None:
    if not parser.has_section("losses"):
        return None
    fixed = {}
    tap_weights: dict[str, float] = {}
    tap_layers: dict[str, tuple[int, ...]] = {}
    for key, raw in parser.items("losses"):
        if key in _LOSS_FIXED_KEYS:
            fixed[key] = _convert("losses", key, raw, _LOSS_FIXED_KEYS[key])
        elif key.startswith("content."):
            rest = key[len("content.") :]
            if rest.endswith(".layers"):
                name = rest[: -len(".layers")]
                tap_layers[name] = _convert("losses", key, raw, "int_list")
            elif "." not in rest:
                tap_weights[rest] = _convert("losses", key, raw, float)
            else:
                raise ConfigurationError(f"unknown key '{key}' in section [losses]")
        else:
            raise ConfigurationError(f"unknown key '{key}' in section [losses]")
    orphaned = set(tap_layers) - set(tap_weights)
    if orphaned:
        raise ConfigurationError(
            f"[losses] layer lists without weights for: {', '.join(sorted(orphaned))}"
        )
    default_layers = {"identity": (0,), "random_pyramid": (0, 1, 2, 3)}
    content = tuple(
        ExtractorTap(name, tap_layers.get(name, default_layers.get(name, (0,))), weight)
        for name, weight in tap_weights.items()
    )
    base = LossWeights()
    return LossWeights(
        fm_weight=fixed.get("fm_weight", base.fm_weight),
        mch_weight=fixed.get("mch_weight", base.mch_weight),
        content=content or default_content_spec(),
    )


def load_run_config(path: Path | str | None) -> RunConfig:
    """Parse an INI run config; absent file fields keep their defaults."""
    base = RunConfig()
    if path is None:
        return base
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read_string(path.read_text())
    except configparser.Error as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from None

    known = {"run", "network", "training", "losses", "finetune"}
    unknown = set(parser.sections()) - known
    if unknown:
        raise ConfigurationError(f"unknown config section(s): {', '.join(sorted(unknown))}")

    run_kwargs = _parse_section(parser, "run", _RUN_KEYS)
    network_kwargs = _parse_section(parser, "network", _NETWORK_KEYS)
    training_kwargs = _parse_section(parser, "training", _TRAINING_KEYS)
    finetune_kwargs = _parse_section(parser, "finetune", _FINETUNE_KEYS)
    losses = _parse_losses(parser)

    network = NetworkConfig(**network_kwargs) if network_kwargs else base.network
    train = MetaTrainConfig(**training_kwargs, seed=run_kwargs.get("seed", base.seed))
    return RunConfig(
        seed=run_kwargs.get("seed", base.seed),
        data_root=run_kwargs.get("data_root", base.data_root),
        out_dir=run_kwargs.get("out_dir", base.out_dir),
        network=network,
        train=train,
        losses=losses or base.losses,
        finetune_epochs=finetune_kwargs.get("epochs", base.finetune_epochs),
        finetune_t=finetune_kwargs.get("t", base.finetune_t),
        freeze_generic=finetune_kwargs.get("freeze_generic", base.freeze_generic),
    )


def apply_overrides(config: RunConfig, **overrides) -> RunConfig:
    """Apply CLI overrides (None values are ignored)."""
    run_fields = {}
    train_fields = {}
    for key, value in overrides.items():
        if value is None:
            continue
        if key in ("seed",):
            run_fields["seed"] = int(value)
            train_fields["seed"] = int(value)
        elif key in ("data_root", "out_dir"):
            run_fields[key] = str(value)
        elif key in ("variant", "max_steps", "disable_mch", "batch_size", "k", "ckpt_every"):
            train_fields[key] = value
        elif key in ("finetune_epochs", "finetune_t", "freeze_generic"):
            run_fields[key] = value
        else:
            raise ConfigurationError(f"unknown override '{key}'")
    train = replace(config.train, **train_fields) if train_fields else config.train
    return replace(config, train=train, **run_fields)
