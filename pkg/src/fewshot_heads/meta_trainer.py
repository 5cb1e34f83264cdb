"""Episodic adversarial meta-training of the embedder, generator, and discriminator.

Each step draws a batch of K-shot episodes, reconstructs the target frame from
the averaged support embeddings, applies one embedder+generator update on
content + adversarial(+feature-matching) + embedding-match terms, then runs
d_steps_per_g discriminator hinge updates with freshly regenerated fakes.
Losses are averaged over the episode batch.

The metrics log is an append-only CSV with columns
step,l_cnt,l_adv,l_fm,l_mch,l_dsc,d_real,d_fake,wallclock_s. Checkpoints are
written atomically every `ckpt_every` steps and at the end; training resumed
from a checkpoint continues the exact same episode/optimizer trajectory.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import optim

from fewshot_heads import checkpoint as ckpt
from fewshot_heads import losses as L
from fewshot_heads.data_pipeline import Dataset, Episode, VideoSequence, sample_episode
from fewshot_heads.errors import ConfigurationError, TrainingAborted
from fewshot_heads.networks import Discriminator, Embedder, Generator, NetworkConfig
from fewshot_heads.tensors import to_tensor

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "l_cnt", "l_adv", "l_fm", "l_mch", "l_dsc", "d_real", "d_fake", "wallclock_s")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
VARIANTS = ("ff", "ft")


@dataclass(frozen=True)
class MetaTrainConfig:
    k: int = 8
    lr_eg: float = 5e-5
    lr_d: float = 2e-4
    d_steps_per_g: int = 2
    batch_size: int = 4
    max_steps: int = 1000
    variant: str = "ft"
    disable_mch: bool = False
    seed: int = 0
    ckpt_every: int = 500

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError(f"k must be >= 1, got {self.k}")
        if self.lr_eg < 0 or self.lr_d < 0:
            raise ConfigurationError("learning rates must be >= 0")
        if self.d_steps_per_g < 1:
            raise ConfigurationError("d_steps_per_g must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise ConfigurationError("max_steps must be >= 0")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got '{self.variant}'")
        if self.ckpt_every < 1:
            raise ConfigurationError("ckpt_every must be >= 1")

    @property
    def use_match_loss(self) -> bool:
        return self.variant == "ft" and not self.disable_mch

    def to_dict(self) -> dict:
        return {
            "k": self.k, "lr_eg": self.lr_eg, "lr_d": self.lr_d,
            "d_steps_per_g": self.d_steps_per_g, "batch_size": self.batch_size,
            "max_steps": self.max_steps, "variant": self.variant,
            "disable_mch": self.disable_mch, "seed": self.seed, "ckpt_every": self.ckpt_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetaTrainConfig":
        return cls(**d)


@dataclass
class MetaTrainState:
    network_config: NetworkConfig
    train_config: MetaTrainConfig
    loss_weights: L.LossWeights
    embedder: Embedder
    generator: Generator
    discriminator: Discriminator
    opt_eg: optim.Adam
    opt_d: optim.Adam
    rng: np.random.Generator
    step: int = 0
    g_steps: int = 0
    d_steps: int = 0
    last_checkpoint: str | None = None


def _make_optimizers(state_parts, train_config: MetaTrainConfig):
    embedder, generator, discriminator = state_parts
    opt_eg = optim.Adam(
        list(embedder.parameters()) + list(generator.parameters()),
        lr=train_config.lr_eg, betas=ADAM_BETAS, eps=ADAM_EPS,
    )
    opt_d = optim.Adam(discriminator.parameters(), lr=train_config.lr_d, betas=ADAM_BETAS, eps=ADAM_EPS)
    return opt_eg, opt_d


def init_meta_state(
    network_config: NetworkConfig,
    train_config: MetaTrainConfig,
    loss_weights: L.LossWeights | None = None,
) -> MetaTrainState:
    """Fresh random state; network init is seeded by train_config.seed."""
    loss_weights = loss_weights or L.LossWeights()
    torch.manual_seed(train_config.seed)
    embedder = Embedder(network_config)
    generator = Generator(network_config)
    discriminator = Discriminator(network_config)
    opt_eg, opt_d = _make_optimizers((embedder, generator, discriminator), train_config)
    return MetaTrainState(
        network_config=network_config,
        train_config=train_config,
        loss_weights=loss_weights,
        embedder=embedder,
        generator=generator,
        discriminator=discriminator,
        opt_eg=opt_eg,
        opt_d=opt_d,
        rng=np.random.default_rng(train_config.seed),
    )


def collate_episodes(dataset: Dataset, episodes: list[Episode]) -> dict[str, torch.Tensor]:
    """Stack episode frames into batch tensors."""
    tgt_img, tgt_lm, sup_img, sup_lm, idx = [], [], [], [], []
    for ep in episodes:
        seq = dataset[ep.video_index]
        target = seq.frames[ep.target_index]
        tgt_img.append(to_tensor(target.image))
        tgt_lm.append(to_tensor(target.landmark_image))
        sup_img.append(torch.stack([to_tensor(seq.frames[s].image) for s in ep.support_indices]))
        sup_lm.append(torch.stack([to_tensor(seq.frames[s].landmark_image) for s in ep.support_indices]))
        idx.append(ep.video_index)
    return {
        "target_images": torch.stack(tgt_img),
        "target_landmarks": torch.stack(tgt_lm),
        "support_images": torch.stack(sup_img),
        "support_landmarks": torch.stack(sup_lm),
        "video_indices": torch.tensor(idx, dtype=torch.long),
    }


def _set_requires_grad(module: torch.nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def _require_finite(state: MetaTrainState, **values: float) -> None:
    bad = [name for name, v in values.items() if not math.isfinite(v)]
    if bad:
        raise TrainingAborted(
            f"non-finite loss at step {state.step}: {', '.join(bad)}"
            + (f" (last good checkpoint: {state.last_checkpoint})" if state.last_checkpoint else ""),
            last_checkpoint=state.last_checkpoint,
        )


def _synthesize_batch(
    state: MetaTrainState, batch: dict[str, torch.Tensor]
) -> tuple[torch.Tensor, torch.Tensor]:
    """Embed supports, average, project, generate; returns (fakes, per-frame embeddings)."""
    b, k = batch["support_images"].shape[:2]
    flat_img = batch["support_images"].reshape(b * k, *batch["support_images"].shape[2:])
    flat_lm = batch["support_landmarks"].reshape(b * k, *batch["support_landmarks"].shape[2:])
    embeddings = state.embedder(flat_img, flat_lm).reshape(b, k, -1)
    e_hat = embeddings.mean(dim=1)
    adaptive = state.generator.adaptive_from_embedding(e_hat)
    fake = state.generator(batch["target_landmarks"], adaptive)
    return fake, embeddings


def meta_train_step(
    state: MetaTrainState, episodes: list[Episode], dataset: Dataset
) -> tuple[MetaTrainState, dict[str, float]]:
    """One embedder+generator update followed by d_steps_per_g discriminator updates."""
    cfg = state.train_config
    batch = collate_episodes(dataset, episodes)
    idx = batch["video_indices"]
    state.embedder.train()
    state.generator.train()
    state.discriminator.train()

    # embedder + generator phase (discriminator weights frozen)
    _set_requires_grad(state.discriminator, False)
    state.opt_eg.zero_grad(set_to_none=True)
    fake, support_embeddings = _synthesize_batch(state, batch)
    l_cnt = L.content_loss(batch["target_images"], fake, state.loss_weights.content)
    score_fake, feats_fake = state.discriminator(fake, batch["target_landmarks"], idx)
    with torch.no_grad():
        _, feats_real = state.discriminator(batch["target_images"], batch["target_landmarks"], idx)
    l_fm = L.feature_matching(feats_real, feats_fake, state.loss_weights.fm_weight)
    l_adv = L.adversarial_loss_generator(score_fake, l_fm)
    if cfg.use_match_loss:
        columns = state.discriminator.video_embeddings[:, idx].t().detach()
        l_mch = L.match_loss(support_embeddings, columns, state.loss_weights.mch_weight)
    else:
        l_mch = torch.zeros(())
    total = L.total_meta_objective(l_cnt, l_adv, l_mch)
    _require_finite(
        state, l_cnt=l_cnt.item(), l_adv=l_adv.item(), l_fm=l_fm.item(), l_mch=l_mch.item()
    )
    total.backward()
    state.opt_eg.step()
    _set_requires_grad(state.discriminator, True)
    state.g_steps += 1

    # discriminator phase: fresh fakes regenerated against the updated E/G
    d_losses, d_real_scores, d_fake_scores = [], [], []
    for _ in range(cfg.d_steps_per_g):
        state.opt_d.zero_grad(set_to_none=True)
        with torch.no_grad():
            fake_d, _ = _synthesize_batch(state, batch)
        score_fake_d, _ = state.discriminator(fake_d, batch["target_landmarks"], idx)
        score_real_d, _ = state.discriminator(batch["target_images"], batch["target_landmarks"], idx)
        l_dsc = L.hinge_loss_discriminator(score_real_d, score_fake_d)
        _require_finite(state, l_dsc=l_dsc.item())
        l_dsc.backward()
        state.opt_d.step()
        state.d_steps += 1
        d_losses.append(l_dsc.item())
        d_real_scores.append(score_real_d.mean().item())
        d_fake_scores.append(score_fake_d.mean().item())

    state.step += 1
    metrics = {
        "step": float(state.step),
        "l_cnt": l_cnt.item(),
        "l_adv": l_adv.item(),
        "l_fm": l_fm.item(),
        "l_mch": l_mch.item(),
        "l_dsc": sum(d_losses) / len(d_losses),
        "d_real": sum(d_real_scores) / len(d_real_scores),
        "d_fake": sum(d_fake_scores) / len(d_fake_scores),
    }
    return state, metrics


# -- checkpointing ------------------------------------------------------------------


def network_config_dict(config: NetworkConfig) -> dict:
    return {
        "resolution": config.resolution,
        "min_channels": config.min_channels,
        "max_channels": config.max_channels,
        "embedding_dim": config.embedding_dim,
        "num_videos": config.num_videos,
        "n_down_blocks": config.n_down_blocks,
        "n_bottleneck_blocks": config.n_bottleneck_blocks,
        "n_up_blocks": config.n_up_blocks,
        "self_attention_resolutions": list(config.self_attention_resolutions),
    }


def network_config_from_dict(d: dict) -> NetworkConfig:
    d = dict(d)
    d["self_attention_resolutions"] = tuple(d["self_attention_resolutions"])
    return NetworkConfig(**d)


def save_checkpoint(state: MetaTrainState, path: Path | str) -> str:
    generator = state.generator
    manifest = {
        "format_version": ckpt.FORMAT_VERSION,
        "kind": "meta",
        "variant": state.train_config.variant,
        "step": state.step,
        "g_steps": state.g_steps,
        "d_steps": state.d_steps,
        "network_config": network_config_dict(state.network_config),
        "train_config": state.train_config.to_dict(),
        "loss_weights": state.loss_weights.to_dict(),
        "adaptive_slices": [
            {"name": s.name, "channels": s.channels,
             "scale_offset": s.scale_offset, "bias_offset": s.bias_offset}
            for s in generator.adaptive_layout
        ],
        "numpy_rng": ckpt.numpy_rng_state(state.rng),
    }
    arrays = {}
    arrays.update(ckpt.module_arrays(state.embedder, "embedder"))
    arrays.update(ckpt.module_arrays(state.generator, "generator"))
    arrays.update(ckpt.module_arrays(state.discriminator, "discriminator"))
    arrays.update(ckpt.optimizer_arrays(state.opt_eg, "opt_eg"))
    arrays.update(ckpt.optimizer_arrays(state.opt_d, "opt_d"))
    arrays["torch_rng"] = ckpt.torch_rng_array()
    ckpt.write_archive(path, manifest, arrays)
    state.last_checkpoint = str(path)
    return str(path)


def load_meta_state(path: Path | str) -> MetaTrainState:
    manifest, arrays = ckpt.read_archive(path)
    if manifest.get("kind") != "meta":
        raise ConfigurationError(f"{path} is not a meta-training checkpoint")
    network_config = network_config_from_dict(manifest["network_config"])
    train_config = MetaTrainConfig.from_dict(manifest["train_config"])
    loss_weights = L.LossWeights.from_dict(manifest["loss_weights"])

    embedder = Embedder(network_config)
    generator = Generator(network_config)
    discriminator = Discriminator(network_config)
    ckpt.load_module_arrays(embedder, arrays, "embedder")
    ckpt.load_module_arrays(generator, arrays, "generator")
    ckpt.load_module_arrays(discriminator, arrays, "discriminator")
    opt_eg, opt_d = _make_optimizers((embedder, generator, discriminator), train_config)
    ckpt.load_optimizer_arrays(opt_eg, arrays, "opt_eg")
    ckpt.load_optimizer_arrays(opt_d, arrays, "opt_d")
    ckpt.restore_torch_rng(arrays["torch_rng"])
    state = MetaTrainState(
        network_config=network_config,
        train_config=train_config,
        loss_weights=loss_weights,
        embedder=embedder,
        generator=generator,
        discriminator=discriminator,
        opt_eg=opt_eg,
        opt_d=opt_d,
        rng=ckpt.restore_numpy_rng(manifest["numpy_rng"]),
        step=manifest["step"],
        g_steps=manifest["g_steps"],
        d_steps=manifest["d_steps"],
        last_checkpoint=str(path),
    )
    return state


# -- training loop ------------------------------------------------------------------


def _append_metrics(log_path: Path, metrics: dict[str, float], wallclock_s: float) -> None:
    new = not log_path.exists()
    with open(log_path, "a") as fh:
        if new:
            fh.write(",".join(METRIC_COLUMNS) + "\n")
        row = dict(metrics, wallclock_s=wallclock_s)
        fh.write(",".join(_format_metric(c, row[c]) for c in METRIC_COLUMNS) + "\n")


def _format_metric(column: str, value: float) -> str:
    if column == "step":
        return str(int(value))
    return repr(float(value))


def trainable_sequences(dataset: Dataset) -> list[VideoSequence]:
    """Sequences usable for episodes (at least two frames)."""
    return [s for s in dataset.sequences if len(s) >= 2]


def run_meta_training(
    network_config: NetworkConfig,
    train_config: MetaTrainConfig,
    dataset: Dataset,
    out_dir: Path | str,
    loss_weights: L.LossWeights | None = None,
    resume_from: Path | str | None = None,
) -> MetaTrainState:
    """Train to train_config.max_steps, checkpointing and logging along the way."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "metrics.csv"

    last_saved_step = -1
    if resume_from is not None:
        state = load_meta_state(resume_from)
        # the checkpoint owns the trajectory; the caller owns the step budget
        state.train_config = replace(state.train_config, max_steps=train_config.max_steps)
    else:
        if network_config.num_videos != len(dataset):
            raise ConfigurationError(
                f"network_config.num_videos={network_config.num_videos} but dataset has {len(dataset)} sequences"
            )
        state = init_meta_state(network_config, train_config, loss_weights)
        save_checkpoint(state, out_dir / f"ckpt_{state.step:06d}.npz")
        last_saved_step = state.step

    candidates = trainable_sequences(dataset)
    if state.step < state.train_config.max_steps and not candidates:
        raise ConfigurationError("no sequence has the >= 2 frames needed for episodes")

    cfg = state.train_config
    while state.step < cfg.max_steps:
        episodes = [sample_episode(candidates, cfg.k, state.rng) for _ in range(cfg.batch_size)]
        started = time.perf_counter()
        state, metrics = meta_train_step(state, episodes, dataset)
        _append_metrics(log_path, metrics, time.perf_counter() - started)
        if state.step % cfg.ckpt_every == 0:
            save_checkpoint(state, out_dir / f"ckpt_{state.step:06d}.npz")
            last_saved_step = state.step
    if last_saved_step != state.step:
        save_checkpoint(state, out_dir / f"ckpt_{state.step:06d}.npz")
    logger.info("meta-training finished at step %d (checkpoint %s)", state.step, state.last_checkpoint)
    return state
