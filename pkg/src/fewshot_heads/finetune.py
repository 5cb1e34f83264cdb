"""Personalization of a meta-trained model to an unseen identity.

Feed-forward path: estimate the identity embedding by averaging the embedder
over the T provided frames, project it into the generator's adaptive vector,
and sum it with the discriminator's shared direction. Fine-tuning then
optimizes the person-generic generator weights together with the adaptive
vector against content + adversarial losses, alternating with hinge updates
of the personalized discriminator, reusing the meta-training optimizer
settings and D:G update ratio.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn, optim

from fewshot_heads import checkpoint as ckpt
from fewshot_heads import losses as L
from fewshot_heads.data_pipeline import FrameRecord
from fewshot_heads.errors import ConfigurationError, TrainingAborted
from fewshot_heads.meta_trainer import (
    ADAM_BETAS,
    ADAM_EPS,
    MetaTrainConfig,
    MetaTrainState,
    network_config_dict,
    network_config_from_dict,
)
from fewshot_heads.networks import (
    Embedder,
    FinetuneDiscriminator,
    Generator,
    NetworkConfig,
    project_adaptive,
)
from fewshot_heads.tensors import frame_batch, to_image, to_tensor

logger = logging.getLogger(__name__)

FINETUNE_BATCH_CAP = 8
DEFAULT_FINETUNE_EPOCHS = 40


@dataclass
class PersonalizedModel:
    """A personalized generator/discriminator pair plus its provenance."""

    network_config: NetworkConfig
    train_config: MetaTrainConfig
    loss_weights: L.LossWeights
    generator: Generator
    adaptive: nn.Parameter  # directly optimized person-specific vector
    discriminator: FinetuneDiscriminator
    embedding: torch.Tensor
    source_checkpoint: str
    freeze_generic: bool = False

    def synthesize_batch(self, landmark_images: torch.Tensor) -> torch.Tensor:
        self.generator.eval()
        with torch.no_grad():
            return self.generator(landmark_images, self.adaptive.detach())


def estimate_embedding(embedder: Embedder, frames: Sequence[FrameRecord]) -> torch.Tensor:
    """Mean embedder output over the personalization frames."""
    if len(frames) == 0:
        raise ValueError("cannot estimate an embedding from zero frames")
    images, landmark_images = frame_batch(frames)
    embedder.eval()
    with torch.no_grad():
        embeddings = embedder(images, landmark_images)
    return embeddings.mean(dim=0)


def init_personalized(
    meta_state: MetaTrainState,
    embedding: torch.Tensor,
    source_checkpoint: str | None = None,
    freeze_generic: bool = False,
) -> PersonalizedModel:
    """Build the personalized model: psi' = P e, w' = w0 + e, trunk/bias copied."""
    cfg = meta_state.network_config
    if embedding.shape != (cfg.embedding_dim,):
        raise ValueError(
            f"embedding must have length {cfg.embedding_dim}, got {tuple(embedding.shape)}"
        )
    if not meta_state.train_config.use_match_loss:
        logger.warning(
            "personalizing from a checkpoint trained without the embedding match loss: "
            "the discriminator direction initialization loses its rationale"
        )
    generator = copy.deepcopy(meta_state.generator)
    generator.eval()
    adaptive = nn.Parameter(project_adaptive(generator.projection, embedding).detach().clone())

    disc = FinetuneDiscriminator(cfg)
    disc.trunk.load_state_dict(meta_state.discriminator.trunk.state_dict())
    with torch.no_grad():
        disc.direction.copy_(meta_state.discriminator.shared_direction.detach() + embedding)
        disc.bias.copy_(meta_state.discriminator.bias.detach())
    disc.eval()

    return PersonalizedModel(
        network_config=cfg,
        train_config=meta_state.train_config,
        loss_weights=meta_state.loss_weights,
        generator=generator,
        adaptive=adaptive,
        discriminator=disc,
        embedding=embedding.detach().clone(),
        source_checkpoint=source_checkpoint or meta_state.last_checkpoint or "<unsaved>",
        freeze_generic=freeze_generic,
    )


def personalize(
    meta_state: MetaTrainState,
    frames: Sequence[FrameRecord],
    source_checkpoint: str | None = None,
    freeze_generic: bool = False,
) -> PersonalizedModel:
    """Feed-forward personalization: embedding estimation plus initialization."""
    embedding = estimate_embedding(meta_state.embedder, frames)
    return init_personalized(meta_state, embedding, source_checkpoint, freeze_generic)


def _generator_finetune_params(model: PersonalizedModel) -> list[nn.Parameter]:
    params = [model.adaptive]
    if not model.freeze_generic:
        # the projection matrix is unused after initialization; leave it untouched
        params.extend(p for name, p in model.generator.named_parameters() if name != "projection")
    return params


def run_finetune(
    model: PersonalizedModel,
    frames: Sequence[FrameRecord],
    epochs: int = DEFAULT_FINETUNE_EPOCHS,
    disable_adv: bool = False,
    seed: int = 0,
) -> PersonalizedModel:
    """Adversarial fine-tuning on the T personalization frames.

    Each epoch shuffles the frames and walks batches of min(T, 8); per batch
    one generator update (content, plus adversarial + feature matching unless
    disable_adv) is followed by d_steps_per_g discriminator hinge updates.
    With disable_adv the discriminator receives no updates at all. epochs=0
    leaves the model untouched. A non-finite loss restores the pre-call
    parameters before aborting.
    """
    if epochs < 0:
        raise ConfigurationError(f"epochs must be >= 0, got {epochs}")
    if len(frames) == 0:
        raise ValueError("fine-tuning needs at least one frame")
    if epochs == 0:
        return model

    snapshot = {
        "generator": copy.deepcopy(model.generator.state_dict()),
        "adaptive": model.adaptive.detach().clone(),
        "discriminator": copy.deepcopy(model.discriminator.state_dict()),
    }

    cfg = model.train_config
    images, landmark_images = frame_batch(frames)
    n = len(frames)
    batch_size = min(n, FINETUNE_BATCH_CAP)
    rng = np.random.default_rng(seed)

    opt_g = optim.Adam(_generator_finetune_params(model), lr=cfg.lr_eg, betas=ADAM_BETAS, eps=ADAM_EPS)
    opt_d = optim.Adam(model.discriminator.parameters(), lr=cfg.lr_d, betas=ADAM_BETAS, eps=ADAM_EPS)

    model.generator.train()
    model.discriminator.train()
    try:
        for _ in range(epochs):
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                sel = torch.from_numpy(order[start : start + batch_size].copy())
                x = images[sel]
                y = landmark_images[sel]

                for p in model.discriminator.parameters():
                    p.requires_grad_(False)
                opt_g.zero_grad(set_to_none=True)
                fake = model.generator(y, model.adaptive)
                loss_g = L.content_loss(x, fake, model.loss_weights.content)
                if not disable_adv:
                    score_fake, feats_fake = model.discriminator(fake, y)
                    with torch.no_grad():
                        _, feats_real = model.discriminator(x, y)
                    fm = L.feature_matching(feats_real, feats_fake, model.loss_weights.fm_weight)
                    loss_g = loss_g + L.adversarial_loss_generator(score_fake, fm)
                if not torch.isfinite(loss_g):
                    raise TrainingAborted("non-finite generator loss during fine-tuning")
                loss_g.backward()
                opt_g.step()
                for p in model.discriminator.parameters():
                    p.requires_grad_(True)

                if disable_adv:
                    continue
                for _ in range(cfg.d_steps_per_g):
                    opt_d.zero_grad(set_to_none=True)
                    with torch.no_grad():
                        fake_d = model.generator(y, model.adaptive)
                    score_fake_d, _ = model.discriminator(fake_d, y)
                    score_real_d, _ = model.discriminator(x, y)
                    loss_d = L.hinge_loss_discriminator(score_real_d, score_fake_d)
                    if not torch.isfinite(loss_d):
                        raise TrainingAborted("non-finite discriminator loss during fine-tuning")
                    loss_d.backward()
                    opt_d.step()
    except TrainingAborted:
        model.generator.load_state_dict(snapshot["generator"])
        model.discriminator.load_state_dict(snapshot["discriminator"])
        with torch.no_grad():
            model.adaptive.copy_(snapshot["adaptive"])
        raise
    finally:
        model.generator.eval()
        model.discriminator.eval()
    return model


def synthesize(model: PersonalizedModel, landmark_images: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Feed-forward synthesis: one output frame per landmark image, in [-1, 1]."""
    if len(landmark_images) == 0:
        raise ValueError("synthesize needs at least one landmark image")
    resolution = model.network_config.resolution
    outputs = []
    for lm in landmark_images:
        lm_arr = np.asarray(lm)
        if lm_arr.shape != (resolution, resolution, 3):
            raise ValueError(
                f"landmark image must be ({resolution}, {resolution}, 3), got {lm_arr.shape}"
            )
        frame = model.synthesize_batch(to_tensor(lm_arr).unsqueeze(0))[0]
        outputs.append(to_image(frame))
    return outputs


# -- personalized checkpoint container ----------------------------------------------


def save_personalized(model: PersonalizedModel, path: Path | str) -> str:
    manifest = {
        "format_version": ckpt.FORMAT_VERSION,
        "kind": "personalized",
        "variant": "personalized",
        "source_variant": model.train_config.variant,
        "network_config": network_config_dict(model.network_config),
        "train_config": model.train_config.to_dict(),
        "loss_weights": model.loss_weights.to_dict(),
        "adaptive_slices": [
            {"name": s.name, "channels": s.channels,
             "scale_offset": s.scale_offset, "bias_offset": s.bias_offset}
            for s in model.generator.adaptive_layout
        ],
        "source_checkpoint": model.source_checkpoint,
        "freeze_generic": model.freeze_generic,
    }
    arrays = {}
    arrays.update(ckpt.module_arrays(model.generator, "generator"))
    arrays.update(ckpt.module_arrays(model.discriminator, "discriminator"))
    arrays["adaptive"] = model.adaptive.detach().cpu().numpy().copy()
    arrays["embedding"] = model.embedding.detach().cpu().numpy().copy()
    ckpt.write_archive(path, manifest, arrays)
    return str(path)


def load_personalized(path: Path | str) -> PersonalizedModel:
    manifest, arrays = ckpt.read_archive(path)
    if manifest.get("kind") != "personalized":
        raise ConfigurationError(f"{path} is not a personalized-model checkpoint")
    network_config = network_config_from_dict(manifest["network_config"])
    generator = Generator(network_config)
    discriminator = FinetuneDiscriminator(network_config)
    ckpt.load_module_arrays(generator, arrays, "generator")
    ckpt.load_module_arrays(discriminator, arrays, "discriminator")
    generator.eval()
    discriminator.eval()
    return PersonalizedModel(
        network_config=network_config,
        train_config=MetaTrainConfig.from_dict(manifest["train_config"]),
        loss_weights=L.LossWeights.from_dict(manifest["loss_weights"]),
        generator=generator,
        adaptive=nn.Parameter(torch.from_numpy(arrays["adaptive"].copy())),
        discriminator=discriminator,
        embedding=torch.from_numpy(arrays["embedding"].copy()),
        source_checkpoint=manifest["source_checkpoint"],
        freeze_generic=bool(manifest.get("freeze_generic", False)),
    )
