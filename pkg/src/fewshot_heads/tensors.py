"""Small numpy <-> torch conversion helpers shared by training and evaluation."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from fewshot_heads.data_pipeline import FrameRecord


def to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) float image -> (3, H, W) float32 tensor."""
    arr = np.ascontiguousarray(np.asarray(image, dtype=np.float32).transpose(2, 0, 1))
    return torch.from_numpy(arr)


def to_image(tensor: torch.Tensor) -> np.ndarray:
    """(3, H, W) tensor -> (H, W, 3) float32 array."""
    return tensor.detach().cpu().numpy().transpose(1, 2, 0).astype(np.float32, copy=True)


def frame_batch(records: Sequence[FrameRecord]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack frame records into (B, 3, H, W) image and landmark-image tensors."""
    if len(records) == 0:
        raise ValueError("need at least one frame record")
    images = torch.stack([to_tensor(r.image) for r in records])
    landmark_images = torch.stack([to_tensor(r.landmark_image) for r in records])
    return images, landmark_images
