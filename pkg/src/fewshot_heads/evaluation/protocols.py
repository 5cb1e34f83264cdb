"""Evaluation protocols: self-reenactment, user-study triplets, puppeteering ranking.

Model factories are callables: factory(finetune_frames) returns a synthesis
function mapping a list of landmark images to a list of generated frames. That
keeps the protocols independent of how the model was personalized (and lets
tests drive them with oracle or stub models).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from fewshot_heads.data_pipeline import Dataset, FrameRecord, VideoSequence, save_image
from fewshot_heads.evaluation.metrics import (
    FaceEmbedder,
    compute_csim,
    compute_fid,
    compute_ssim,
    default_face_embedder,
    default_fid_features,
    featurize_images,
)

logger = logging.getLogger(__name__)

SynthesisFn = Callable[[Sequence[np.ndarray]], Sequence[np.ndarray]]
ModelFactory = Callable[[Sequence[FrameRecord]], SynthesisFn]

DEFAULT_EVAL_VIDEOS = 50
DEFAULT_HOLDOUT_FRAMES = 32


@dataclass(frozen=True)
class MetricRow:
    method: str
    t: int
    fid: float
    ssim: float
    csim: float
    n_items: int
    aggregation: str  # "frame_mean" or "video_mean"

    def __post_init__(self):
        if self.fid < 0:
            raise ValueError(f"fid must be >= 0, got {self.fid}")
        if not -1.0 - 1e-9 <= self.ssim <= 1.0 + 1e-9:
            raise ValueError(f"ssim must lie in [-1, 1], got {self.ssim}")
        if not -1.0 - 1e-9 <= self.csim <= 1.0 + 1e-9:
            raise ValueError(f"csim must lie in [-1, 1], got {self.csim}")


@dataclass
class MetricReport:
    rows: list[MetricRow]
    protocol: dict = field(default_factory=dict)

    def to_json(self, path: Path | str) -> None:
        payload = {"rows": [vars(r) for r in self.rows], "protocol": self.protocol}
        Path(path).write_text(json.dumps(payload, indent=2, default=str) + "\n")

    def to_csv(self, path: Path | str) -> None:
        header = "method,t,fid,ssim,csim,n_items,aggregation"
        lines = [header] + [
            f"{r.method},{r.t},{r.fid!r},{r.ssim!r},{r.csim!r},{r.n_items},{r.aggregation}"
            for r in self.rows
        ]
        Path(path).write_text("\n".join(lines) + "\n")


def self_reenactment_eval(
    model_factory: ModelFactory,
    dataset: Dataset | Sequence[VideoSequence],
    t: int,
    holdout_per_video: int = DEFAULT_HOLDOUT_FRAMES,
    n_videos: int = DEFAULT_EVAL_VIDEOS,
    rng: np.random.Generator | None = None,
    feature_extractor: FaceEmbedder | None = None,
    face_embedder: FaceEmbedder | None = None,
    method: str = "ours",
) -> MetricReport:
    """Fine-tune per video on its first t frames, synthesize the next
    holdout_per_video frames from their landmarks, and score against ground truth.

    The fine-tune and holdout index sets are disjoint by construction; videos
    too short for both are skipped and reported in the protocol descriptor.
    """
    if t < 1 or holdout_per_video < 1:
        raise ValueError("t and holdout_per_video must be >= 1")
    sequences = list(dataset.sequences if isinstance(dataset, Dataset) else dataset)
    rng = rng or np.random.default_rng(0)
    if len(sequences) > n_videos:
        chosen = rng.choice(len(sequences), size=n_videos, replace=False)
        sequences = [sequences[i] for i in sorted(int(i) for i in chosen)]

    feature_extractor = feature_extractor or default_fid_features()
    face_embedder = face_embedder or default_face_embedder()

    splits: dict[str, dict] = {}
    skipped: list[tuple[str, str]] = []
    per_video_ssim: list[float] = []
    per_video_csim: list[float] = []
    frame_ssim: list[float] = []
    frame_csim: list[float] = []
    real_frames: list[np.ndarray] = []
    generated_frames: list[np.ndarray] = []

    for seq in sequences:
        if len(seq) < t + holdout_per_video:
            skipped.append((seq.name, f"needs {t + holdout_per_video} frames, has {len(seq)}"))
            continue
        finetune_idx = list(range(t))
        holdout_idx = list(range(t, t + holdout_per_video))
        assert not set(finetune_idx) & set(holdout_idx)
        splits[seq.name] = {"finetune": finetune_idx, "holdout": holdout_idx}

        synthesize = model_factory([seq.frames[i] for i in finetune_idx])
        holdout = [seq.frames[i] for i in holdout_idx]
        outputs = list(synthesize([f.landmark_image for f in holdout]))
        if len(outputs) != len(holdout):
            raise ValueError(f"model produced {len(outputs)} frames for {len(holdout)} landmarks")

        v_ssim, v_csim = [], []
        for record, generated in zip(holdout, outputs):
            v_ssim.append(compute_ssim(record.image, generated))
            v_csim.append(compute_csim(record.image, generated, face_embedder))
            real_frames.append(record.image)
            generated_frames.append(np.asarray(generated))
        frame_ssim.extend(v_ssim)
        frame_csim.extend(v_csim)
        per_video_ssim.append(float(np.mean(v_ssim)))
        per_video_csim.append(float(np.mean(v_csim)))

    if not frame_ssim:
        raise ValueError("no video had enough frames for a disjoint finetune/holdout split")

    fid = compute_fid(
        featurize_images(real_frames, feature_extractor),
        featurize_images(generated_frames, feature_extractor),
    )
    rows = [
        MetricRow(method, t, fid, float(np.mean(frame_ssim)), float(np.mean(frame_csim)),
                  len(frame_ssim), "frame_mean"),
        MetricRow(method, t, fid, float(np.mean(per_video_ssim)), float(np.mean(per_video_csim)),
                  len(per_video_ssim), "video_mean"),
    ]
    protocol = {
        "name": "self-reenactment",
        "t": t,
        "holdout_per_video": holdout_per_video,
        "videos": [s.name for s in sequences],
        "splits": splits,
        "skipped": skipped,
    }
    return MetricReport(rows=rows, protocol=protocol)


def build_user_study_triplets(
    identity_videos: Mapping[str, Sequence[VideoSequence]],
    generated: Mapping[str, Sequence[np.ndarray]],
    n_triplets: int,
    rng: np.random.Generator,
    out_dir: Path | str | None = None,
) -> tuple[dict, dict]:
    """Assemble fake-spotting triplets: two real frames from distinct videos of
    one person plus one generated frame at a uniformly random position.

    Returns (manifest, answers). The manifest never contains the fake position;
    when out_dir is given, per-triplet grid PNGs, manifest.json, and the
    separate answers.json are written there.
    """
    if n_triplets < 0:
        raise ValueError("n_triplets must be >= 0")
    eligible = []
    excluded = []
    for ident in sorted(identity_videos):
        videos = list(identity_videos[ident])
        if len(videos) < 2:
            excluded.append((ident, "fewer than 2 real videos"))
        elif len(generated.get(ident, ())) == 0:
            excluded.append((ident, "no generated frames"))
        else:
            eligible.append(ident)
    if n_triplets > 0 and not eligible:
        raise ValueError("no identity has 2 real videos plus generated frames")

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    entries = []
    answers = {}
    for k in range(n_triplets):
        ident = eligible[int(rng.integers(len(eligible)))]
        videos = list(identity_videos[ident])
        vi, vj = (int(i) for i in rng.choice(len(videos), size=2, replace=False))
        real_a = videos[vi].frames[int(rng.integers(len(videos[vi])))].image
        real_b = videos[vj].frames[int(rng.integers(len(videos[vj])))].image
        fakes = generated[ident]
        fake = np.asarray(fakes[int(rng.integers(len(fakes)))])
        fake_position = int(rng.integers(3))

        panel = [real_a, real_b]
        panel.insert(fake_position, fake)
        entry = {"id": k, "identity": ident}
        if out_path is not None:
            grid_name = f"triplet_{k:05d}.png"
            save_image(np.concatenate(panel, axis=1), out_path / grid_name)
            entry["grid"] = grid_name
        entries.append(entry)
        answers[str(k)] = fake_position

    manifest = {"n_triplets": n_triplets, "triplets": entries, "excluded": excluded}
    if out_path is not None:
        (out_path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        (out_path / "answers.json").write_text(json.dumps(answers, indent=2) + "\n")
    return manifest, answers


def rank_puppeteering_sources(
    still: FrameRecord,
    candidates: Sequence[VideoSequence],
    face_embedder: FaceEmbedder | None = None,
    personalize: ModelFactory | None = None,
) -> list[dict]:
    """One-shot personalize on the still image, drive the model with each
    candidate's landmark track, and rank candidates by mean CSIM against the
    still (descending; ties broken by candidate index)."""
    if personalize is None:
        raise ValueError("rank_puppeteering_sources needs a personalization factory")
    if not candidates:
        return []
    face_embedder = face_embedder or default_face_embedder()
    synthesize = personalize([still])
    scored = []
    for index, video in enumerate(candidates):
        outputs = synthesize([f.landmark_image for f in video.frames])
        csims = [compute_csim(still.image, np.asarray(g), face_embedder) for g in outputs]
        score = float(np.mean(csims))
        if not math.isfinite(score):
            raise ValueError(f"non-finite CSIM score for candidate {video.name}")
        scored.append({"candidate": index, "name": video.name, "csim": score})
    scored.sort(key=lambda row: (-row["csim"], row["candidate"]))
    return scored
