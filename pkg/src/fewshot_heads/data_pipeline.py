"""Dataset ingestion, landmark rasterization, and episode sampling.

Dataset layout on disk:

    <root>/<seq_id>/frames/<%06d>.png    8-bit RGB, mapped to [-1, 1] via v/127.5 - 1
    <root>/<seq_id>/landmarks.txt        one line per frame, 136 floats (68 x,y pairs in [0,1])

Sequence ids are assigned by sorting directory names; frames are sorted by
filename. Rasterization is a pure function of (landmarks, connectivity, size):
hard 1px-at-64 Bresenham lines, no anti-aliasing, background fixed at -1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from fewshot_heads.errors import ConfigurationError, DataError

logger = logging.getLogger(__name__)

NUM_LANDMARKS = 68


@dataclass(frozen=True)
class LandmarkSet:
    """68 facial landmark coordinates normalized to [0,1] x [0,1]."""

    points: np.ndarray  # (68, 2) float64

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (NUM_LANDMARKS, 2):
            raise ValueError(f"expected ({NUM_LANDMARKS}, 2) landmark array, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DataError("landmark coordinates must be finite")
        pts = np.clip(pts, 0.0, 1.0)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True)
class ConnectivityGroup:
    """One polyline: landmark indices plus an RGB color (0-255).

    Closed contours repeat their first index at the end.
    """

    name: str
    indices: tuple[int, ...]
    color: tuple[int, int, int]


@dataclass(frozen=True)
class ConnectivitySpec:
    """Ordered polyline groups and the line width at the 64px reference resolution."""

    groups: tuple[ConnectivityGroup, ...]
    line_width: int = 1

    def __post_init__(self):
        for group in self.groups:
            for idx in group.indices:
                if not 0 <= idx < NUM_LANDMARKS:
                    raise ConfigurationError(
                        f"connectivity group '{group.name}' references landmark {idx}, "
                        f"valid range is [0, {NUM_LANDMARKS})"
                    )
        colors = [g.color for g in self.groups]
        if len(set(colors)) != len(colors):
            raise ConfigurationError("connectivity group colors must be distinct")
        if self.line_width < 1:
            raise ConfigurationError("line_width must be >= 1")


def _closed(indices: Iterable[int]) -> tuple[int, ...]:
    seq = tuple(indices)
    return seq + (seq[0],)


# iBUG-68 grouping; closed contours (eyes, lips) repeat their first point.
IBUG_68 = ConnectivitySpec(
    groups=(
        ConnectivityGroup("jaw", tuple(range(0, 17)), (0, 255, 0)),
        ConnectivityGroup("right_brow", tuple(range(17, 22)), (255, 128, 0)),
        ConnectivityGroup("left_brow", tuple(range(22, 27)), (255, 255, 0)),
        ConnectivityGroup("nose", tuple(range(27, 36)), (0, 255, 255)),
        ConnectivityGroup("right_eye", _closed(range(36, 42)), (255, 0, 0)),
        ConnectivityGroup("left_eye", _closed(range(42, 48)), (0, 0, 255)),
        ConnectivityGroup("outer_lip", _closed(range(48, 60)), (255, 0, 255)),
        ConnectivityGroup("inner_lip", _closed(range(60, 68)), (255, 255, 255)),
    ),
    line_width=1,
)

REFERENCE_RESOLUTION = 64


def _bresenham(r0: int, c0: int, r1: int, c1: int) -> list[tuple[int, int]]:
    """Integer line from (r0,c0) to (r1,c1), inclusive."""
    pixels = []
    dr = abs(r1 - r0)
    dc = abs(c1 - c0)
    sr = 1 if r0 < r1 else -1
    sc = 1 if c0 < c1 else -1
    err = dc - dr
    r, c = r0, c0
    while True:
        pixels.append((r, c))
        if r == r1 and c == c1:
            break
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr
    return pixels


def rasterize_landmarks(
    landmarks: LandmarkSet,
    spec: ConnectivitySpec = IBUG_68,
    height: int = 64,
    width: int = 64,
) -> np.ndarray:
    """Draw landmark polylines into an (H, W, 3) float32 image in [-1, 1].

    Background is -1; each group is drawn in order with hard (non-antialiased)
    lines, so later groups overwrite earlier ones deterministically.
    """
    if height < 8 or width < 8:
        raise ValueError(f"canvas must be at least 8x8, got {height}x{width}")
    pts = landmarks.points
    if not np.all(np.isfinite(pts)):
        raise DataError("landmark coordinates must be finite")

    canvas = np.full((height, width, 3), -1.0, dtype=np.float32)
    thickness = max(1, int(np.floor(spec.line_width * min(height, width) / REFERENCE_RESOLUTION + 0.5)))
    lo = (thickness - 1) // 2
    hi = thickness // 2

    cols = np.floor(pts[:, 0] * (width - 1) + 0.5).astype(np.int64)
    rows = np.floor(pts[:, 1] * (height - 1) + 0.5).astype(np.int64)

    for group in spec.groups:
        color = np.array([c / 127.5 - 1.0 for c in group.color], dtype=np.float32)
        for a, b in zip(group.indices[:-1], group.indices[1:]):
            for r, c in _bresenham(rows[a], cols[a], rows[b], cols[b]):
                r0 = max(r - lo, 0)
                r1 = min(r + hi, height - 1)
                c0 = max(c - lo, 0)
                c1 = min(c + hi, width - 1)
                canvas[r0 : r1 + 1, c0 : c1 + 1] = color
    return canvas


@dataclass(frozen=True)
class FrameRecord:
    """One video frame with its landmarks and rasterized landmark image."""

    image: np.ndarray  # (H, W, 3) float32 in [-1, 1]
    landmarks: LandmarkSet
    landmark_image: np.ndarray  # (H, W, 3) float32 in [-1, 1]

    def __post_init__(self):
        if self.image.shape != self.landmark_image.shape:
            raise ValueError(
                f"image {self.image.shape} and landmark image {self.landmark_image.shape} differ"
            )


@dataclass(frozen=True)
class VideoSequence:
    """One training sequence: contiguous id, source name, ordered frames."""

    id: int
    name: str
    frames: tuple[FrameRecord, ...]

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class IngestReport:
    rejected: list[tuple[str, str]] = field(default_factory=list)
    skipped_frames: int = 0

    def summary(self) -> str:
        lines = [f"rejected sequences: {len(self.rejected)}, skipped frames: {self.skipped_frames}"]
        for name, reason in self.rejected:
            lines.append(f"  - {name}: {reason}")
        return "\n".join(lines)


@dataclass
class Dataset:
    """Ingested sequences with contiguous ids plus the ingestion report."""

    sequences: list[VideoSequence]
    report: IngestReport = field(default_factory=IngestReport)

    def __len__(self) -> int:
        return len(self.sequences)

    def __getitem__(self, i: int) -> VideoSequence:
        return self.sequences[i]


def identity_of(sequence_name: str) -> str:
    """Person identity behind a sequence: the part before '__', else the full name."""
    return sequence_name.split("__", 1)[0]


def load_image(path: Path) -> np.ndarray:
    """8-bit RGB PNG -> (H, W, 3) float32 in [-1, 1] (v/127.5 - 1)."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return (arr / 127.5 - 1.0).astype(np.float32)


def save_image(image: np.ndarray, path: Path) -> None:
    """(H, W, 3) float in [-1, 1] -> 8-bit RGB PNG."""
    arr = np.clip((np.asarray(image, dtype=np.float64) + 1.0) * 127.5, 0.0, 255.0)
    Image.fromarray(np.floor(arr + 0.5).astype(np.uint8), mode="RGB").save(path)


def read_landmark_file(path: Path) -> list[LandmarkSet]:
    """Parse a landmarks.txt: one line per frame, 136 space-separated floats."""
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        values = np.array(line.split(), dtype=np.float64)
        if values.size != 2 * NUM_LANDMARKS:
            raise DataError(
                f"{path}:{lineno}: expected {2 * NUM_LANDMARKS} values, got {values.size}"
            )
        records.append(LandmarkSet(values.reshape(NUM_LANDMARKS, 2)))
    return records


def write_landmark_file(landmark_sets: Sequence[LandmarkSet], path: Path) -> None:
    lines = [" ".join(f"{v:.8f}" for v in ls.points.reshape(-1)) for ls in landmark_sets]
    path.write_text("\n".join(lines) + "\n")


def load_sequence_dir(
    seq_dir: Path | str,
    spec: ConnectivitySpec = IBUG_68,
    sequence_id: int = 0,
    report: IngestReport | None = None,
    frames_dirname: str = "frames",
    landmarks_filename: str = "landmarks.txt",
) -> VideoSequence:
    """Load one `<seq>/frames/*.png` + `<seq>/landmarks.txt` directory.

    Raises DataError when the sequence is unusable; unreadable individual
    frames are skipped (counted in `report` when given).
    """
    seq_dir = Path(seq_dir)
    frames_dir = seq_dir / frames_dirname
    lm_path = seq_dir / landmarks_filename
    if not lm_path.is_file():
        raise DataError("missing landmark file")
    if not frames_dir.is_dir():
        raise DataError("missing frames directory")
    frame_paths = sorted(frames_dir.glob("*.png"))
    landmark_sets = read_landmark_file(lm_path)
    if len(landmark_sets) != len(frame_paths):
        raise DataError(f"{len(frame_paths)} frames but {len(landmark_sets)} landmark rows")

    records = []
    for frame_path, landmarks in zip(frame_paths, landmark_sets):
        try:
            image = load_image(frame_path)
        except Exception as exc:  # corrupt image: skip the frame, keep the sequence
            logger.warning("skipping unreadable frame %s: %s", frame_path, exc)
            if report is not None:
                report.skipped_frames += 1
            continue
        h, w = image.shape[:2]
        records.append(
            FrameRecord(
                image=image,
                landmarks=landmarks,
                landmark_image=rasterize_landmarks(landmarks, spec, h, w),
            )
        )
    if not records:
        raise DataError("no readable frames")
    return VideoSequence(id=sequence_id, name=seq_dir.name, frames=tuple(records))


def ingest_dataset(
    root: Path | str,
    spec: ConnectivitySpec = IBUG_68,
    frames_dirname: str = "frames",
    landmarks_filename: str = "landmarks.txt",
) -> Dataset:
    """Scan a dataset root and build the sequence index.

    Sequences missing their landmark file (or with a frame/landmark count
    mismatch) are rejected and reported; unreadable frame images are skipped
    with a warning count.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root does not exist: {root}")

    report = IngestReport()
    sequences: list[VideoSequence] = []
    for seq_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            seq = load_sequence_dir(
                seq_dir,
                spec,
                sequence_id=len(sequences),
                report=report,
                frames_dirname=frames_dirname,
                landmarks_filename=landmarks_filename,
            )
        except DataError as exc:
            report.rejected.append((seq_dir.name, str(exc)))
            continue
        sequences.append(seq)

    if not sequences:
        logger.warning("dataset root %s yielded no usable sequences", root)
    return Dataset(sequences=sequences, report=report)


@dataclass(frozen=True)
class Episode:
    """One K-shot task: a target frame plus K support frames from one sequence."""

    video_index: int
    target_index: int
    support_indices: tuple[int, ...]

    @property
    def k(self) -> int:
        return len(self.support_indices)


def sample_episode(dataset: Dataset | Sequence[VideoSequence], k: int, rng: np.random.Generator) -> Episode:
    """Draw one episode: uniform sequence, uniform target, K supports.

    Supports are drawn without replacement and exclude the target whenever the
    sequence has more than K frames; shorter sequences fall back to sampling
    the non-target frames with replacement.
    """
    if k < 1:
        raise ConfigurationError(f"episode shot count must be >= 1, got {k}")
    sequences = dataset.sequences if isinstance(dataset, Dataset) else list(dataset)
    if not sequences:
        raise ValueError("cannot sample an episode from an empty dataset")

    seq = sequences[int(rng.integers(len(sequences)))]
    n = len(seq)
    t = int(rng.integers(n))
    others = [i for i in range(n) if i != t]
    if not others:
        supports = tuple([t] * k)  # single-frame sequence: the target is all we have
    elif len(others) >= k:
        chosen = rng.choice(len(others), size=k, replace=False)
        supports = tuple(others[int(i)] for i in chosen)
    else:
        chosen = rng.choice(len(others), size=k, replace=True)
        supports = tuple(others[int(i)] for i in chosen)
    return Episode(video_index=seq.id, target_index=t, support_indices=supports)
