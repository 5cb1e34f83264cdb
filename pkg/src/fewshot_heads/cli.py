"""Command-line interface: ingest, meta-train, personalize, synthesize,
puppeteer, evaluate, bench-time.

Exit codes: 0 success, 1 runtime/data failure, 2 usage or configuration error.
Every command prints the sha256 hash of its fully resolved configuration, so
runs are attributable and reproducible given --seed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from fewshot_heads import finetune as FT
from fewshot_heads import meta_trainer as MT
from fewshot_heads import reporting
from fewshot_heads.checkpoint import file_sha256
from fewshot_heads.data_pipeline import (
    identity_of,
    ingest_dataset,
    load_sequence_dir,
    rasterize_landmarks,
    save_image,
)
from fewshot_heads.errors import ConfigurationError, DataError, TrainingAborted
from fewshot_heads.evaluation import (
    build_user_study_triplets,
    measure_times,
    rank_puppeteering_sources,
    self_reenactment_eval,
)
from fewshot_heads.run_config import RunConfig, apply_overrides, load_run_config

logger = logging.getLogger(__name__)


def _print_config_hash(payload: dict | RunConfig) -> None:
    if isinstance(payload, RunConfig):
        digest = payload.config_hash()
    else:
        digest = hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()
    print(f"config sha256: {digest}")


def _resolved_args(command: str, args: argparse.Namespace, skip=("func",)) -> dict:
    resolved = {k: v for k, v in vars(args).items() if k not in skip}
    resolved["command"] = command
    return resolved


def _load_frames(seq_dir: str, resolution: int, what: str):
    seq = load_sequence_dir(seq_dir)
    for frame in seq.frames:
        if frame.image.shape[:2] != (resolution, resolution):
            raise DataError(
                f"{what} frames are {frame.image.shape[:2]}, model expects {resolution}x{resolution}"
            )
    return seq


def _landmark_track(path: Path, resolution: int) -> list[np.ndarray]:
    """Landmark images rendered at model resolution from a landmarks.txt (or a
    sequence directory containing one)."""
    from fewshot_heads.data_pipeline import read_landmark_file

    path = Path(path)
    if path.is_dir():
        path = path / "landmarks.txt"
    if not path.is_file():
        raise DataError(f"landmark track not found: {path}")
    sets = read_landmark_file(path)
    if not sets:
        raise DataError(f"landmark track is empty: {path}")
    return [rasterize_landmarks(ls, height=resolution, width=resolution) for ls in sets]


def _personalize_factory(meta_state, epochs: int, disable_adv: bool, seed: int, source: str):
    """Model factory for the protocols: frames -> synthesis function."""

    def factory(frames):
        model = FT.personalize(meta_state, frames, source_checkpoint=source)
        if epochs > 0:
            FT.run_finetune(model, frames, epochs=epochs, disable_adv=disable_adv, seed=seed)
        return lambda landmark_images: FT.synthesize(model, landmark_images)

    return factory


# -- commands -----------------------------------------------------------------------


def cmd_ingest(args) -> int:
    _print_config_hash(_resolved_args("ingest", args))
    root = Path(args.root)
    if not root.is_dir():
        print(f"error: dataset root does not exist: {root}", file=sys.stderr)
        return 2
    dataset = ingest_dataset(root)
    index = {
        "root": str(root),
        "sequences": [
            {"id": s.id, "name": s.name, "identity": identity_of(s.name), "n_frames": len(s)}
            for s in dataset.sequences
        ],
        "rejected": dataset.report.rejected,
        "skipped_frames": dataset.report.skipped_frames,
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(index, indent=2) + "\n")
    print(dataset.report.summary())
    print(f"indexed {len(dataset)} sequences -> {out}")
    if len(dataset) == 0:
        print("warning: empty index", file=sys.stderr)
        return 1
    return 0


def cmd_meta_train(args) -> int:
    config = load_run_config(args.config)
    config = apply_overrides(
        config,
        seed=args.seed,
        data_root=args.data,
        out_dir=args.out,
        variant=args.variant,
        max_steps=args.max_steps,
    )
    if args.print_config:
        print(config.to_ini(), end="")
        _print_config_hash(config)
        return 0
    _print_config_hash(config)
    if not config.data_root:
        raise ConfigurationError("no dataset root: set [run] data_root or pass --data")
    dataset = ingest_dataset(config.data_root)
    if len(dataset) == 0:
        raise DataError(f"no usable sequences under {config.data_root}")
    network = replace(config.network, num_videos=len(dataset))
    out_dir = Path(config.out_dir)
    state = MT.run_meta_training(
        network, config.train, dataset, out_dir,
        loss_weights=config.losses, resume_from=args.resume,
    )
    metrics_csv = out_dir / "metrics.csv"
    if metrics_csv.exists() and len(metrics_csv.read_text().splitlines()) > 1:
        reporting.plot_training_curves(metrics_csv, out_dir / "loss_curves.png")
    print(f"finished at step {state.step}; checkpoint: {state.last_checkpoint}")
    return 0


def cmd_personalize(args) -> int:
    _print_config_hash(_resolved_args("personalize", args))
    meta_state = MT.load_meta_state(args.checkpoint)
    seq = _load_frames(args.frames, meta_state.network_config.resolution, "personalization")
    if len(seq) < args.t:
        raise DataError(f"need {args.t} frames, sequence '{seq.name}' has {len(seq)}")
    frames = list(seq.frames[: args.t])
    source = file_sha256(args.checkpoint)
    model = FT.personalize(
        meta_state, frames, source_checkpoint=source, freeze_generic=args.freeze_psi
    )
    if args.epochs > 0:
        FT.run_finetune(model, frames, epochs=args.epochs, disable_adv=args.no_adv, seed=args.seed)
    FT.save_personalized(model, args.out)
    mode = "feed-forward" if args.epochs == 0 else f"fine-tuned {args.epochs} epochs"
    print(f"personalized ({mode}, T={args.t}) -> {args.out}")
    return 0


def cmd_synthesize(args) -> int:
    _print_config_hash(_resolved_args("synthesize", args))
    model = FT.load_personalized(args.model)
    track = _landmark_track(Path(args.landmarks), model.network_config.resolution)
    frames = FT.synthesize(model, track)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        save_image(frame, out_dir / f"frame_{i:06d}.png")
    reporting.save_contact_sheet(frames, out_dir / "contact_sheet.png")
    print(f"wrote {len(frames)} frames + contact sheet -> {out_dir}")
    return 0


def cmd_puppeteer(args) -> int:
    _print_config_hash(_resolved_args("puppeteer", args))
    if args.rank:
        if not (args.checkpoint and args.still and args.candidates):
            raise ConfigurationError("--rank needs --checkpoint, --still, and --candidates")
        meta_state = MT.load_meta_state(args.checkpoint)
        resolution = meta_state.network_config.resolution
        still = _load_frames(args.still, resolution, "still").frames[0]
        candidates = ingest_dataset(args.candidates)
        if len(candidates) == 0:
            raise DataError(f"no candidate videos under {args.candidates}")
        factory = _personalize_factory(
            meta_state, args.epochs, disable_adv=False, seed=args.seed,
            source=file_sha256(args.checkpoint),
        )
        ranking = rank_puppeteering_sources(still, candidates.sequences, personalize=factory)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        lines = ["rank,candidate,name,csim"]
        lines += [f"{i},{r['candidate']},{r['name']},{r['csim']!r}" for i, r in enumerate(ranking)]
        (out_dir / "ranking.csv").write_text("\n".join(lines) + "\n")
        for i, row in enumerate(ranking):
            print(f"#{i}: {row['name']} (csim {row['csim']:.4f})")
        return 0

    if not (args.model and args.driver):
        raise ConfigurationError("puppeteering needs --model and --driver (or --rank mode)")
    model = FT.load_personalized(args.model)
    track = _landmark_track(Path(args.driver), model.network_config.resolution)
    frames = FT.synthesize(model, track)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        save_image(frame, out_dir / f"frame_{i:06d}.png")
    reporting.save_contact_sheet(frames, out_dir / "contact_sheet.png")
    print(f"puppeteered {len(frames)} frames -> {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    _print_config_hash(_resolved_args("evaluate", args))
    meta_state = MT.load_meta_state(args.checkpoint)
    dataset = ingest_dataset(args.data)
    if len(dataset) == 0:
        raise DataError(f"no usable sequences under {args.data}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    factory = _personalize_factory(
        meta_state, args.epochs, disable_adv=False, seed=args.seed,
        source=file_sha256(args.checkpoint),
    )

    if args.protocol == "self-reenactment":
        report = self_reenactment_eval(
            factory, dataset, t=args.t,
            holdout_per_video=args.holdout, n_videos=args.videos, rng=rng,
            method=f"ours-{'ff' if args.epochs == 0 else 'ft'}",
        )
        report.to_csv(out_dir / "metrics.csv")
        report.to_json(out_dir / "metrics.json")
        reporting.plot_metric_report(report, out_dir / "metrics.png")
        for row in report.rows:
            print(
                f"{row.method} T={row.t} [{row.aggregation}] "
                f"fid={row.fid:.4f} ssim={row.ssim:.4f} csim={row.csim:.4f} (n={row.n_items})"
            )
        if report.protocol["skipped"]:
            print(f"skipped videos: {report.protocol['skipped']}")
        return 0

    if args.protocol == "triplets":
        by_identity: dict[str, list] = {}
        for seq in dataset.sequences:
            by_identity.setdefault(identity_of(seq.name), []).append(seq)
        generated = {}
        for ident, videos in sorted(by_identity.items()):
            if len(videos) < 2 or len(videos[0]) < args.t:
                continue
            synthesize = factory(list(videos[0].frames[: args.t]))
            generated[ident] = synthesize([f.landmark_image for f in videos[1].frames])
        manifest, _ = build_user_study_triplets(
            by_identity, generated, n_triplets=args.n_triplets, rng=rng, out_dir=out_dir
        )
        print(f"wrote {len(manifest['triplets'])} triplets -> {out_dir} (answer key separate)")
        if manifest["excluded"]:
            print(f"excluded identities: {manifest['excluded']}")
        return 0

    raise ConfigurationError(f"unknown protocol '{args.protocol}'")


def cmd_bench_time(args) -> int:
    _print_config_hash(_resolved_args("bench-time", args))
    meta_state = MT.load_meta_state(args.checkpoint)
    dataset = ingest_dataset(args.data)
    t_values = [int(part) for part in args.t.split(",") if part.strip()]
    if not t_values:
        raise ConfigurationError("--t must list at least one value, e.g. 1,8,32")
    donor = next((s for s in dataset.sequences if len(s) >= max(t_values)), None)
    if donor is None:
        raise DataError(f"no sequence has the {max(t_values)} frames required")
    factory = _personalize_factory(
        meta_state, args.epochs, disable_adv=False, seed=args.seed,
        source=file_sha256(args.checkpoint),
    )
    table = measure_times(factory, list(donor.frames), t_values, repetitions=args.reps)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_dir / "timings.csv")
    reporting.plot_timing_table(table, out_dir / "timings.png")
    for row in table.rows:
        print(f"{row.kind} T={row.t}: {row.mean_s * 1e3:.2f} ms (over {row.repetitions} reps)")
    print(f"hardware: {table.hardware}")
    return 0


# -- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsh",
        description="Few-shot landmark-driven head synthesis: training, personalization, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="index a dataset root")
    p.add_argument("root")
    p.add_argument("--out", default="index.json")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("meta-train", help="episodic adversarial meta-training")
    p.add_argument("--config", default=None, help="INI run config")
    p.add_argument("--data", default=None, help="dataset root (overrides config)")
    p.add_argument("--out", default=None, help="output directory (overrides config)")
    p.add_argument("--variant", choices=("ff", "ft"), default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--print-config", action="store_true")
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("personalize", help="few-shot personalization of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", required=True, help="sequence directory (frames/ + landmarks.txt)")
    p.add_argument("--t", type=int, default=8)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--no-adv", action="store_true", help="fine-tune without the adversarial term")
    p.add_argument("--freeze-psi", action="store_true", help="freeze person-generic weights")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_personalize)

    p = sub.add_parser("synthesize", help="drive a personalized model with a landmark track")
    p.add_argument("--model", required=True)
    p.add_argument("--landmarks", required=True, help="landmarks.txt or a sequence directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("puppeteer", help="drive a model with another person's landmarks")
    p.add_argument("--model", default=None)
    p.add_argument("--driver", default=None, help="driving sequence directory or landmarks.txt")
    p.add_argument("--rank", action="store_true", help="rank candidate driver videos by CSIM")
    p.add_argument("--checkpoint", default=None, help="meta checkpoint (rank mode)")
    p.add_argument("--still", default=None, help="one-shot source sequence dir (rank mode)")
    p.add_argument("--candidates", default=None, help="root of candidate videos (rank mode)")
    p.add_argument("--epochs", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_puppeteer)

    p = sub.add_parser("evaluate", help="quantitative protocols")
    p.add_argument("--protocol", choices=("self-reenactment", "triplets"), required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--t", type=int, default=8)
    p.add_argument("--holdout", type=int, default=32)
    p.add_argument("--videos", type=int, default=50)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--n-triplets", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench-time", help="few-shot learning and inference timings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--t", default="1,8", help="comma-separated T values")
    p.add_argument("--epochs", type=int, default=0, help="0 = feed-forward personalization")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench_time)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (DataError, TrainingAborted, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
