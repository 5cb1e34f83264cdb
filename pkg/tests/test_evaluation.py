"""Metric oracles and protocol contracts."""

import json
import logging

import numpy as np
import pytest

from fewshot_heads.data_pipeline import Dataset
from fewshot_heads.errors import DataError
from fewshot_heads.evaluation import (
    build_user_study_triplets,
    compute_csim,
    compute_fid,
    compute_ssim,
    measure_times,
    rank_puppeteering_sources,
    self_reenactment_eval,
)
from fewshot_heads.evaluation.metrics import default_face_embedder

from synthetic import synthetic_dataset, synthetic_sequence


def _image(seed, resolution=32):
    rng = np.random.default_rng(seed)
    return (rng.random((resolution, resolution, 3)) * 2 - 1).astype(np.float32)


class TestFid:
    def test_identical_sets_give_zero(self, rng):
        feats = rng.normal(size=(200, 6))
        assert compute_fid(feats, feats.copy()) < 1e-6

    def test_gaussian_mean_offset_matches_closed_form(self):
        rng = np.random.default_rng(42)
        dim = 8
        offset = np.zeros(dim)
        offset[0], offset[1] = 1.6, 1.2  # ||d||^2 = 4.0
        a = rng.normal(size=(10_000, dim))
        b = rng.normal(size=(10_000, dim)) + offset
        fid = compute_fid(a, b)
        assert abs(fid - 4.0) <= 0.02 * 4.0

    def test_symmetry_and_order_invariance(self, rng):
        a = rng.normal(size=(300, 5))
        b = rng.normal(size=(300, 5)) * 1.4 + 0.3
        assert abs(compute_fid(a, b) - compute_fid(b, a)) < 1e-6
        shuffled = a[rng.permutation(len(a))]
        assert abs(compute_fid(a, b) - compute_fid(shuffled, b)) < 1e-9

    def test_non_finite_features_rejected(self, rng):
        bad = rng.normal(size=(50, 4))
        bad[3, 2] = np.nan
        with pytest.raises(DataError):
            compute_fid(bad, rng.normal(size=(50, 4)))

    def test_result_is_nonnegative(self, rng):
        a = rng.normal(size=(40, 3))
        b = a + rng.normal(scale=1e-8, size=a.shape)
        assert compute_fid(a, b) >= 0.0


class TestSsim:
    def test_identical_images_give_exactly_one(self):
        img = _image(0)
        assert compute_ssim(img, img.copy()) == 1.0

    def test_constant_images_match_formula_reduction(self):
        c1 = 0.01**2
        for p_raw, q_raw in ((0.2, -0.4), (0.8, 0.8), (-1.0, 1.0)):
            a = np.full((32, 32, 3), p_raw, dtype=np.float64)
            b = np.full((32, 32, 3), q_raw, dtype=np.float64)
            p, q = (p_raw + 1) / 2, (q_raw + 1) / 2  # luminance of the rescaled constants
            expected = (2 * p * q + c1) / (p * p + q * q + c1)
            assert abs(compute_ssim(a, b) - expected) < 1e-9

    def test_symmetry(self):
        a, b = _image(1), _image(2)
        assert compute_ssim(a, b) == pytest.approx(compute_ssim(b, a), abs=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            compute_ssim(_image(0, 32), _image(0, 16))

    def test_bounded_by_one(self):
        values = [compute_ssim(_image(i), _image(i + 100)) for i in range(5)]
        assert all(-1.0 <= v <= 1.0 for v in values)


class TestCsim:
    def test_identical_image_gives_one(self):
        embedder = default_face_embedder()
        img = _image(3)
        assert compute_csim(img, img.copy(), embedder) == pytest.approx(1.0, abs=1e-9)

    def test_orthogonal_and_negated_embeddings(self):
        table = {0: np.array([1.0, 0.0]), 1: np.array([0.0, 1.0]), 2: np.array([-1.0, 0.0])}
        embedder = lambda img: table[int(img[0, 0, 0])]

        def tagged(tag):
            img = np.zeros((4, 4, 3))
            img[0, 0, 0] = tag
            return img

        assert compute_csim(tagged(0), tagged(1), embedder) == pytest.approx(0.0)
        assert compute_csim(tagged(0), tagged(2), embedder) == pytest.approx(-1.0)

    def test_scale_invariance_is_exact(self):
        rng = np.random.default_rng(5)
        va, vb = rng.normal(size=8), rng.normal(size=8)
        for scale in (2.0, 8.0, 0.25):  # powers of two: bitwise-exact rescaling
            base = compute_csim(va, vb, lambda v: v)
            scaled = compute_csim(va * scale, vb, lambda v: v)
            assert scaled == base

    def test_zero_norm_embedding_warns_and_returns_zero(self, caplog):
        embedder = lambda img: np.zeros(4)
        with caplog.at_level(logging.WARNING):
            value = compute_csim(_image(0), _image(1), embedder)
        assert value == 0.0
        assert any("zero-norm" in m for m in caplog.messages)


def _oracle_factory(sequences):
    """Perfect model: returns the ground-truth frame for each landmark image."""
    lookup = {}
    for seq in sequences:
        for frame in seq.frames:
            lookup[frame.landmark_image.tobytes()] = frame.image

    def factory(finetune_frames):
        return lambda landmark_images: [lookup[np.asarray(lm).tobytes()] for lm in landmark_images]

    return factory


class TestSelfReenactment:
    def test_oracle_model_scores_perfectly(self):
        ds = synthetic_dataset(n_identities=3, frames_per_video=10, resolution=32, seed=8)
        report = self_reenactment_eval(
            _oracle_factory(ds.sequences), ds, t=4, holdout_per_video=4, n_videos=3
        )
        for row in report.rows:
            assert row.ssim == pytest.approx(1.0, abs=1e-9)
            assert row.csim == pytest.approx(1.0, abs=1e-9)
            assert row.fid < 1e-6

    def test_splits_are_disjoint_and_recorded(self):
        ds = synthetic_dataset(n_identities=4, frames_per_video=12, resolution=32, seed=9)
        report = self_reenactment_eval(
            _oracle_factory(ds.sequences), ds, t=5, holdout_per_video=6, n_videos=4
        )
        assert report.protocol["splits"]
        for split in report.protocol["splits"].values():
            assert not set(split["finetune"]) & set(split["holdout"])
            assert len(split["finetune"]) == 5
            assert len(split["holdout"]) == 6

    def test_too_short_video_skipped_with_reason(self):
        short = synthetic_sequence(0, n_frames=30, resolution=32, seed=1, name="short")
        long = synthetic_sequence(1, n_frames=48, resolution=32, seed=2, sequence_id=1, name="long")
        ds = Dataset(sequences=[short, long])
        report = self_reenactment_eval(
            _oracle_factory(ds.sequences), ds, t=16, holdout_per_video=32, n_videos=2
        )
        skipped = dict(report.protocol["skipped"])
        assert "short" in skipped
        assert list(report.protocol["splits"]) == ["long"]

    def test_default_protocol_sizes(self):
        from fewshot_heads.evaluation.protocols import DEFAULT_EVAL_VIDEOS, DEFAULT_HOLDOUT_FRAMES

        assert DEFAULT_EVAL_VIDEOS == 50
        assert DEFAULT_HOLDOUT_FRAMES == 32

    def test_report_files_round_trip(self, tmp_path):
        ds = synthetic_dataset(n_identities=3, frames_per_video=10, resolution=32, seed=8)
        report = self_reenactment_eval(
            _oracle_factory(ds.sequences), ds, t=4, holdout_per_video=4, n_videos=3
        )
        report.to_csv(tmp_path / "m.csv")
        report.to_json(tmp_path / "m.json")
        loaded = json.loads((tmp_path / "m.json").read_text())
        assert len(loaded["rows"]) == 2
        assert (tmp_path / "m.csv").read_text().startswith("method,t,fid,ssim,csim")


class TestMetricRowInvariants:
    def test_negative_fid_rejected(self):
        from fewshot_heads.evaluation import MetricRow

        with pytest.raises(ValueError):
            MetricRow("m", 1, -0.1, 0.5, 0.5, 1, "frame_mean")

    def test_out_of_range_similarity_rejected(self):
        from fewshot_heads.evaluation import MetricRow

        with pytest.raises(ValueError):
            MetricRow("m", 1, 0.0, 1.5, 0.5, 1, "frame_mean")
        with pytest.raises(ValueError):
            MetricRow("m", 1, 0.0, 0.5, -1.5, 1, "frame_mean")


def _identity_groups(takes=2, identities=3, frames=6):
    groups = {}
    for i in range(identities):
        groups[f"id{i:02d}"] = [
            synthetic_sequence(i, frames, 32, seed=50 + 10 * i + t, name=f"id{i:02d}__take{t}")
            for t in range(takes)
        ]
    return groups


class TestTriplets:
    def test_zero_triplets_gives_empty_manifest(self, rng):
        manifest, answers = build_user_study_triplets(_identity_groups(), {}, 0, rng)
        assert manifest["triplets"] == []
        assert answers == {}

    def test_fixed_seed_reproduces_manifest(self):
        groups = _identity_groups()
        generated = {k: [v[0].frames[0].image] for k, v in groups.items()}
        a = build_user_study_triplets(groups, generated, 20, np.random.default_rng(7))
        b = build_user_study_triplets(groups, generated, 20, np.random.default_rng(7))
        assert a == b

    def test_single_video_identities_excluded_and_reported(self, rng):
        groups = _identity_groups()
        groups["loner"] = [synthetic_sequence(9, 4, 32, seed=99, name="loner")]
        generated = {k: [v[0].frames[0].image] for k, v in groups.items()}
        manifest, _ = build_user_study_triplets(groups, generated, 10, rng)
        assert ("loner", "fewer than 2 real videos") in manifest["excluded"]
        assert all(t["identity"] != "loner" for t in manifest["triplets"])

    def test_fake_position_roughly_uniform(self):
        groups = _identity_groups()
        generated = {k: [v[0].frames[0].image] for k, v in groups.items()}
        _, answers = build_user_study_triplets(groups, generated, 1500, np.random.default_rng(3))
        counts = np.bincount(list(answers.values()), minlength=3) / 1500
        assert np.all(np.abs(counts - 1 / 3) < 0.03)

    def test_answer_key_not_in_manifest_files(self, tmp_path, rng):
        groups = _identity_groups()
        generated = {k: [v[0].frames[0].image] for k, v in groups.items()}
        manifest, answers = build_user_study_triplets(groups, generated, 5, rng, out_dir=tmp_path)
        manifest_text = (tmp_path / "manifest.json").read_text()
        assert "fake" not in manifest_text.lower()
        assert json.loads((tmp_path / "answers.json").read_text()) == answers
        assert (tmp_path / "triplet_00000.png").exists()


class TestPuppeteerRanking:
    def test_single_candidate(self):
        seq = synthetic_sequence(0, 4, 32, seed=60)
        still = seq.frames[0]
        factory = lambda frames: (lambda lms: [still.image for _ in lms])
        ranking = rank_puppeteering_sources(still, [seq], personalize=factory)
        assert len(ranking) == 1
        assert ranking[0]["csim"] == pytest.approx(1.0, abs=1e-9)

    def test_empty_candidates(self):
        seq = synthetic_sequence(0, 4, 32, seed=61)
        factory = lambda frames: (lambda lms: [seq.frames[0].image for _ in lms])
        assert rank_puppeteering_sources(seq.frames[0], [], personalize=factory) == []

    def test_stub_embedder_orders_candidates_exactly(self):
        videos = [synthetic_sequence(i, 3, 32, seed=70 + i, sequence_id=i) for i in range(2)]
        still = videos[0].frames[0]
        factory = lambda frames: (lambda lms: [np.asarray(lm) for lm in lms])

        def stub_embedder(image):
            # still image -> (1, 0); candidate-0 frames -> cos 0.8; candidate-1 -> cos 0.3
            if np.shares_memory(image, still.image) or np.array_equal(image, still.image):
                return np.array([1.0, 0.0])
            tag = image.tobytes()
            for ci, video in enumerate(videos):
                if any(tag == f.landmark_image.tobytes() for f in video.frames):
                    angle = np.arccos(0.8) if ci == 0 else np.arccos(0.3)
                    return np.array([np.cos(angle), np.sin(angle)])
            raise AssertionError("unknown image")

        ranking = rank_puppeteering_sources(
            still, videos, face_embedder=stub_embedder, personalize=factory
        )
        assert [r["candidate"] for r in ranking] == [0, 1]
        assert ranking[0]["csim"] == pytest.approx(0.8, abs=1e-9)
        assert ranking[1]["csim"] == pytest.approx(0.3, abs=1e-9)

    def test_ties_broken_by_candidate_index(self):
        videos = [synthetic_sequence(i, 2, 32, seed=80 + i, sequence_id=i) for i in range(3)]
        still = videos[0].frames[0]
        factory = lambda frames: (lambda lms: [still.image for _ in lms])
        ranking = rank_puppeteering_sources(still, videos, personalize=factory)
        assert [r["candidate"] for r in ranking] == [0, 1, 2]


class TestTiming:
    def test_noop_stub_times_near_zero(self):
        ds = synthetic_dataset(n_identities=1, frames_per_video=8, resolution=32, seed=90)
        frames = list(ds[0].frames)
        factory = lambda subset: (lambda lms: [frames[0].image for _ in lms])
        table = measure_times(factory, frames, t_values=(1, 4), repetitions=20)
        kinds = [r.kind for r in table.rows]
        assert kinds == ["few_shot_learning", "few_shot_learning", "inference_per_frame"]
        assert all(r.mean_s < 0.01 for r in table.rows)
        assert all(r.repetitions == 20 for r in table.rows)

    def test_insufficient_frames_rejected(self):
        ds = synthetic_dataset(n_identities=1, frames_per_video=3, resolution=32, seed=91)
        factory = lambda subset: (lambda lms: list(lms))
        with pytest.raises(ValueError):
            measure_times(factory, list(ds[0].frames), t_values=(8,))

    def test_csv_includes_hardware_descriptor(self, tmp_path):
        ds = synthetic_dataset(n_identities=1, frames_per_video=4, resolution=32, seed=92)
        frames = list(ds[0].frames)
        factory = lambda subset: (lambda lms: [frames[0].image for _ in lms])
        table = measure_times(factory, frames, t_values=(2,), repetitions=20)
        table.to_csv(tmp_path / "t.csv")
        text = (tmp_path / "t.csv").read_text()
        assert "# hardware:" in text
