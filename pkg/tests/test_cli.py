"""CLI surface: every command end-to-end on a tiny on-disk dataset."""

import json
import re

import pytest

from fewshot_heads.cli import main

from synthetic import write_toy_dataset

TINY_INI = """\
[run]
seed = 1
data_root = {root}
out_dir = {out}

[network]
resolution = 32
min_channels = 8
max_channels = 32
embedding_dim = 16
n_down_blocks = 2
n_bottleneck_blocks = 1
n_up_blocks = 2
self_attention_resolutions = 8

[training]
k = 3
batch_size = 1
max_steps = 2
lr_eg = 2e-4
lr_d = 5e-4
ckpt_every = 50

[losses]
fm_weight = 10
mch_weight = 10
content.identity = 1.0
content.random_pyramid = 0.15
content.random_pyramid.layers = 0,1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Toy data + a 2-step checkpoint shared by the command tests."""
    base = tmp_path_factory.mktemp("cli")
    root = write_toy_dataset(base / "data", n_identities=3, frames_per_video=8,
                             resolution=32, seed=3, takes_per_identity=2)
    run_dir = base / "run"
    config = base / "run.ini"
    config.write_text(TINY_INI.format(root=root, out=run_dir))
    assert main(["meta-train", "--config", str(config)]) == 0
    ckpt = run_dir / "ckpt_000002.npz"
    assert ckpt.exists()
    return {"base": base, "root": root, "config": config, "run_dir": run_dir, "ckpt": ckpt}


def test_ingest_writes_index_and_is_idempotent(workspace, capsys):
    out = workspace["base"] / "index.json"
    assert main(["ingest", str(workspace["root"]), "--out", str(out)]) == 0
    first = json.loads(out.read_text())
    assert len(first["sequences"]) == 6
    assert first["sequences"][0]["identity"] == "id00"
    assert main(["ingest", str(workspace["root"]), "--out", str(out)]) == 0
    assert json.loads(out.read_text()) == first


def test_ingest_missing_root_exits_2_and_names_path(workspace, capsys):
    missing = workspace["base"] / "no_such_root"
    assert main(["ingest", str(missing), "--out", str(workspace["base"] / "x.json")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_ingest_empty_root_exits_nonzero(workspace, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["ingest", str(empty), "--out", str(tmp_path / "index.json")]) == 1


def test_every_command_prints_config_hash(workspace, capsys):
    main(["ingest", str(workspace["root"]), "--out", str(workspace["base"] / "i.json")])
    out = capsys.readouterr().out
    assert re.search(r"config sha256: [0-9a-f]{64}", out)


def test_meta_train_print_config_resolves_and_exits_zero(workspace, capsys):
    assert main(["meta-train", "--config", str(workspace["config"]), "--print-config"]) == 0
    out = capsys.readouterr().out
    assert "[network]" in out and "resolution = 32" in out
    assert "config sha256:" in out


def test_meta_train_unknown_config_key_exits_2_with_key_name(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[training]\nlearning_rate_typo = 1\n")
    assert main(["meta-train", "--config", str(bad), "--print-config"]) == 2
    assert "learning_rate_typo" in capsys.readouterr().err


def test_meta_train_zero_steps_writes_initial_checkpoint(workspace, tmp_path):
    out = tmp_path / "zero"
    assert main([
        "meta-train", "--config", str(workspace["config"]),
        "--out", str(out), "--max-steps", "0",
    ]) == 0
    assert (out / "ckpt_000000.npz").exists()


def test_meta_train_ff_variant_logs_zero_match_loss(workspace, tmp_path):
    out = tmp_path / "ff"
    assert main([
        "meta-train", "--config", str(workspace["config"]),
        "--out", str(out), "--variant", "ff", "--max-steps", "2",
    ]) == 0
    rows = (out / "metrics.csv").read_text().splitlines()
    header = rows[0].split(",")
    mch = header.index("l_mch")
    assert all(float(r.split(",")[mch]) == 0.0 for r in rows[1:])
    assert (out / "loss_curves.png").exists()


def test_personalize_feed_forward_and_finetuned(workspace, tmp_path):
    seq_dir = workspace["root"] / "id00__take0"
    ff_model = tmp_path / "ff.npz"
    assert main([
        "personalize", "--checkpoint", str(workspace["ckpt"]), "--frames", str(seq_dir),
        "--t", "4", "--epochs", "0", "--out", str(ff_model),
    ]) == 0
    assert ff_model.exists()
    ft_model = tmp_path / "ft.npz"
    assert main([
        "personalize", "--checkpoint", str(workspace["ckpt"]), "--frames", str(seq_dir),
        "--t", "4", "--epochs", "1", "--no-adv", "--out", str(ft_model),
    ]) == 0
    assert ft_model.exists()


def test_personalize_too_few_frames_exits_1(workspace, tmp_path, capsys):
    seq_dir = workspace["root"] / "id00__take0"
    assert main([
        "personalize", "--checkpoint", str(workspace["ckpt"]), "--frames", str(seq_dir),
        "--t", "99", "--epochs", "0", "--out", str(tmp_path / "x.npz"),
    ]) == 1


def test_synthesize_writes_frames_and_contact_sheet(workspace, tmp_path):
    seq_dir = workspace["root"] / "id01__take0"
    model = tmp_path / "m.npz"
    assert main([
        "personalize", "--checkpoint", str(workspace["ckpt"]), "--frames", str(seq_dir),
        "--t", "2", "--epochs", "0", "--out", str(model),
    ]) == 0
    out = tmp_path / "synth"
    assert main([
        "synthesize", "--model", str(model),
        "--landmarks", str(workspace["root"] / "id01__take1"), "--out", str(out),
    ]) == 0
    frames = sorted(out.glob("frame_*.png"))
    assert len(frames) == 8
    assert (out / "contact_sheet.png").exists()


def test_puppeteer_drive_mode(workspace, tmp_path):
    seq_dir = workspace["root"] / "id02__take0"
    model = tmp_path / "m.npz"
    main([
        "personalize", "--checkpoint", str(workspace["ckpt"]), "--frames", str(seq_dir),
        "--t", "2", "--epochs", "0", "--out", str(model),
    ])
    out = tmp_path / "pup"
    assert main([
        "puppeteer", "--model", str(model),
        "--driver", str(workspace["root"] / "id00__take1"), "--out", str(out),
    ]) == 0
    assert len(list(out.glob("frame_*.png"))) == 8


def test_puppeteer_rank_mode(workspace, tmp_path, capsys):
    out = tmp_path / "rank"
    assert main([
        "puppeteer", "--rank",
        "--checkpoint", str(workspace["ckpt"]),
        "--still", str(workspace["root"] / "id00__take0"),
        "--candidates", str(workspace["root"]),
        "--epochs", "0", "--out", str(out),
    ]) == 0
    ranking = (out / "ranking.csv").read_text().splitlines()
    assert ranking[0] == "rank,candidate,name,csim"
    assert len(ranking) == 7  # 6 candidates + header
    scores = [float(line.split(",")[3]) for line in ranking[1:]]
    assert scores == sorted(scores, reverse=True)


def test_puppeteer_missing_flags_exit_2(workspace):
    assert main(["puppeteer", "--rank", "--out", "x"]) == 2
    assert main(["puppeteer", "--out", "x"]) == 2


def test_evaluate_self_reenactment(workspace, tmp_path, capsys):
    out = tmp_path / "eval"
    assert main([
        "evaluate", "--protocol", "self-reenactment",
        "--checkpoint", str(workspace["ckpt"]), "--data", str(workspace["root"]),
        "--t", "2", "--holdout", "3", "--videos", "4", "--epochs", "0",
        "--out", str(out),
    ]) == 0
    assert (out / "metrics.csv").exists()
    assert (out / "metrics.json").exists()
    assert (out / "metrics.png").exists()
    report = json.loads((out / "metrics.json").read_text())
    aggregations = {r["aggregation"] for r in report["rows"]}
    assert aggregations == {"frame_mean", "video_mean"}


def test_evaluate_triplets(workspace, tmp_path):
    out = tmp_path / "trip"
    assert main([
        "evaluate", "--protocol", "triplets",
        "--checkpoint", str(workspace["ckpt"]), "--data", str(workspace["root"]),
        "--t", "2", "--epochs", "0", "--n-triplets", "6", "--seed", "5",
        "--out", str(out),
    ]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    answers = json.loads((out / "answers.json").read_text())
    assert len(manifest["triplets"]) == 6
    assert set(answers) == {str(i) for i in range(6)}
    assert "fake" not in (out / "manifest.json").read_text().lower()


def test_bench_time(workspace, tmp_path, capsys):
    out = tmp_path / "bench"
    assert main([
        "bench-time", "--checkpoint", str(workspace["ckpt"]), "--data", str(workspace["root"]),
        "--t", "1,2", "--epochs", "0", "--reps", "20", "--out", str(out),
    ]) == 0
    text = (out / "timings.csv").read_text()
    assert "few_shot_learning" in text and "inference_per_frame" in text
    assert (out / "timings.png").exists()


def test_determinism_same_seed_same_hash(workspace, capsys):
    main(["meta-train", "--config", str(workspace["config"]), "--print-config"])
    first = re.search(r"config sha256: ([0-9a-f]+)", capsys.readouterr().out).group(1)
    main(["meta-train", "--config", str(workspace["config"]), "--print-config"])
    second = re.search(r"config sha256: ([0-9a-f]+)", capsys.readouterr().out).group(1)
    assert first == second


def test_missing_checkpoint_exits_1(workspace, tmp_path):
    assert main([
        "personalize", "--checkpoint", str(tmp_path / "nope.npz"),
        "--frames", str(workspace["root"] / "id00__take0"),
        "--t", "1", "--epochs", "0", "--out", str(tmp_path / "x.npz"),
    ]) == 1
