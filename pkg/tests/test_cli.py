import json

import pytest
import torch

from arvid import cli
from arvid.data import read_video, sample_clip, write_video
from arvid.errors import NumericsError
from arvid.metrics import FeatureExtractor, delta_edge_fd, frame_differencing, step_fvd


TINY_MODEL_FLAGS = [
    "--num-blocks", "1", "--hidden-dim", "16", "--num-heads", "4",
    "--head-dim", "4", "--patch-size", "4", "--latent-size", "8",
    "--max-frames", "8", "--sub-prompt-len", "1", "--diffusion-steps", "40",
]
TINY_TRAIN_FLAGS = TINY_MODEL_FLAGS + [
    "--seq-len", "5", "--chunk-len", "2", "--batch-size", "2",
    "--learning-rate", "1e-3", "--frame-interval", "2",
]


def make_corpus(tmp_path, name="data", count=6):
    out = tmp_path / name
    code = cli.main([
        "make-data", "--out", str(out), "--num-clips", str(count),
        "--scene-frames", "24", "--latent-size", "8", "--seed", "3",
    ])
    assert code == 0
    return out


def test_make_data_deterministic_and_counted(tmp_path):
    a = make_corpus(tmp_path, "a", count=5)
    b = make_corpus(tmp_path, "b", count=5)
    assert (a / "manifest.jsonl").read_text() == (b / "manifest.jsonl").read_text()
    records = [json.loads(l) for l in (a / "manifest.jsonl").read_text().splitlines()]
    assert len(records) == 5
    assert (a / "resolved_config.txt").exists()


def test_make_data_clips_pass_length_filter(tmp_path):
    out = make_corpus(tmp_path)
    records = [json.loads(l) for l in (out / "manifest.jsonl").read_text().splitlines()]
    rng = torch.Generator().manual_seed(0)
    for rec in records:
        video = read_video(out / rec["path"])
        assert sample_clip(video, 5, 2, rng) is not None


def train_tiny(tmp_path, corpus, steps=6, out_name="run", resume=None, seed="4"):
    out = tmp_path / out_name
    argv = ["train", "--data", str(corpus), "--out", str(out),
            "--total-steps", str(steps), "--checkpoint-interval", "100",
            "--seed", seed] + TINY_TRAIN_FLAGS
    if resume:
        argv += ["--resume", str(resume)]
    assert cli.main(argv) == 0
    return out


def test_train_writes_checkpoint_and_parseable_log(tmp_path):
    corpus = make_corpus(tmp_path)
    out = train_tiny(tmp_path, corpus, steps=4)
    assert (out / "checkpoint.avck").exists()
    lines = (out / "metrics.log").read_text().strip().splitlines()
    assert len(lines) == 4
    for line in lines:
        fields = dict(part.split("=") for part in line.split())
        assert set(fields) == {"step", "loss_simple", "loss_vlb", "wall_ms"}
        float(fields["loss_simple"])


def test_train_resume_continues_counter(tmp_path):
    corpus = make_corpus(tmp_path)
    out = train_tiny(tmp_path, corpus, steps=3)
    out2 = train_tiny(tmp_path, corpus, steps=5, out_name="run2",
                      resume=out / "checkpoint.avck")
    from arvid.checkpoint import load_checkpoint

    _, _, step = load_checkpoint(out2 / "checkpoint.avck")
    assert step == 5
    lines = (out2 / "metrics.log").read_text().strip().splitlines()
    assert lines[0].startswith("step=3")


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("cli")
    corpus = make_corpus(tmp_path)
    run = train_tiny(tmp_path, corpus, steps=4)
    return tmp_path, corpus, run / "checkpoint.avck"


def generate_args(checkpoint, corpus, out, extra=()):
    return [
        "generate", "--checkpoint", str(checkpoint),
        "--first-frame", str(corpus / "clip_00000.vid"),
        "--out", str(out), "--caption", "1,3,11", "--seed", "5",
        "--chunk-len", "4", "--num-chunks", "2", "--ddim-steps", "4",
        "--cfg-scale", "2.0", "--diffusion-steps", "40",
    ] + list(extra)


def test_generate_frame_count_and_determinism(trained):
    tmp_path, corpus, ckpt = trained
    out1 = tmp_path / "gen1"
    out2 = tmp_path / "gen2"
    assert cli.main(generate_args(ckpt, corpus, out1)) == 0
    assert cli.main(generate_args(ckpt, corpus, out2)) == 0
    video = read_video(out1 / "generated.vid")
    assert video.shape[0] == 9  # 1 conditioning + 2 chunks of 4
    assert (out1 / "generated.vid").read_bytes() == (out2 / "generated.vid").read_bytes()


def test_generate_no_cache_oracle(trained):
    tmp_path, corpus, ckpt = trained
    out_c = tmp_path / "gen_cache"
    out_n = tmp_path / "gen_nocache"
    assert cli.main(generate_args(ckpt, corpus, out_c)) == 0
    assert cli.main(generate_args(ckpt, corpus, out_n, extra=["--no-cache"])) == 0
    a = read_video(out_c / "generated.vid")
    b = read_video(out_n / "generated.vid")
    assert float((a - b).abs().max()) <= 1e-4


def test_generate_png_export(trained):
    tmp_path, corpus, ckpt = trained
    out = tmp_path / "gen_png"
    assert cli.main(generate_args(ckpt, corpus, out, extra=["--export-png"])) == 0
    frames = sorted((out / "frames").glob("frame_*.png"))
    assert len(frames) == 9
    assert (out / "frames" / "preview.gif").exists()


def _write_chunked_population(dirpath, count=4, spike=0.0):
    dirpath.mkdir(parents=True, exist_ok=True)
    gen = torch.Generator().manual_seed(6)
    for i in range(count):
        chunk = torch.rand(4, 8, 8, 3, generator=gen) * 0.5 - 0.25
        frames = [torch.zeros(1, 8, 8, 3), chunk, chunk.clone(), chunk.clone()]
        video = torch.cat(frames)
        if spike:
            video[5:] += spike
        write_video(dirpath / f"clip_{i:03d}.vid", video)


def test_eval_constant_videos(tmp_path):
    vid_dir = tmp_path / "videos"
    vid_dir.mkdir()
    for i in range(3):
        write_video(vid_dir / f"v{i}.vid", torch.full((13, 8, 8, 3), 0.1 * i))
    out = tmp_path / "eval"
    code = cli.main([
        "eval", "--videos", str(vid_dir), "--out", str(out),
        "--chunk-len", "4", "--first-frame-offset", "1", "--export-fd",
    ])
    assert code == 0
    report = (out / "report.txt").read_text()
    for line in report.splitlines():
        fields = dict(part.split("=") for part in line.split())
        if fields.get("metric") in ("delta_edge_fd", "delta_edge_fd_mean", "step_fvd"):
            if "value" in fields:
                assert abs(float(fields["value"])) <= 1e-6
    assert (out / "fd_v0.tsv").exists()


def test_eval_matches_direct_library_calls(tmp_path):
    vid_dir = tmp_path / "videos"
    _write_chunked_population(vid_dir)
    out = tmp_path / "eval"
    assert cli.main([
        "eval", "--videos", str(vid_dir), "--out", str(out),
        "--chunk-len", "4", "--first-frame-offset", "1", "--seed", "7",
    ]) == 0
    report = {}
    for line in (out / "report.txt").read_text().splitlines():
        fields = dict(part.split("=") for part in line.split())
        key = (fields["metric"], fields.get("video") or fields.get("chunk"))
        if "value" in fields:
            report[key] = float(fields["value"])

    videos = [read_video(p) for p in sorted(vid_dir.glob("*.vid"))]
    direct = delta_edge_fd(frame_differencing(videos[0]), 4, 1)
    assert report[("delta_edge_fd", "clip_000.vid")] == pytest.approx(direct, abs=1e-8)
    scores = step_fvd(videos, 4, first_frame_offset=1, seed=7)
    assert report[("step_fvd", "2")] == pytest.approx(scores[2], abs=1e-8)
    assert report[("step_fvd", "3")] == pytest.approx(scores[3], abs=1e-8)


def test_bench_report_columns(tmp_path):
    out = tmp_path / "bench"
    code = cli.main([
        "bench", "--out", str(out), "--chunk-len", "8", "--num-chunks", "3",
        "--max-frames", "16", "--bench-ddim-steps", "2", "--repeats", "3",
        "--seed", "8", "--num-blocks", "2", "--hidden-dim", "32",
        "--num-heads", "4", "--head-dim", "8", "--patch-size", "4",
        "--latent-size", "16", "--diffusion-steps", "40",
    ])
    assert code == 0
    text = (out / "bench.txt").read_text()
    n = 8
    ks = [min(i * n, 16) for i in range(3)]
    for i, k in enumerate(ks):
        assert f"chunk={i} prefix={k} score_rows_cached={n * (k + n)} " in text
        assert f"score_rows_uncached={(k + n) ** 2}" in text
    assert f"score_rows_cached={sum(n * (k + n) for k in ks)}" in text
    # first chunk has no prefix: identical score-row counts
    assert "chunk=0 prefix=0 score_rows_cached=64 score_rows_uncached=64" in text
    chunk_lines = [l for l in text.splitlines() if l.startswith("chunk=")]
    later = dict(part.split("=") for part in chunk_lines[-1].split())
    assert float(later["wall_cached_s"]) < float(later["wall_uncached_s"])


def test_selftest_passes(tmp_path):
    assert cli.main(["selftest", "--seed", "0"]) == 0


def test_selftest_failure_exit_code(monkeypatch):
    monkeypatch.setattr(cli, "run_selftest", lambda seed: [("fake", False, "boom")])
    assert cli.main(["selftest"]) == cli.EXIT_SELFTEST


def test_exit_code_config_error(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("not_a_real_key=1\n")
    assert cli.main(["selftest", "--config", str(bad)]) == cli.EXIT_CONFIG


def test_exit_code_io_error(tmp_path):
    code = cli.main([
        "generate", "--checkpoint", str(tmp_path / "missing.avck"),
        "--first-frame", str(tmp_path / "missing.vid"), "--out", str(tmp_path / "g"),
    ])
    assert code == cli.EXIT_IO


def test_exit_code_numeric_abort(monkeypatch):
    def boom(seed):
        raise NumericsError("synthetic abort")

    monkeypatch.setattr(cli, "run_selftest", boom)
    assert cli.main(["selftest"]) == cli.EXIT_NUMERIC


def test_config_file_fills_unset_flags(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("num_clips=3\nscene_frames=24\nlatent_size=8\nseed=9\n")
    out = tmp_path / "data"
    assert cli.main(["make-data", "--config", str(cfg_file), "--out", str(out),
                     "--num-clips", "2"]) == 0
    records = (out / "manifest.jsonl").read_text().strip().splitlines()
    assert len(records) == 2  # command line wins over the file
    snapshot = (out / "resolved_config.txt").read_text()
    assert "scene_frames=24" in snapshot  # file filled the unset flag
    assert "seed=9" in snapshot
