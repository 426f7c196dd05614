"""Operator surface: data synthesis, training, generation, evaluation,
cache benchmarking, and the oracle-equivalence self-test.

Every subcommand is deterministic given --seed and writes the fully resolved
configuration next to its outputs. Exit codes: 0 success, 2 configuration or
contract error, 3 I/O error, 4 numeric abort, 5 self-test failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import torch

from . import metrics as metrics_mod
from .checkpoint import load_model, save_checkpoint
from .data import VideoDataset, build_corpus, read_video, write_video
from .errors import ConfigurationError, ContractError, NumericsError
from .inference import InferenceConfig, bench_cache, generate
from .model import CausalVideoModel, ModelConfig
from .schedule import make_schedule
from .selftest import run_selftest
from .training import TrainConfig, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_SELFTEST = 5


@dataclass(frozen=True)
class RunConfig:
    """Flat, fully defaulted view of every knob the subcommands share.

    Values from a key=value config file fill in only where the command line
    left a flag unset.
    """

    # model
    num_blocks: int = 4
    hidden_dim: int = 64
    num_heads: int = 4
    head_dim: int = 16
    patch_size: int = 4
    max_frames: int = 49
    latent_size: int = 16
    latent_channels: int = 3
    caption_vocab_size: int = 64
    caption_len: int = 3
    sub_prompt_len: int = 2
    causal_temporal: bool = True
    # diffusion
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ddim_steps: int = 100
    # training
    seq_len: int = 33
    chunk_len: int = 16
    batch_size: int = 8
    total_steps: int = 5000
    learning_rate: float = 2e-5
    weight_decay: float = 0.01
    caption_dropout: float = 0.1
    vlb_weight: float = 1.0
    frame_interval: int = 3
    checkpoint_interval: int = 1000
    # inference
    cfg_scale: float = 7.5
    num_chunks: int = 6
    use_cache: bool = True
    # data synthesis
    num_clips: int = 200
    scene_frames: int = 120
    # misc
    seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            num_blocks=self.num_blocks,
            hidden_dim=self.hidden_dim,
            num_heads=self.num_heads,
            head_dim=self.head_dim,
            patch_size=self.patch_size,
            max_frames=self.max_frames,
            latent_shape=(self.latent_size, self.latent_size, self.latent_channels),
            caption_vocab_size=self.caption_vocab_size,
            caption_len=self.caption_len,
            sub_prompt_len=self.sub_prompt_len,
            causal_temporal=self.causal_temporal,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            chunk_len=self.chunk_len,
            seq_len=self.seq_len,
            batch_size=self.batch_size,
            total_steps=self.total_steps,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            caption_dropout=self.caption_dropout,
            vlb_weight=self.vlb_weight,
            frame_interval=self.frame_interval,
            checkpoint_interval=self.checkpoint_interval,
            seed=self.seed,
        )

    def schedule(self):
        # Training never walks the DDIM sub-schedule; keep it valid regardless.
        return make_schedule(
            self.diffusion_steps, self.beta_start, self.beta_end,
            min(self.ddim_steps, self.diffusion_steps),
        )


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigurationError(f"field {name} expects a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def load_config_file(path: str | Path) -> dict:
    """Parse flat key=value lines; '#' starts a comment."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigurationError(f"cannot read config file {path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigurationError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Command line wins; the file fills in only flags that were left unset."""
    file_values = load_config_file(args.config) if args.config else {}
    merged = dict(file_values)
    for name in _FIELD_TYPES:
        cli_value = getattr(args, name, None)
        if cli_value is not None:
            merged[name] = cli_value
    try:
        return RunConfig(**merged)
    except TypeError as e:
        raise ConfigurationError(str(e)) from e


def write_snapshot(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [
        f"{f.name}={getattr(cfg, f.name)}" for f in fields(RunConfig)
    ]
    (out_dir / "resolved_config.txt").write_text("\n".join(lines) + "\n")


def _add_config_flags(p: argparse.ArgumentParser, names: list[str]) -> None:
    for name in names:
        kind = _FIELD_TYPES[name]
        flag = "--" + name.replace("_", "-")
        if kind == "bool":
            p.add_argument(flag, type=lambda s: _parse_value(name, s), default=None)
        elif kind == "int":
            p.add_argument(flag, type=int, default=None)
        elif kind == "float":
            p.add_argument(flag, type=float, default=None)
        else:
            p.add_argument(flag, default=None)


def cmd_make_data(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    write_snapshot(cfg, out)
    manifest = build_corpus(
        out, cfg.num_clips, cfg.seed, canvas=cfg.latent_size,
        num_frames=cfg.scene_frames,
    )
    print(f"wrote {cfg.num_clips} clips; manifest at {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    write_snapshot(cfg, out)
    manifest = Path(args.data)
    if manifest.is_dir():
        manifest = manifest / "manifest.jsonl"
    if not manifest.exists():
        raise ConfigurationError(f"dataset manifest not found: {manifest}")
    dataset = VideoDataset(manifest)

    start_step = 0
    if args.resume:
        model, start_step = load_model(args.resume, dtype=torch.float32)
    else:
        torch.manual_seed(cfg.seed)
        model = CausalVideoModel(cfg.model_config())
    schedule = cfg.schedule()
    result = train(model, dataset, schedule, cfg.train_config(), out,
                   start_step=start_step)
    print(
        f"trained steps {start_step}..{result.final_step}; "
        f"checkpoint at {result.checkpoint_path}; metrics at {result.metrics_path}"
    )
    return EXIT_OK


def _parse_caption(raw: str | None, caption_len: int) -> torch.Tensor:
    if not raw:
        return torch.zeros(caption_len, dtype=torch.long)
    ids = [int(tok) for tok in raw.split(",")]
    if len(ids) != caption_len:
        raise ConfigurationError(
            f"caption needs {caption_len} comma-separated token ids, got {len(ids)}"
        )
    return torch.tensor(ids, dtype=torch.long)


def _export_frames(video: torch.Tensor, out_dir: Path) -> None:
    from PIL import Image

    out_dir.mkdir(parents=True, exist_ok=True)
    arr = ((video.clamp(-1, 1) + 1.0) * 127.5).to(torch.uint8).numpy()
    images = [Image.fromarray(frame) for frame in arr]
    for i, img in enumerate(images):
        img.save(out_dir / f"frame_{i:04d}.png")
    images[0].save(
        out_dir / "preview.gif", save_all=True, append_images=images[1:],
        duration=120, loop=0,
    )


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    write_snapshot(cfg, out)
    model, _ = load_model(args.checkpoint, dtype=torch.float64)
    schedule = make_schedule(
        cfg.diffusion_steps, cfg.beta_start, cfg.beta_end, cfg.ddim_steps
    )
    source = read_video(args.first_frame)
    first = source[args.frame_index].to(torch.float64)
    caption = _parse_caption(args.caption, model.config.caption_len)
    icfg = InferenceConfig(
        chunk_len=cfg.chunk_len,
        cfg_scale=cfg.cfg_scale,
        seed=cfg.seed,
        use_cache=cfg.use_cache and not args.no_cache,
    )
    with torch.no_grad():
        video = generate(first, caption, cfg.num_chunks, model, schedule, icfg)
    out_path = out / "generated.vid"
    write_video(out_path, video)
    generated = cfg.num_chunks * cfg.chunk_len
    print(
        f"wrote {out_path}: {video.shape[0]} frames including the conditioning "
        f"frame ({generated} generated)"
    )
    if args.export_png:
        _export_frames(video.float(), out / "frames")
        print(f"exported PNG frames and preview.gif under {out / 'frames'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    write_snapshot(cfg, out)
    video_dir = Path(args.videos)
    paths = sorted(video_dir.glob("*.vid"))
    if not paths:
        raise ConfigurationError(f"no .vid files under {video_dir}")
    videos = [read_video(p) for p in paths]
    offset = args.first_frame_offset

    lines = []
    deltas = []
    for path, video in zip(paths, videos):
        curve = metrics_mod.frame_differencing(video)
        delta = metrics_mod.delta_edge_fd(curve, cfg.chunk_len, offset)
        deltas.append(delta)
        lines.append(f"metric=delta_edge_fd video={path.name} value={delta:.8f}")
        if args.export_fd:
            table = "\n".join(
                f"{i}\t{float(v):.8f}" for i, v in enumerate(curve.values)
            )
            (out / f"fd_{path.stem}.tsv").write_text(table + "\n")
    lines.append(
        f"metric=delta_edge_fd_mean value={sum(deltas) / len(deltas):.8f}"
    )
    if len(videos) >= 2:
        scores = metrics_mod.step_fvd(
            videos, cfg.chunk_len, first_frame_offset=offset, seed=cfg.seed
        )
        for chunk_index in sorted(scores):
            lines.append(
                f"metric=step_fvd chunk={chunk_index} value={scores[chunk_index]:.8f}"
            )
    else:
        lines.append("metric=step_fvd note=population-of-1-skipped")

    report = out / "report.txt"
    report.write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"report written to {report}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    write_snapshot(cfg, out)
    torch.manual_seed(cfg.seed)
    model_cfg = dataclasses.replace(
        cfg.model_config(), sub_prompt_len=0, max_frames=cfg.max_frames
    )
    model = CausalVideoModel(model_cfg).float().eval()
    schedule = make_schedule(
        cfg.diffusion_steps, cfg.beta_start, cfg.beta_end, args.bench_ddim_steps
    )
    with torch.no_grad():
        report = bench_cache(
            model, schedule, cfg.num_chunks, cfg.chunk_len, cfg.max_frames,
            seed=cfg.seed, repeats=args.repeats,
        )
    text = "\n".join(report.lines())
    (out / "bench.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_selftest(args) -> int:
    cfg = resolve_config(args)
    results = run_selftest(cfg.seed)
    all_ok = True
    for name, ok, detail in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        all_ok &= ok
    return EXIT_OK if all_ok else EXIT_SELFTEST


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="arvid",
        description="Desk-scale autoregressive causal video diffusion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_names):
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--out", default="out", help="output directory")
        _add_config_flags(p, ["seed"] + config_names)

    p = sub.add_parser("make-data", help="synthesize a deterministic corpus")
    common(p, ["num_clips", "scene_frames", "latent_size"])
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="train a model on a synthetic corpus")
    common(p, [
        "num_blocks", "hidden_dim", "num_heads", "head_dim", "patch_size",
        "max_frames", "latent_size", "latent_channels", "sub_prompt_len",
        "causal_temporal", "diffusion_steps", "beta_start", "beta_end",
        "seq_len", "chunk_len", "batch_size", "total_steps", "learning_rate",
        "weight_decay", "caption_dropout", "vlb_weight", "frame_interval",
        "checkpoint_interval",
    ])
    p.add_argument("--data", required=True, help="dataset dir or manifest path")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="autoregress a video from a first frame")
    common(p, ["chunk_len", "num_chunks", "cfg_scale", "max_frames",
               "diffusion_steps", "beta_start", "beta_end", "ddim_steps"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--first-frame", required=True,
                   help="video container supplying the conditioning frame")
    p.add_argument("--frame-index", type=int, default=0)
    p.add_argument("--caption", default=None, help="comma-separated token ids")
    p.add_argument("--no-cache", action="store_true",
                   help="full-prefix recomputation (oracle mode)")
    p.add_argument("--export-png", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="consistency metrics over generated videos")
    common(p, ["chunk_len"])
    p.add_argument("--videos", required=True, help="directory of .vid files")
    p.add_argument("--first-frame-offset", type=int, default=1)
    p.add_argument("--export-fd", action="store_true",
                   help="write per-video two-column differencing tables")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="kv-cache compute and wall-time benchmark")
    common(p, ["num_blocks", "hidden_dim", "num_heads", "head_dim", "patch_size",
               "latent_size", "latent_channels", "sub_prompt_len", "chunk_len",
               "num_chunks", "max_frames", "diffusion_steps", "beta_start",
               "beta_end"])
    p.add_argument("--bench-ddim-steps", type=int, default=5)
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("selftest", help="oracle-equivalence and invariant suites")
    common(p, [])
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, ContractError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericsError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
