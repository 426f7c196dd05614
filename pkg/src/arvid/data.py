"""Synthetic video corpus: bouncing colored shapes with caption labels.

Scenes are fully deterministic: frame f is a pure function of the scene
spec (elastic bounces via coordinate reflection), so rigid-translation and
constant-video identities hold exactly. Captions encode (shape, color,
initial direction) over a small vocabulary with id 0 reserved for the null
caption.

The on-disk container is bit-exact: a fixed header followed by raw
little-endian float32 frames.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigurationError, ContractError

SHAPE_KINDS = ("square", "circle")

# Fixed palette in [-1, 1]; index is the caption color token payload.
PALETTE = torch.tensor(
    [
        [1.0, -1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
        [1.0, 1.0, -1.0],
        [1.0, -1.0, 1.0],
        [-1.0, 1.0, 1.0],
        [1.0, 1.0, 1.0],
        [1.0, 0.2, -0.6],
    ]
)

# Caption vocabulary layout: 0 null, then shapes, colors, directions.
_SHAPE_BASE = 1
_COLOR_BASE = _SHAPE_BASE + len(SHAPE_KINDS)
_DIR_BASE = _COLOR_BASE + PALETTE.shape[0]
VOCAB_SIZE = _DIR_BASE + 9
CAPTION_LEN = 3

VIDEO_MAGIC = b"AVID"
VIDEO_VERSION = 1
_ENCODING_F32 = 0


@dataclass(frozen=True)
class SceneSpec:
    """One moving shape: kind, palette color, integer start position and
    velocity in pixels/frame, canvas edge, total frames."""

    kind: str
    color: int
    position: tuple[int, int]
    velocity: tuple[int, int]
    canvas: int = 16
    num_frames: int = 60
    size: int = 6

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ConfigurationError(f"unknown shape kind {self.kind!r}")
        if not 0 <= self.color < PALETTE.shape[0]:
            raise ConfigurationError(f"color index {self.color} outside palette")
        if self.size > self.canvas:
            raise ConfigurationError(
                f"shape size {self.size} exceeds canvas {self.canvas}"
            )
        limit = self.canvas - self.size
        for axis, p in zip("yx", self.position):
            if not 0 <= p <= limit:
                raise ConfigurationError(
                    f"position {axis}={p} outside [0, {limit}]"
                )


def _reflect(value: int, limit: int) -> int:
    """Fold an unbounded coordinate into [0, limit] by elastic reflection."""
    if limit == 0:
        return 0
    m = value % (2 * limit)
    return m if m <= limit else 2 * limit - m


def shape_position(spec: SceneSpec, frame: int) -> tuple[int, int]:
    """Top-left corner of the shape at a frame; pure in (spec, frame)."""
    limit = spec.canvas - spec.size
    y = _reflect(spec.position[0] + spec.velocity[0] * frame, limit)
    x = _reflect(spec.position[1] + spec.velocity[1] * frame, limit)
    return y, x


def _shape_mask(spec: SceneSpec, y: int, x: int) -> Tensor:
    canvas = spec.canvas
    yy = torch.arange(canvas).unsqueeze(1)
    xx = torch.arange(canvas).unsqueeze(0)
    if spec.kind == "square":
        return (yy >= y) & (yy < y + spec.size) & (xx >= x) & (xx < x + spec.size)
    r = spec.size / 2.0
    cy, cx = y + r - 0.5, x + r - 0.5
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def synth_video(spec: SceneSpec, seed: int = 0) -> tuple[Tensor, Tensor]:
    """Render the scene; returns (video (N, canvas, canvas, 3) in [-1, 1], caption).

    The seed picks a per-video brightness factor for the shape color; the
    trajectory itself is fully determined by the spec.
    """
    rng = torch.Generator().manual_seed(seed)
    brightness = 0.8 + 0.2 * torch.rand((), generator=rng).item()
    color = (PALETTE[spec.color] * brightness).clamp(-1.0, 1.0)

    frames = torch.full((spec.num_frames, spec.canvas, spec.canvas, 3), -1.0)
    for f in range(spec.num_frames):
        y, x = shape_position(spec, f)
        mask = _shape_mask(spec, y, x)
        frames[f][mask] = color
    return frames, encode_caption(spec)


def _direction_index(velocity: tuple[int, int]) -> int:
    sy = (velocity[0] > 0) - (velocity[0] < 0)
    sx = (velocity[1] > 0) - (velocity[1] < 0)
    return (sy + 1) * 3 + (sx + 1)


def encode_caption(spec: SceneSpec) -> Tensor:
    """Token ids for (shape, color, initial direction); never uses id 0."""
    return torch.tensor(
        [
            _SHAPE_BASE + SHAPE_KINDS.index(spec.kind),
            _COLOR_BASE + spec.color,
            _DIR_BASE + _direction_index(spec.velocity),
        ],
        dtype=torch.long,
    )


def decode_caption(tokens: Tensor) -> tuple[str, int, tuple[int, int]]:
    """Inverse of encode_caption; returns (kind, color index, direction signs)."""
    shape_tok, color_tok, dir_tok = (int(t) for t in tokens[:3])
    if not _SHAPE_BASE <= shape_tok < _COLOR_BASE:
        raise ContractError(f"token {shape_tok} is not a shape token")
    if not _COLOR_BASE <= color_tok < _DIR_BASE:
        raise ContractError(f"token {color_tok} is not a color token")
    if not _DIR_BASE <= dir_tok < _DIR_BASE + 9:
        raise ContractError(f"token {dir_tok} is not a direction token")
    d = dir_tok - _DIR_BASE
    return (
        SHAPE_KINDS[shape_tok - _SHAPE_BASE],
        color_tok - _COLOR_BASE,
        (d // 3 - 1, d % 3 - 1),
    )


def random_scene(rng: torch.Generator, canvas: int = 16, num_frames: int = 60,
                 size: int = 6) -> SceneSpec:
    def draw(high: int) -> int:
        return int(torch.randint(high, (1,), generator=rng))

    limit = canvas - size
    return SceneSpec(
        kind=SHAPE_KINDS[draw(len(SHAPE_KINDS))],
        color=draw(PALETTE.shape[0]),
        position=(draw(limit + 1), draw(limit + 1)),
        velocity=(draw(5) - 2, draw(5) - 2),
        canvas=canvas,
        num_frames=num_frames,
        size=size,
    )


def sample_clip(video: Tensor, num_frames: int, interval: int,
                rng: torch.Generator) -> Tensor | None:
    """Uniform-random clip of every interval-th frame, exactly num_frames long.

    Sources shorter than num_frames * interval are filtered: returns None.
    """
    if interval < 1:
        raise ConfigurationError(f"interval must be >= 1, got {interval}")
    source = video.shape[0]
    if source < num_frames * interval:
        return None
    span = (num_frames - 1) * interval
    start = int(torch.randint(source - span, (1,), generator=rng))
    return video[start : start + span + 1 : interval]


def write_video(path: str | Path, video: Tensor) -> None:
    """Container: magic, version, N/H/W/C, encoding tag, raw little-endian f32."""
    if video.ndim != 4:
        raise ContractError(f"video must be (N, H, W, C), got {tuple(video.shape)}")
    arr = video.detach().cpu().to(torch.float32).numpy().astype("<f4")
    n, h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(VIDEO_MAGIC)
        f.write(struct.pack("<IIIIII", VIDEO_VERSION, n, h, w, c, _ENCODING_F32))
        f.write(arr.tobytes())


def read_video(path: str | Path) -> Tensor:
    with open(path, "rb") as f:
        head = f.read(28)
        if len(head) < 28 or head[:4] != VIDEO_MAGIC:
            raise ContractError(f"not a video container: {path}")
        version, n, h, w, c, encoding = struct.unpack("<IIIIII", head[4:28])
        if version != VIDEO_VERSION:
            raise ContractError(f"unsupported video container version {version}")
        if encoding != _ENCODING_F32:
            raise ContractError(f"unknown value encoding tag {encoding}")
        payload = f.read()
    expected = n * h * w * c * 4
    if len(payload) < expected:
        raise ContractError(
            f"truncated video payload: expected {expected} bytes, got {len(payload)}"
        )
    arr = np.frombuffer(payload[:expected], dtype="<f4").reshape(n, h, w, c)
    return torch.from_numpy(arr.copy())


def build_corpus(out_dir: str | Path, count: int, seed: int, canvas: int = 16,
                 num_frames: int = 60) -> Path:
    """Write `count` deterministic clips plus a JSONL manifest; returns its path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = torch.Generator().manual_seed(seed)
    records = []
    for i in range(count):
        clip_seed = seed * 1_000_003 + i
        spec = random_scene(rng, canvas=canvas, num_frames=num_frames)
        video, caption = synth_video(spec, clip_seed)
        name = f"clip_{i:05d}.vid"
        write_video(out / name, video)
        records.append(
            {"path": name, "caption": caption.tolist(), "source_seed": clip_seed}
        )
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    return manifest


class VideoDataset:
    """Manifest-backed corpus held in memory; iteration order is a pure
    function of the epoch seed."""

    def __init__(self, manifest_path: str | Path):
        self.root = Path(manifest_path).parent
        self.records = []
        with open(manifest_path) as f:
            for line in f:
                line = line.strip()
                if line:
                    self.records.append(json.loads(line))
        if not self.records:
            raise ContractError(f"empty dataset manifest: {manifest_path}")
        self._videos = [read_video(self.root / r["path"]) for r in self.records]
        self._captions = [
            torch.tensor(r["caption"], dtype=torch.long) for r in self.records
        ]

    def __len__(self) -> int:
        return len(self.records)

    def video(self, index: int) -> Tensor:
        return self._videos[index]

    def caption(self, index: int) -> Tensor:
        return self._captions[index]

    def epoch_order(self, epoch_seed: int) -> list[int]:
        rng = torch.Generator().manual_seed(epoch_seed)
        return torch.randperm(len(self.records), generator=rng).tolist()
