"""Frame-as-prompt training.

A batch keeps a shared prefix of clean prompt frames at timestep 0 and
noises the remaining frames at one per-sample step. Losses are masked to
the noisy portion: mean squared noise error plus the variational-bound term
for the learned covariance. Optimization is decoupled-weight-decay AdamW.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import Tensor

from .checkpoint import save_checkpoint
from .data import VideoDataset, sample_clip
from .errors import ConfigurationError, ContractError, NumericsError
from .model import CausalVideoModel
from .schedule import NoisePrediction, Schedule, q_sample, vlb_term


@dataclass
class TrainBatch:
    z_input: Tensor     # (B, N, H, W, C) clean prompt prefix + noised rest
    timesteps: Tensor   # (B, N), 0 on prompt positions
    eps_target: Tensor  # (B, N, H, W, C)
    loss_mask: Tensor   # (B, N) binary, 1 exactly where timesteps > 0
    captions: Tensor    # (B, caption_len)
    z_clean: Tensor     # (B, N, H, W, C) originals, needed by the vlb term


@dataclass(frozen=True)
class TrainConfig:
    chunk_len: int = 16
    seq_len: int = 33
    prompt_length_choices: tuple[int, ...] | None = None
    batch_size: int = 8
    total_steps: int = 5000
    learning_rate: float = 2e-5
    weight_decay: float = 0.01
    caption_dropout: float = 0.1
    vlb_weight: float = 1.0
    frame_interval: int = 3
    checkpoint_interval: int = 1000
    seed: int = 0
    # Smoke-test support: stop once smoothed loss_simple falls below this
    # fraction of its step-0 value.
    stop_fraction: float | None = None

    def __post_init__(self):
        for name in ("chunk_len", "seq_len", "batch_size", "total_steps",
                     "frame_interval", "checkpoint_interval"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("learning_rate",):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.seq_len < self.chunk_len + 1:
            raise ConfigurationError(
                f"seq_len={self.seq_len} must be >= chunk_len+1={self.chunk_len + 1}"
            )
        if self.prompt_length_choices is not None:
            valid = prompt_length_support(self.chunk_len, self.seq_len)
            bad = [p for p in self.prompt_length_choices if p not in valid]
            if bad:
                raise ConfigurationError(
                    f"prompt_length_choices {bad} outside the valid support {valid}"
                )


def prompt_length_support(chunk_len: int, seq_len: int) -> tuple[int, ...]:
    """{1, n+1, 2n+1, ...} intersected with [1, N - n]."""
    return tuple(p for p in range(1, seq_len - chunk_len + 1, chunk_len))


def sample_prompt_length(chunk_len: int, seq_len: int, rng: torch.Generator,
                         choices: tuple[int, ...] | None = None) -> int:
    if seq_len < chunk_len + 1:
        raise ContractError(
            f"seq_len={seq_len} must be >= chunk_len+1={chunk_len + 1}"
        )
    support = choices if choices is not None else prompt_length_support(chunk_len, seq_len)
    if not support:
        raise ContractError("empty prompt-length support")
    idx = int(torch.randint(len(support), (1,), generator=rng))
    return support[idx]


def build_batch(videos: Tensor, captions: Tensor, prompt_len: int, t: Tensor,
                rng: torch.Generator, s: Schedule,
                caption_dropout: float = 0.1) -> TrainBatch:
    """Noise frames after the prompt prefix at per-sample step t.

    videos: (B, N, H, W, C) clean clips; t: (B,) steps in 1..T. Captions are
    zeroed (the null token) with the given probability per sample.
    """
    b, n = videos.shape[:2]
    if t.shape != (b,):
        raise ContractError(f"t must be shape ({b},), got {tuple(t.shape)}")
    if not 1 <= prompt_len < n:
        raise ContractError(f"prompt_len={prompt_len} must be in [1, {n - 1}]")

    eps = torch.randn(videos.shape, generator=rng, dtype=videos.dtype)
    noised = q_sample(videos, t, eps, s)

    timesteps = t.view(b, 1).expand(b, n).clone()
    timesteps[:, :prompt_len] = 0
    z_input = torch.where(
        (timesteps > 0).view(b, n, 1, 1, 1), noised, videos
    )
    mask = (timesteps > 0).to(videos.dtype)

    captions = captions.clone()
    if caption_dropout > 0:
        drop = torch.rand(b, generator=rng) < caption_dropout
        captions[drop] = 0
    return TrainBatch(
        z_input=z_input,
        timesteps=timesteps,
        eps_target=eps,
        loss_mask=mask,
        captions=captions,
        z_clean=videos,
    )


def _mask_prompt_len(mask: Tensor) -> int:
    if not torch.equal(mask, mask[:1].expand_as(mask)):
        raise ContractError("loss mask must be shared across the batch")
    zeros = int((mask[0] == 0).sum())
    if mask[0, :zeros].any() or not mask[0, zeros:].all():
        raise ContractError("loss mask must be zero exactly on a prefix")
    return zeros


def masked_simple_loss(pred: NoisePrediction, batch: TrainBatch) -> Tensor:
    """Squared noise error over masked positions, normalized by their count."""
    mask = batch.loss_mask
    count = mask.sum()
    if count == 0:
        raise ContractError("loss mask is all zero: nothing to train")
    m = mask.view(*mask.shape, 1, 1, 1)
    per_elem = (pred.eps - batch.eps_target).pow(2) * m
    elems = count * batch.eps_target[0, 0].numel()
    return per_elem.sum() / elems


def masked_vlb_loss(pred: NoisePrediction, batch: TrainBatch, s: Schedule,
                    detach_mean: bool = True) -> Tensor:
    """Variational-bound term over the masked (noisy) frames only."""
    p = _mask_prompt_len(batch.loss_mask)
    if p >= batch.loss_mask.shape[1]:
        raise ContractError("loss mask is all zero: nothing to train")
    t = batch.timesteps[:, -1]
    sub = NoisePrediction(eps=pred.eps[:, p:], v=pred.v[:, p:])
    return vlb_term(sub, batch.z_clean[:, p:], batch.z_input[:, p:], t, s,
                    detach_mean=detach_mean)


def make_optimizer(model: CausalVideoModel, learning_rate: float,
                   weight_decay: float) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(), lr=learning_rate, weight_decay=weight_decay
    )


def train_step(model: CausalVideoModel, batch: TrainBatch,
               optimizer: torch.optim.Optimizer, s: Schedule,
               vlb_weight: float = 1.0) -> dict[str, float]:
    """One combined-loss update; mutates model parameters in place.

    Raises NumericsError with a batch snapshot if the loss goes non-finite.
    """
    pred = model(batch.z_input, batch.timesteps, batch.captions)
    loss_simple = masked_simple_loss(pred, batch)
    loss_vlb = masked_vlb_loss(pred, batch, s)
    loss = loss_simple + vlb_weight * loss_vlb
    if not torch.isfinite(loss):
        raise NumericsError(
            "non-finite training loss; batch snapshot: "
            f"timesteps={batch.timesteps[:, -1].tolist()}, "
            f"captions={batch.captions.tolist()}"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return {
        "loss_simple": float(loss_simple.detach()),
        "loss_vlb": float(loss_vlb.detach()),
        "loss": float(loss.detach()),
    }


@dataclass
class TrainResult:
    steps_run: int
    final_step: int
    losses: list[dict[str, float]] = field(default_factory=list)
    checkpoint_path: Path | None = None
    metrics_path: Path | None = None


def _draw_clip(dataset: VideoDataset, index: int, seq_len: int, interval: int,
               rng: torch.Generator) -> Tensor:
    clip = sample_clip(dataset.video(index), seq_len, interval, rng)
    if clip is None:
        raise ContractError(
            f"dataset clip {index} shorter than seq_len*interval="
            f"{seq_len * interval}; filter the corpus upstream"
        )
    return clip


def train(model: CausalVideoModel, dataset: VideoDataset, s: Schedule,
          tcfg: TrainConfig, out_dir: str | Path,
          start_step: int = 0) -> TrainResult:
    """Run the training loop, logging one metrics line per step and writing
    checkpoints at the configured interval."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.log"
    ckpt_path = out / "checkpoint.avck"

    optimizer = make_optimizer(model, tcfg.learning_rate, tcfg.weight_decay)
    result = TrainResult(steps_run=0, final_step=start_step,
                         metrics_path=metrics_path)
    baseline = None
    smoothed = None

    mode = "a" if start_step > 0 else "w"
    with open(metrics_path, mode) as log:
        for step in range(start_step, tcfg.total_steps):
            t_start = time.perf_counter()
            rng = torch.Generator().manual_seed(tcfg.seed * 1_000_003 + step)
            idx = torch.randint(len(dataset), (tcfg.batch_size,), generator=rng)
            clips = torch.stack(
                [
                    _draw_clip(dataset, int(i), tcfg.seq_len, tcfg.frame_interval, rng)
                    for i in idx
                ]
            ).to(model.dtype)
            captions = torch.stack([dataset.caption(int(i)) for i in idx])
            prompt_len = sample_prompt_length(
                tcfg.chunk_len, tcfg.seq_len, rng, tcfg.prompt_length_choices
            )
            t = torch.randint(1, s.num_steps + 1, (tcfg.batch_size,), generator=rng)
            batch = build_batch(clips, captions, prompt_len, t, rng, s,
                                caption_dropout=tcfg.caption_dropout)
            losses = train_step(model, batch, optimizer, s, tcfg.vlb_weight)
            wall_ms = (time.perf_counter() - t_start) * 1e3
            log.write(
                f"step={step} loss_simple={losses['loss_simple']:.6f} "
                f"loss_vlb={losses['loss_vlb']:.6f} wall_ms={wall_ms:.2f}\n"
            )
            result.losses.append(losses)
            result.steps_run += 1
            result.final_step = step + 1

            if baseline is None:
                baseline = losses["loss_simple"]
                smoothed = baseline
            else:
                smoothed = 0.9 * smoothed + 0.1 * losses["loss_simple"]

            if (step + 1) % tcfg.checkpoint_interval == 0:
                save_checkpoint(ckpt_path, model, step=step + 1)
                result.checkpoint_path = ckpt_path
            if (
                tcfg.stop_fraction is not None
                and result.steps_run >= 20
                and smoothed <= tcfg.stop_fraction * baseline
            ):
                break

    save_checkpoint(ckpt_path, model, step=result.final_step)
    result.checkpoint_path = ckpt_path
    return result
