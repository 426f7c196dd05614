"""Autoregressive generation with a clean-latent kv-cache.

Each autoregression step denoises a chunk of n frames by DDIM, conditioned
on every previously generated frame. Cached key/value rows are computed only
from fully denoised latents (one extra prompt-mode forward per chunk), the
cache dequeues oldest-first once capacity is reached, and generation can also
run with full-prefix recomputation as the equivalence oracle.

A GenerationState is single-owner: never share one mid-generation.
Independent states may generate concurrently against shared, read-only
model parameters.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import torch
from torch import Tensor

from .errors import ContractError, NumericsError
from .model import CausalVideoModel, attention, causal_bias
from .schedule import Schedule, cfg_combine, ddim_pairs, ddim_step


@dataclass
class LayerKV:
    k: Tensor  # (S, heads, frames, head_dim)
    v: Tensor


@dataclass
class KVCache:
    """Bounded per-layer key/value rows plus the clean-frame activation bank.

    Entries always derive from clean (t=0) latents. Resident frames form a
    contiguous, increasing id range; appends beyond `capacity` evict the
    oldest frames first.
    """

    capacity: int
    bank_capacity: int
    layers: list[LayerKV]
    prompt_bank: list[Tensor]
    first_frame_id: int = 0
    frame_count: int = 0

    @property
    def frame_ids(self) -> range:
        return range(self.first_frame_id, self.first_frame_id + self.frame_count)


def make_cache(model: CausalVideoModel, capacity: int | None = None) -> KVCache:
    cfg = model.config
    cap = cfg.max_frames if capacity is None else capacity
    dh = cfg.head_dim
    s = cfg.tokens_per_frame
    dt = model.dtype
    layers = [
        LayerKV(
            k=torch.zeros(s, cfg.num_heads, 0, dh, dtype=dt),
            v=torch.zeros(s, cfg.num_heads, 0, dh, dtype=dt),
        )
        for _ in range(cfg.num_blocks)
    ]
    bank = [torch.zeros(0, s, cfg.hidden_dim, dtype=dt) for _ in range(cfg.num_blocks)]
    return KVCache(
        capacity=cap,
        bank_capacity=cfg.bank_len,
        layers=layers,
        prompt_bank=bank,
    )


def cache_append(cache: KVCache, updates: list[tuple[Tensor, Tensor, Tensor]],
                 n_new: int) -> KVCache:
    """Append n_new frames' rows per layer, evicting oldest frames past capacity.

    `updates` holds one (k, v, bank_rows) triple per layer as returned by a
    collect_cache forward. The prompt bank keeps the newest bank_capacity
    frames' activations. Mutates and returns `cache`.
    """
    if n_new > cache.capacity:
        raise ContractError(
            f"cannot append {n_new} frames to a cache of capacity {cache.capacity}"
        )
    if len(updates) != len(cache.layers):
        raise ContractError(
            f"got updates for {len(updates)} layers, cache has {len(cache.layers)}"
        )
    evict = max(0, cache.frame_count + n_new - cache.capacity)
    for entry, (k_new, v_new, bank_rows) in zip(cache.layers, updates):
        entry.k = torch.cat([entry.k[:, :, evict:], k_new], dim=2)
        entry.v = torch.cat([entry.v[:, :, evict:], v_new], dim=2)
    for i, (_, _, bank_rows) in enumerate(updates):
        merged = torch.cat([cache.prompt_bank[i], bank_rows], dim=0)
        cache.prompt_bank[i] = merged[max(0, merged.shape[0] - cache.bank_capacity):]
    cache.first_frame_id += evict
    cache.frame_count += n_new - evict
    return cache


def cached_causal_attention(q_chunk: Tensor, k_all: Tensor, v_all: Tensor,
                            prefix_len: int) -> Tensor:
    """Attention of n chunk queries over prefix_len cached plus n fresh keys.

    All cached columns are visible to every query row; only the trailing
    square is causally masked. Equals full causal attention over the
    concatenated sequence restricted to the last n rows.
    """
    n = q_chunk.shape[-2]
    total = k_all.shape[-2]
    if total != prefix_len + n:
        raise ContractError(
            f"key rows {total} != prefix {prefix_len} + chunk {n}"
        )
    bias = causal_bias(n, total, dtype=q_chunk.dtype)
    return attention(q_chunk, k_all, v_all, bias)


@dataclass(frozen=True)
class InferenceConfig:
    """Settings one generation stream needs beyond the model itself."""

    chunk_len: int = 16
    cfg_scale: float | None = 7.5
    seed: int = 0
    use_cache: bool = True


@dataclass
class GenerationState:
    """Everything one autoregression stream owns."""

    frames: Tensor  # (k, H, W, C) accumulated clean latents
    caption: Tensor  # (caption_len,) token ids
    chunk_len: int
    rng: torch.Generator
    cache_cond: KVCache | None
    cache_uncond: KVCache | None

    @property
    def k(self) -> int:
        return self.frames.shape[0]


def _null_caption(caption: Tensor) -> Tensor:
    return torch.zeros_like(caption)


def _forward_eps(model, latents, t, caption, frame_ids, cache):
    n = latents.shape[0]
    timesteps = torch.full((1, n), t, dtype=torch.long)
    pred = model(latents, timesteps, caption.reshape(1, -1), frame_ids=frame_ids,
                 cache=cache)
    return pred.eps


def _guided_eps(model, latents, t, caption, frame_ids, cfg_scale,
                cache_cond, cache_uncond):
    eps_cond = _forward_eps(model, latents, t, caption, frame_ids, cache_cond)
    if cfg_scale is None:
        return eps_cond
    eps_uncond = _forward_eps(
        model, latents, t, _null_caption(caption), frame_ids, cache_uncond
    )
    return cfg_combine(eps_cond, eps_uncond, cfg_scale)


def denoise_chunk(state: GenerationState, model: CausalVideoModel,
                  schedule: Schedule, cfg_scale: float | None) -> Tensor:
    """Run the DDIM sub-schedule for the next chunk against the cached prefix.

    The cache is read-only throughout. Returns the clean chunk, clamped to
    [-1, 1]. Raises NumericsError naming the step index if the trajectory
    leaves the finite range.
    """
    n = state.chunk_len
    h, w, c = model.config.latent_shape
    noise = torch.randn(n, h, w, c, generator=state.rng, dtype=torch.float64)
    return _denoise_from_noise(
        model, schedule, noise.to(model.dtype), state.caption, cfg_scale,
        chunk_first_id=state.k,
        cache_cond=state.cache_cond,
        cache_uncond=state.cache_uncond,
    )


def _denoise_from_noise(model, schedule, chunk, caption, cfg_scale, *,
                        chunk_first_id, cache_cond=None, cache_uncond=None,
                        prefix=None, prefix_first_id=0):
    """Shared DDIM loop for the cached and full-recompute paths."""
    n = chunk.shape[0]
    if prefix is None:
        frame_ids = torch.arange(chunk_first_id, chunk_first_id + n)
        for step_index, (t, t_prev) in enumerate(ddim_pairs(schedule)):
            eps = _guided_eps(model, chunk, t, caption, frame_ids, cfg_scale,
                              cache_cond, cache_uncond)
            chunk = ddim_step(eps, chunk, t, t_prev, schedule)
            if not torch.isfinite(chunk).all():
                raise NumericsError(
                    f"non-finite latents at ddim step index {step_index} (t={t})"
                )
    else:
        p = prefix.shape[0]
        frame_ids = torch.arange(prefix_first_id, prefix_first_id + p + n)
        for step_index, (t, t_prev) in enumerate(ddim_pairs(schedule)):
            full = torch.cat([prefix, chunk], dim=0)
            timesteps = torch.cat(
                [torch.zeros(p, dtype=torch.long), torch.full((n,), t, dtype=torch.long)]
            ).unsqueeze(0)
            pred_c = model(full, timesteps, caption.reshape(1, -1), frame_ids=frame_ids)
            eps = pred_c.eps[p:]
            if cfg_scale is not None:
                pred_u = model(full, timesteps, _null_caption(caption).reshape(1, -1),
                               frame_ids=frame_ids)
                eps = cfg_combine(eps, pred_u.eps[p:], cfg_scale)
            chunk = ddim_step(eps, chunk, t, t_prev, schedule)
            if not torch.isfinite(chunk).all():
                raise NumericsError(
                    f"non-finite latents at ddim step index {step_index} (t={t})"
                )
    return chunk.clamp(-1.0, 1.0)


def _reset_cache(cache: KVCache, first_frame_id: int) -> None:
    for entry in cache.layers:
        entry.k = entry.k[:, :, :0]
        entry.v = entry.v[:, :, :0]
    cache.prompt_bank = [bank[:0] for bank in cache.prompt_bank]
    cache.first_frame_id = first_frame_id
    cache.frame_count = 0


def write_cache_from_clean(state: GenerationState, model: CausalVideoModel,
                           z0_chunk: Tensor) -> None:
    """Record the finished chunk's key/value rows and bank activations.

    While capacity allows, this is one extra forward per caption branch in
    prompt mode (timestep 0, cache read enabled); the pass's noise output is
    discarded. Once an append would evict, the resident window's entries are
    instead rebuilt from the clean latents in one joint t=0 pass, so cached
    rows always equal what a windowed full recomputation would produce.
    """
    n = z0_chunk.shape[0]
    branches = [(state.cache_cond, state.caption)]
    if state.cache_uncond is not None:
        branches.append((state.cache_uncond, _null_caption(state.caption)))
    for cache, caption in branches:
        if cache.frame_count + n <= cache.capacity:
            frame_ids = torch.arange(state.k, state.k + n)
            timesteps = torch.zeros(1, n, dtype=torch.long)
            _, updates = model(
                z0_chunk, timesteps, caption.reshape(1, -1), frame_ids=frame_ids,
                cache=cache, collect_cache=True,
            )
            cache_append(cache, updates, n)
        else:
            history = torch.cat([state.frames, z0_chunk], dim=0)
            first_id = state.k + n - min(cache.capacity, history.shape[0])
            window = history[first_id:]
            frame_ids = torch.arange(first_id, state.k + n)
            timesteps = torch.zeros(1, window.shape[0], dtype=torch.long)
            _, updates = model(
                window, timesteps, caption.reshape(1, -1), frame_ids=frame_ids,
                collect_cache=True,
            )
            _reset_cache(cache, first_id)
            cache_append(cache, updates, window.shape[0])


def new_state(model: CausalVideoModel, first_frame: Tensor, caption: Tensor,
              icfg: InferenceConfig, capacity: int | None = None) -> GenerationState:
    """Seed a stream with the given first frame (k=1, cache written for it)."""
    if first_frame.ndim != 3:
        raise ContractError(
            f"first_frame must be (H, W, C), got shape {tuple(first_frame.shape)}"
        )
    rng = torch.Generator().manual_seed(icfg.seed)
    use_cfg = icfg.cfg_scale is not None
    state = GenerationState(
        frames=torch.zeros(0, *first_frame.shape, dtype=model.dtype),
        caption=caption,
        chunk_len=icfg.chunk_len,
        rng=rng,
        cache_cond=make_cache(model, capacity) if icfg.use_cache else None,
        cache_uncond=make_cache(model, capacity) if icfg.use_cache and use_cfg else None,
    )
    first = first_frame.to(model.dtype).unsqueeze(0)
    if icfg.use_cache:
        write_cache_from_clean(state, model, first)
    state.frames = first
    return state


def _window(state: GenerationState, capacity: int) -> tuple[Tensor, int]:
    """The resident clean prefix for full-recompute mode: the last <= L frames."""
    start = max(0, state.k - capacity)
    return state.frames[start:], start


def generate(first_frame: Tensor, caption: Tensor, num_chunks: int,
             model: CausalVideoModel, schedule: Schedule,
             icfg: InferenceConfig, capacity: int | None = None) -> Tensor:
    """Autoregress num_chunks chunks from a given first frame.

    Returns 1 + num_chunks * chunk_len frames (the conditioning frame plus
    the generated ones; trim the first to count generated frames only).
    """
    if num_chunks < 1:
        raise ContractError(f"num_chunks must be >= 1, got {num_chunks}")
    cap = model.config.max_frames if capacity is None else capacity
    state = new_state(model, first_frame, caption, icfg, capacity=cap)
    for _ in range(num_chunks):
        if icfg.use_cache:
            chunk = denoise_chunk(state, model, schedule, icfg.cfg_scale)
            write_cache_from_clean(state, model, chunk)
        else:
            n = state.chunk_len
            h, w, c = model.config.latent_shape
            noise = torch.randn(n, h, w, c, generator=state.rng, dtype=torch.float64)
            prefix, start = _window(state, cap)
            chunk = _denoise_from_noise(
                model, schedule, noise.to(model.dtype), state.caption,
                icfg.cfg_scale, chunk_first_id=state.k,
                prefix=prefix, prefix_first_id=start,
            )
        state.frames = torch.cat([state.frames, chunk], dim=0)
    return state.frames


def attention_score_rows(prefix_len: int, chunk_len: int, cached: bool) -> int:
    """Score entries one temporal-attention call computes at a given prefix."""
    total = prefix_len + chunk_len
    return chunk_len * total if cached else total * total


@dataclass
class BenchChunk:
    index: int
    prefix_len: int
    cached_score_rows: int
    uncached_score_rows: int
    cached_seconds: float
    uncached_seconds: float


@dataclass
class BenchReport:
    chunk_len: int
    capacity: int
    ddim_steps: int
    chunks: list[BenchChunk] = field(default_factory=list)

    @property
    def cached_score_total(self) -> int:
        return sum(c.cached_score_rows for c in self.chunks)

    @property
    def uncached_score_total(self) -> int:
        return sum(c.uncached_score_rows for c in self.chunks)

    @property
    def cached_seconds_total(self) -> float:
        return sum(c.cached_seconds for c in self.chunks)

    @property
    def uncached_seconds_total(self) -> float:
        return sum(c.uncached_seconds for c in self.chunks)

    def frames_per_second(self, cached: bool) -> float:
        frames = self.chunk_len * len(self.chunks)
        secs = self.cached_seconds_total if cached else self.uncached_seconds_total
        return frames / secs if secs > 0 else float("inf")

    def lines(self) -> list[str]:
        generated = self.chunk_len * len(self.chunks)
        out = [
            f"bench chunk_len={self.chunk_len} capacity={self.capacity} "
            f"ddim_steps={self.ddim_steps}",
            f"frames generated={generated} including_conditioning={generated} "
            "(bench chains start from an empty prefix)",
        ]
        for c in self.chunks:
            ratio = c.uncached_seconds / c.cached_seconds if c.cached_seconds else 0.0
            out.append(
                f"chunk={c.index} prefix={c.prefix_len} "
                f"score_rows_cached={c.cached_score_rows} "
                f"score_rows_uncached={c.uncached_score_rows} "
                f"wall_cached_s={c.cached_seconds:.4f} "
                f"wall_uncached_s={c.uncached_seconds:.4f} "
                f"speedup={ratio:.2f}"
            )
        out.append(
            f"total score_rows_cached={self.cached_score_total} "
            f"score_rows_uncached={self.uncached_score_total} "
            f"wall_cached_s={self.cached_seconds_total:.4f} "
            f"wall_uncached_s={self.uncached_seconds_total:.4f} "
            f"fps_cached={self.frames_per_second(True):.3f} "
            f"fps_uncached={self.frames_per_second(False):.3f}"
        )
        return out


def bench_cache(model: CausalVideoModel, schedule: Schedule, num_chunks: int,
                chunk_len: int, capacity: int, seed: int = 0,
                repeats: int = 1) -> BenchReport:
    """Time cached vs full-recompute denoising along one autoregression chain.

    The chain starts from an empty prefix, so chunk i runs against
    k_i = min(i * chunk_len, capacity) resident frames; score-row counts per
    chunk are chunk_len*(k_i+n) cached vs (k_i+n)^2 uncached. Wall times take
    the best of `repeats` runs. The prefix content is synthetic clean latents;
    timing does not depend on values.
    """
    h, w, c = model.config.latent_shape
    rng = torch.Generator().manual_seed(seed)
    caption = torch.zeros(model.config.caption_len, dtype=torch.long)
    state = GenerationState(
        frames=torch.zeros(0, h, w, c, dtype=model.dtype),
        caption=caption,
        chunk_len=chunk_len,
        rng=rng,
        cache_cond=make_cache(model, capacity),
        cache_uncond=None,
    )
    report = BenchReport(chunk_len=chunk_len, capacity=capacity,
                         ddim_steps=len(schedule.ddim_steps))
    for i in range(num_chunks):
        prefix_len = min(state.k, capacity)
        noise = torch.randn(chunk_len, h, w, c, generator=rng, dtype=torch.float64)
        noise = noise.to(model.dtype)

        cached_s = float("inf")
        uncached_s = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            chunk = _denoise_from_noise(
                model, schedule, noise, caption, None,
                chunk_first_id=state.k, cache_cond=state.cache_cond,
            )
            cached_s = min(cached_s, time.perf_counter() - t0)

            prefix, start = _window(state, capacity)
            t0 = time.perf_counter()
            _denoise_from_noise(
                model, schedule, noise, caption, None,
                chunk_first_id=state.k, prefix=prefix, prefix_first_id=start,
            )
            uncached_s = min(uncached_s, time.perf_counter() - t0)

        report.chunks.append(
            BenchChunk(
                index=i,
                prefix_len=prefix_len,
                cached_score_rows=attention_score_rows(prefix_len, chunk_len, True),
                uncached_score_rows=attention_score_rows(prefix_len, chunk_len, False),
                cached_seconds=cached_s,
                uncached_seconds=uncached_s,
            )
        )
        write_cache_from_clean(state, model, chunk)
        state.frames = torch.cat([state.frames, chunk], dim=0)
    return report
