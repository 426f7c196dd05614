"""Causal spatio-temporal diffusion transformer.

Each block runs spatial attention (optionally enhanced with clean-frame
key/value rows), causal temporal attention, cross-attention to caption
tokens, and an MLP, all conditioned on per-frame diffusion steps through
adaptive layer norm. Conditioning frames carry timestep 0; generated-frame
positions index a cyclic temporal table so generation can run past the
table length.

Forward is pure and reentrant: parameters are never mutated, and a provided
kv-cache is read-only. Distinct generation streams may call forward
concurrently with their own caches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
from torch import Tensor

from .errors import ConfigurationError, ContractError
from .schedule import NoisePrediction


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 4
    hidden_dim: int = 64
    num_heads: int = 4
    head_dim: int = 16
    patch_size: int = 4
    max_frames: int = 49
    latent_shape: tuple[int, int, int] = (16, 16, 3)
    caption_vocab_size: int = 64
    caption_len: int = 3
    sub_prompt_len: int = 2
    # Read the enhancement sub-prompt literally as the frames just before the
    # newest prompt frame instead of the newest ones themselves.
    literal_sub_prompt: bool = False
    # Ablation switch: disable the temporal mask (bidirectional attention).
    causal_temporal: bool = True

    def __post_init__(self):
        h, w, _ = self.latent_shape
        if self.hidden_dim != self.num_heads * self.head_dim:
            raise ConfigurationError(
                f"hidden_dim={self.hidden_dim} must equal "
                f"num_heads*head_dim={self.num_heads * self.head_dim}"
            )
        if self.hidden_dim % 4 != 0:
            raise ConfigurationError(
                f"hidden_dim={self.hidden_dim} must be divisible by 4 "
                "(two sin/cos halves per spatial axis)"
            )
        if h % self.patch_size or w % self.patch_size:
            raise ConfigurationError(
                f"latent_shape {self.latent_shape} not divisible by patch_size={self.patch_size}"
            )
        if self.max_frames < 1:
            raise ConfigurationError(f"max_frames must be >= 1, got {self.max_frames}")
        if self.sub_prompt_len < 0:
            raise ConfigurationError(f"sub_prompt_len must be >= 0, got {self.sub_prompt_len}")

    @property
    def tokens_per_frame(self) -> int:
        h, w, _ = self.latent_shape
        return (h // self.patch_size) * (w // self.patch_size)

    @property
    def bank_len(self) -> int:
        """Frames the prompt-activation bank must retain for enhancement."""
        return self.sub_prompt_len + (1 if self.literal_sub_prompt else 0)


@dataclass
class PromptSpec:
    """Prompt length P and enhancement sub-prompt length P' for one sequence."""

    prompt_len: int
    sub_prompt_len: int

    def __post_init__(self):
        if not 0 <= self.sub_prompt_len <= max(self.prompt_len, 0):
            raise ContractError(
                f"need 0 <= sub_prompt_len <= prompt_len, got "
                f"P'={self.sub_prompt_len}, P={self.prompt_len}"
            )


@dataclass
class TokenGrid:
    """Embedded frames: tokens (N, S, C'), absolute frame ids, per-frame steps."""

    tokens: Tensor
    frame_ids: Tensor
    timesteps: Tensor

    def __post_init__(self):
        if (self.frame_ids[1:] <= self.frame_ids[:-1]).any():
            raise ContractError("frame_ids must be strictly increasing")


def cyclic_position(frame_id: int, capacity: int) -> int:
    """Temporal table index for an absolute frame id: frame_id mod capacity."""
    if capacity < 1:
        raise ConfigurationError(f"capacity must be >= 1, got {capacity}")
    return frame_id % capacity


def frames_visible(query_frame: int, key_frame: int) -> bool:
    """The causal visibility rule: a frame sees itself and everything before it."""
    return key_frame <= query_frame


def causal_bias(
    num_queries: int, num_keys: int, dtype: torch.dtype = torch.float32
) -> Tensor:
    """Additive attention bias of shape (num_queries, num_keys).

    Query row i corresponds to absolute position (num_keys - num_queries + i),
    so a prefix of cached keys is fully visible and only the trailing square
    is upper-triangular masked.
    """
    if num_keys < num_queries:
        raise ContractError(f"num_keys={num_keys} < num_queries={num_queries}")
    offset = num_keys - num_queries
    q = torch.arange(num_queries).unsqueeze(1)
    k = torch.arange(num_keys).unsqueeze(0)
    bias = torch.zeros(num_queries, num_keys, dtype=dtype)
    bias.masked_fill_(k > q + offset, float("-inf"))
    return bias


def attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None,
              return_weights: bool = False):
    """Scaled dot-product attention over the last two dims; bias is additive."""
    scores = q @ k.transpose(-2, -1) * (q.shape[-1] ** -0.5)
    if bias is not None:
        scores = scores + bias
    weights = torch.softmax(scores, dim=-1)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


def causal_temporal_attention(q: Tensor, k: Tensor, v: Tensor,
                              bias: Tensor | None = None) -> Tensor:
    """Causal attention over frames: row i mixes value rows j <= i.

    q, k, v: (..., N, d). The default bias is the lower-triangular rule;
    passing an explicit bias overrides it (used by corruption self-tests).
    """
    n = q.shape[-2]
    if k.shape[-2] != n or v.shape[-2] != n:
        raise ContractError(
            f"causal attention needs matching frame counts, got q={n}, "
            f"k={k.shape[-2]}, v={v.shape[-2]}"
        )
    if bias is None:
        bias = causal_bias(n, n, dtype=q.dtype)
    return attention(q, k, v, bias)


def enhanced_spatial_attention(
    q: Tensor,
    k_frame: Tensor,
    v_frame: Tensor,
    k_bank: Tensor | None,
    v_bank: Tensor | None,
    is_prompt: bool,
    sub_prompt_len: int,
) -> Tensor:
    """Spatial attention for one frame with frame-prompt enhancement.

    q, k_frame, v_frame: (..., S, d). For prompt frames the frame's own
    key/value rows are repeated sub_prompt_len + 1 times; for generated
    frames the bank rows (..., Sb, d) are appended instead.
    """
    if sub_prompt_len == 0:
        return attention(q, k_frame, v_frame)
    if is_prompt:
        reps = [1] * (k_frame.ndim - 2) + [sub_prompt_len + 1, 1]
        return attention(q, k_frame.repeat(reps), v_frame.repeat(reps))
    if k_bank is None or k_bank.shape[-2] == 0:
        raise ContractError(
            "frame prompt enhancement needs a prompt bank for non-prompt frames "
            f"(sub_prompt_len={sub_prompt_len})"
        )
    k = torch.cat([k_frame, k_bank.expand(*k_frame.shape[:-2], -1, -1)], dim=-2)
    v = torch.cat([v_frame, v_bank.expand(*v_frame.shape[:-2], -1, -1)], dim=-2)
    return attention(q, k, v)


def sinusoidal_embedding(positions: Tensor, dim: int) -> Tensor:
    """Fixed sin/cos features of the given positions, shape (*positions, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
    )
    args = positions.to(torch.float64).unsqueeze(-1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def spatial_position_table(grid_h: int, grid_w: int, dim: int) -> Tensor:
    """2-D sin/cos table over the patch grid, shape (grid_h*grid_w, dim)."""
    ys = torch.arange(grid_h, dtype=torch.float64)
    xs = torch.arange(grid_w, dtype=torch.float64)
    emb_y = sinusoidal_embedding(ys, dim // 2)
    emb_x = sinusoidal_embedding(xs, dim // 2)
    grid = torch.cat(
        [
            emb_y.unsqueeze(1).expand(grid_h, grid_w, dim // 2),
            emb_x.unsqueeze(0).expand(grid_h, grid_w, dim // 2),
        ],
        dim=-1,
    )
    return grid.reshape(grid_h * grid_w, dim)


def extract_patches(latents: Tensor, patch: int) -> Tensor:
    """(..., H, W, C) -> (..., S, patch*patch*C) in row-major patch order."""
    *lead, h, w, c = latents.shape
    gh, gw = h // patch, w // patch
    x = latents.reshape(*lead, gh, patch, gw, patch, c)
    x = x.movedim(-3, -4)  # (..., gh, gw, patch, patch, c)
    return x.reshape(*lead, gh * gw, patch * patch * c)


def unpatchify(tokens: Tensor, grid_h: int, grid_w: int, patch: int) -> Tensor:
    """Inverse of extract_patches: (..., S, patch*patch*C) -> (..., H, W, C)."""
    *lead, s, d = tokens.shape
    if s != grid_h * grid_w:
        raise ContractError(f"token count {s} != grid {grid_h}x{grid_w}")
    c = d // (patch * patch)
    x = tokens.reshape(*lead, grid_h, grid_w, patch, patch, c)
    x = x.movedim(-3, -4)
    return x.reshape(*lead, grid_h * patch, grid_w * patch, c)


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    """AdaLN modulation of (B, N, S, C') tokens by per-frame (B, N, C') vectors."""
    return x * (1.0 + scale.unsqueeze(2)) + shift.unsqueeze(2)


class TimestepEmbedder(nn.Module):
    """Per-frame diffusion-step embedding; prompt frames pass t=0."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, timesteps: Tensor) -> Tensor:
        base = sinusoidal_embedding(timesteps, self.dim).to(self.mlp[0].weight.dtype)
        return self.mlp(base)


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    """(..., T, C') -> (..., heads, T, dh)."""
    *lead, t, c = x.shape
    return x.reshape(*lead, t, num_heads, c // num_heads).transpose(-3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    """(..., heads, T, dh) -> (..., T, C')."""
    x = x.transpose(-3, -2)
    *lead, t, h, d = x.shape
    return x.reshape(*lead, t, h * d)


class SpatialAttention(nn.Module):
    """Per-frame self-attention with optional frame-prompt enhancement."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.wq = nn.Linear(d, d)
        self.wk = nn.Linear(d, d)
        self.wv = nn.Linear(d, d)
        self.wo = nn.Linear(d, d)

    def _bank_kv(self, bank: Tensor) -> tuple[Tensor, Tensor]:
        # bank: (B, nb, S, C') clean-frame activations, oldest first, flattened
        # into (B, heads, nb*S, dh) key/value rows
        b, nb, s, _ = bank.shape
        heads = self.cfg.num_heads
        k = _split_heads(self.wk(bank), heads)  # (B, nb, heads, S, dh)
        v = _split_heads(self.wv(bank), heads)
        k = k.movedim(1, 2).reshape(b, heads, nb * s, -1)
        v = v.movedim(1, 2).reshape(b, heads, nb * s, -1)
        return k, v

    def forward(self, h: Tensor, prompt_len: int, ext_bank: Tensor | None) -> Tensor:
        b, n, s, _ = h.shape
        heads = self.cfg.num_heads
        sp = self.cfg.sub_prompt_len
        q = _split_heads(self.wq(h), heads)  # (B, N, heads, S, dh)
        k = _split_heads(self.wk(h), heads)
        v = _split_heads(self.wv(h), heads)

        if sp == 0:
            out = attention(q, k, v)
        else:
            out = torch.empty_like(q)
            if prompt_len > 0:
                out[:, :prompt_len] = attention(
                    q[:, :prompt_len],
                    k[:, :prompt_len].repeat(1, 1, 1, sp + 1, 1),
                    v[:, :prompt_len].repeat(1, 1, 1, sp + 1, 1),
                )
            if n > prompt_len:
                if ext_bank is not None:
                    bank = ext_bank.unsqueeze(0)  # cached path is single-stream
                else:
                    take = min(self.cfg.bank_len, prompt_len)
                    if take == 0:
                        raise ContractError(
                            "frame prompt enhancement needs prompt frames or a "
                            f"cached bank (sub_prompt_len={sp}, prompt_len={prompt_len})"
                        )
                    bank = h[:, prompt_len - take : prompt_len]
                if self.cfg.literal_sub_prompt and bank.shape[1] > 1:
                    bank = bank[:, :-1]
                kb, vb = self._bank_kv(bank)
                kb = kb.unsqueeze(1).expand(b, n - prompt_len, heads, -1, kb.shape[-1])
                vb = vb.unsqueeze(1).expand(b, n - prompt_len, heads, -1, vb.shape[-1])
                kn = torch.cat([k[:, prompt_len:], kb], dim=-2)
                vn = torch.cat([v[:, prompt_len:], vb], dim=-2)
                out[:, prompt_len:] = attention(q[:, prompt_len:], kn, vn)
        return self.wo(_merge_heads(out))


class TemporalAttention(nn.Module):
    """Attention across frames at each spatial site, causal by default."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.wq = nn.Linear(d, d)
        self.wk = nn.Linear(d, d)
        self.wv = nn.Linear(d, d)
        self.wo = nn.Linear(d, d)

    def forward(
        self,
        h: Tensor,
        prefix_kv: tuple[Tensor, Tensor] | None,
        causal: bool,
        collect: bool,
    ):
        b, n, s, _ = h.shape
        heads = self.cfg.num_heads
        # (B, N, S, C') -> (B, S, heads, N, dh): sites act as batch entries
        hs = h.transpose(1, 2)
        q = _split_heads(self.wq(hs), heads)
        k_cur = _split_heads(self.wk(hs), heads)
        v_cur = _split_heads(self.wv(hs), heads)

        prefix = 0
        k, v = k_cur, v_cur
        if prefix_kv is not None:
            if not causal:
                raise ContractError("kv-cache requires causal temporal attention")
            pk, pv = prefix_kv
            prefix = pk.shape[-2]
            k = torch.cat([pk.unsqueeze(0), k_cur], dim=-2)
            v = torch.cat([pv.unsqueeze(0), v_cur], dim=-2)

        bias = causal_bias(n, prefix + n, dtype=q.dtype) if causal else None
        out = attention(q, k, v, bias)
        out = self.wo(_merge_heads(out)).transpose(1, 2)

        collected = None
        if collect:
            collected = (k_cur.squeeze(0).detach(), v_cur.squeeze(0).detach())
        return out, collected


class CrossAttention(nn.Module):
    """Token-to-caption attention; output projection starts at zero."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.wq = nn.Linear(d, d)
        self.wk = nn.Linear(d, d)
        self.wv = nn.Linear(d, d)
        self.wo = nn.Linear(d, d)
        nn.init.zeros_(self.wo.weight)
        nn.init.zeros_(self.wo.bias)

    def forward(self, h: Tensor, caption_emb: Tensor) -> Tensor:
        b, n, s, c = h.shape
        heads = self.cfg.num_heads
        q = _split_heads(self.wq(h.reshape(b, n * s, c)), heads)
        k = _split_heads(self.wk(caption_emb), heads)
        v = _split_heads(self.wv(caption_emb), heads)
        out = attention(q, k, v)
        return self.wo(_merge_heads(out)).reshape(b, n, s, c)


class Block(nn.Module):
    """Spatial attention, causal temporal attention, cross-attention, MLP.

    One (shift, scale, gate) triple drives both attentions, a second drives
    the MLP; cross-attention rides the residual stream un-gated. Gates start
    at zero so a fresh block is the identity.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.spatial = SpatialAttention(cfg)
        self.temporal = TemporalAttention(cfg)
        self.cross = CrossAttention(cfg)
        self.mlp = nn.Sequential(
            nn.Linear(d, 4 * d), nn.GELU(approximate="tanh"), nn.Linear(4 * d, d)
        )
        self.adaln = nn.Sequential(nn.SiLU(), nn.Linear(d, 6 * d))
        nn.init.zeros_(self.adaln[-1].weight)
        nn.init.zeros_(self.adaln[-1].bias)

    def modulation(self, cond: Tensor) -> tuple[Tensor, ...]:
        """Six per-frame vectors: shift/scale/gate for attention and for the MLP."""
        return self.adaln(cond).chunk(6, dim=-1)

    def forward(
        self,
        x: Tensor,
        cond: Tensor,
        caption_emb: Tensor,
        prompt_len: int,
        layer_kv: tuple[Tensor, Tensor] | None,
        layer_bank: Tensor | None,
        collect: bool,
        causal: bool,
    ):
        sh_a, sc_a, g_a, sh_m, sc_m, g_m = self.modulation(cond)

        h = modulate(self.norm(x), sh_a, sc_a)
        bank_rows = None
        if collect:
            if x.shape[0] != 1:
                raise ContractError("cache collection supports a single stream (B=1)")
            bank_rows = h[0].detach()
        x = x + g_a.unsqueeze(2) * self.spatial(h, prompt_len, layer_bank)

        h = modulate(self.norm(x), sh_a, sc_a)
        t_out, kv_new = self.temporal(h, layer_kv, causal, collect)
        x = x + g_a.unsqueeze(2) * t_out

        x = x + self.cross(self.norm(x), caption_emb)

        h = modulate(self.norm(x), sh_m, sc_m)
        x = x + g_m.unsqueeze(2) * self.mlp(h)

        update = None
        if collect:
            update = (kv_new[0], kv_new[1], bank_rows)
        return x, update


class FinalLayer(nn.Module):
    """Modulated norm and linear decode to per-patch noise + covariance."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        out = cfg.patch_size * cfg.patch_size * 2 * cfg.latent_shape[2]
        self.norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.adaln = nn.Sequential(nn.SiLU(), nn.Linear(d, 2 * d))
        self.proj = nn.Linear(d, out)
        nn.init.zeros_(self.adaln[-1].weight)
        nn.init.zeros_(self.adaln[-1].bias)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        shift, scale = self.adaln(cond).chunk(2, dim=-1)
        return self.proj(modulate(self.norm(x), shift, scale))


class CausalVideoModel(nn.Module):
    """The full denoiser: clean prompt frames plus noisy frames in, per-frame
    noise and covariance predictions out."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        h, w, c = cfg.latent_shape
        p = cfg.patch_size
        self.grid_h, self.grid_w = h // p, w // p
        d = cfg.hidden_dim

        self.patch_proj = nn.Linear(p * p * c, d)
        self.register_buffer(
            "spatial_pos",
            spatial_position_table(self.grid_h, self.grid_w, d).float(),
            persistent=False,
        )
        self.register_buffer(
            "temporal_pos",
            sinusoidal_embedding(torch.arange(cfg.max_frames), d).float(),
            persistent=False,
        )
        self.time_embed = TimestepEmbedder(d)
        self.caption_embed = nn.Embedding(cfg.caption_vocab_size, d)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.num_blocks))
        self.final = FinalLayer(cfg)

    @property
    def dtype(self) -> torch.dtype:
        return self.patch_proj.weight.dtype

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def embed_tokens(self, latents: Tensor, frame_ids: Tensor) -> Tensor:
        """(B, N, H, W, C) -> (B, N, S, C') with spatial and cyclic temporal positions."""
        patches = extract_patches(latents, self.config.patch_size)
        tok = self.patch_proj(patches)
        pos_t = self.temporal_pos[frame_ids % self.config.max_frames]
        return tok + self.spatial_pos + pos_t.unsqueeze(-2)

    def patchify(self, latents: Tensor, frame_ids: Tensor | None = None,
                 timesteps: Tensor | None = None) -> TokenGrid:
        """Embed one unbatched video (N, H, W, C) into a TokenGrid."""
        n, h, w, c = latents.shape
        if (h, w, c) != self.config.latent_shape:
            raise ContractError(
                f"latent shape {(h, w, c)} != configured {self.config.latent_shape}"
            )
        if frame_ids is None:
            frame_ids = torch.arange(n)
        if timesteps is None:
            timesteps = torch.zeros(n, dtype=torch.long)
        tokens = self.embed_tokens(latents.unsqueeze(0), frame_ids).squeeze(0)
        return TokenGrid(tokens=tokens, frame_ids=frame_ids, timesteps=timesteps)

    def unpatchify(self, tokens: Tensor) -> Tensor:
        return unpatchify(tokens, self.grid_h, self.grid_w, self.config.patch_size)

    @staticmethod
    def _prompt_len(timesteps: Tensor) -> int:
        zero = timesteps == 0
        if not torch.equal(zero, zero[:1].expand_as(zero)):
            raise ContractError("prompt prefix must be shared across the batch")
        row = zero[0]
        p = int(row.cumprod(0).sum())
        if row[p:].any():
            raise ContractError("timestep-0 frames must form a prefix")
        return p

    def forward(
        self,
        latents: Tensor,
        timesteps: Tensor,
        captions: Tensor,
        frame_ids: Tensor | None = None,
        cache=None,
        collect_cache: bool = False,
    ):
        """Predict noise and covariance for every frame.

        latents: (B, N, H, W, C) or (N, H, W, C); timesteps: (B, N) with 0 on
        prompt frames; captions: (B, caption_len) token ids. With a cache the
        batch must be 1 and the cached frames act as the attention prefix.
        When collect_cache is set, also returns per-layer (k, v, bank) rows
        for the input frames, ready to be appended to a cache.
        """
        squeeze = latents.ndim == 4
        if squeeze:
            latents = latents.unsqueeze(0)
        b, n, h, w, c = latents.shape
        if (h, w, c) != self.config.latent_shape:
            raise ContractError(
                f"latent shape {(h, w, c)} != configured {self.config.latent_shape}"
            )
        timesteps = timesteps.reshape(b, n)
        captions = captions.reshape(b, -1)
        if captions.shape[1] != self.config.caption_len:
            raise ContractError(
                f"caption length {captions.shape[1]} != configured {self.config.caption_len}"
            )
        if frame_ids is None:
            start = 0 if cache is None else cache.frame_count and cache.frame_ids[-1] + 1
            frame_ids = torch.arange(start, start + n)
        if cache is not None:
            if b != 1:
                raise ContractError("kv-cache paths support a single stream (B=1)")
            if len(cache.layers) != self.config.num_blocks:
                raise ContractError(
                    f"cache has {len(cache.layers)} layers, model has "
                    f"{self.config.num_blocks}"
                )
            if cache.frame_count and frame_ids[0] != cache.frame_ids[-1] + 1:
                raise ContractError(
                    f"chunk frame ids must continue the cache: cache ends at "
                    f"{cache.frame_ids[-1]}, chunk starts at {int(frame_ids[0])}"
                )

        prompt_len = self._prompt_len(timesteps)
        x = self.embed_tokens(latents, frame_ids)
        cond = self.time_embed(timesteps)
        cap = self.caption_embed(captions)

        collected = [] if collect_cache else None
        for i, block in enumerate(self.blocks):
            layer_kv = None
            layer_bank = None
            if cache is not None and cache.frame_count > 0:
                entry = cache.layers[i]
                layer_kv = (entry.k, entry.v)
                layer_bank = cache.prompt_bank[i]
            x, update = block(
                x,
                cond,
                cap,
                prompt_len,
                layer_kv,
                layer_bank,
                collect_cache,
                self.config.causal_temporal,
            )
            if collect_cache:
                collected.append(update)

        out = self.final(x, cond)
        decoded = self.unpatchify(out)
        eps, v = decoded.split(self.config.latent_shape[2], dim=-1)
        if squeeze:
            eps, v = eps.squeeze(0), v.squeeze(0)
        pred = NoisePrediction(eps=eps, v=v)
        if collect_cache:
            return pred, collected
        return pred
