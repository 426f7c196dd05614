"""Long-video consistency metrics.

Frame differencing curves, the junction-vs-rest differencing gap at
autoregression chunk edges, and a Fréchet distance between chunk feature
distributions computed with a frozen random-projection extractor. All
operations are pure and safe to evaluate in parallel across videos.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import ContractError


@dataclass
class FDCurve:
    """Mean absolute difference between consecutive frames, in [0, 1] units."""

    values: Tensor  # (N-1,) nonnegative


def frame_differencing(video: Tensor) -> FDCurve:
    """Per-transition mean absolute pixel difference after remapping to [0, 1]."""
    if video.ndim != 4 or video.shape[0] < 2:
        raise ContractError(
            f"need a (N>=2, H, W, C) video, got shape {tuple(video.shape)}"
        )
    frames = (video + 1.0) / 2.0
    diffs = (frames[1:] - frames[:-1]).abs()
    return FDCurve(values=diffs.mean(dim=(1, 2, 3)))


def junction_indices(num_transitions: int, chunk_len: int,
                     first_frame_offset: int) -> list[int]:
    """Transition indices that straddle two consecutive autoregression chunks.

    Transition f measures frames f -> f+1; chunk boundaries sit every
    chunk_len frames after the conditioning offset.
    """
    if chunk_len < 1:
        raise ContractError(f"chunk_len must be >= 1, got {chunk_len}")
    out = []
    edge = first_frame_offset + chunk_len
    while edge < num_transitions + 1:
        idx = edge - 1
        if 0 <= idx < num_transitions and edge + chunk_len <= num_transitions + 1:
            out.append(idx)
        edge += chunk_len
    return out


def delta_edge_fd(curve: FDCurve, chunk_len: int, first_frame_offset: int = 1,
                  per_chunk: bool = False) -> float:
    """Mean junction differencing minus mean non-junction differencing.

    Positive means content jumps at chunk edges. With per_chunk, the
    non-junction side averages per-chunk means instead of pooling all values.
    """
    values = curve.values.to(torch.float64)
    n = values.shape[0]
    junctions = junction_indices(n, chunk_len, first_frame_offset)
    if not junctions:
        raise ContractError(
            f"no chunk junction within {n} transitions "
            f"(chunk_len={chunk_len}, offset={first_frame_offset})"
        )
    jmask = torch.zeros(n, dtype=torch.bool)
    jmask[junctions] = True
    junction_mean = values[jmask].mean()

    if not per_chunk:
        rest = values[~jmask]
        if rest.numel() == 0:
            raise ContractError("every transition is a junction; nothing to compare")
        return float(junction_mean - rest.mean())

    chunk_means = []
    start = first_frame_offset
    while start + chunk_len <= n + 1:
        idx = [i for i in range(start, start + chunk_len - 1) if not jmask[i]]
        inner = values[idx]
        if inner.numel():
            chunk_means.append(inner.mean())
        start += chunk_len
    if not chunk_means:
        raise ContractError("chunks too short for a per-chunk baseline")
    return float(junction_mean - torch.stack(chunk_means).mean())


class FeatureExtractor:
    """Frozen spatiotemporal pooling plus a seeded random linear projection.

    Deterministic given the seed; identical chunks give identical features.
    """

    def __init__(self, chunk_len: int, out_dim: int = 64,
                 pool_grid: tuple[int, int, int] = (4, 4, 4), seed: int = 0):
        self.chunk_len = chunk_len
        self.out_dim = out_dim
        self.pool_grid = pool_grid
        self.seed = seed
        self._proj: Tensor | None = None

    def _projection(self, in_dim: int) -> Tensor:
        if self._proj is None or self._proj.shape[0] != in_dim:
            rng = torch.Generator().manual_seed(self.seed)
            self._proj = torch.randn(in_dim, self.out_dim, generator=rng) / in_dim**0.5
        return self._proj

    def __call__(self, chunk: Tensor) -> Tensor:
        if chunk.ndim != 4 or chunk.shape[0] != self.chunk_len:
            raise ContractError(
                f"expected a ({self.chunk_len}, H, W, C) chunk, got {tuple(chunk.shape)}"
            )
        gt, gh, gw = self.pool_grid
        pooled = torch.nn.functional.adaptive_avg_pool3d(
            chunk.permute(3, 0, 1, 2).unsqueeze(0).float(), (gt, gh, gw)
        ).flatten()
        return pooled @ self._projection(pooled.shape[0])


def extract_features(chunk: Tensor, chunk_len: int, seed: int = 0,
                     out_dim: int = 64) -> Tensor:
    return FeatureExtractor(chunk_len, out_dim=out_dim, seed=seed)(chunk)


@dataclass
class FrechetStats:
    """Mean, unbiased covariance, and sample count of a feature population."""

    mean: Tensor
    cov: Tensor
    count: int

    @classmethod
    def from_samples(cls, features: Tensor) -> "FrechetStats":
        if features.ndim != 2 or features.shape[0] < 2:
            raise ContractError(
                f"need at least 2 feature rows, got shape {tuple(features.shape)}"
            )
        feats = features.to(torch.float64)
        mean = feats.mean(dim=0)
        centered = feats - mean
        cov = centered.T @ centered / (feats.shape[0] - 1)
        cov = (cov + cov.T) / 2
        return cls(mean=mean, cov=cov, count=feats.shape[0])


def _sqrtm_psd(mat: Tensor) -> Tensor:
    vals, vecs = torch.linalg.eigh(mat)
    vals = vals.clamp(min=0.0)
    return (vecs * vals.sqrt()) @ vecs.T


def frechet_distance(a: FrechetStats, b: FrechetStats) -> float:
    """Squared Fréchet distance between two Gaussians.

    |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the matrix root
    taken through the symmetric product S_a^{1/2} S_b S_a^{1/2} and negative
    eigenvalues clamped to zero.
    """
    if a.mean.shape != b.mean.shape:
        raise ContractError(
            f"dimension mismatch: {tuple(a.mean.shape)} vs {tuple(b.mean.shape)}"
        )
    if a.count < 2 or b.count < 2:
        raise ContractError("Frechet statistics need at least 2 samples per side")
    sa = a.cov.to(torch.float64)
    sb = b.cov.to(torch.float64)
    root_a = _sqrtm_psd(sa)
    inner = root_a @ sb @ root_a
    inner = (inner + inner.T) / 2
    vals = torch.linalg.eigvalsh(inner).clamp(min=0.0)
    trace_term = sa.trace() + sb.trace() - 2.0 * vals.sqrt().sum()
    dist = float((a.mean - b.mean).pow(2).sum() + trace_term)
    if dist < -1e-6:
        raise ContractError(f"Frechet distance collapsed below tolerance: {dist}")
    return max(dist, 0.0)


def video_chunks(video: Tensor, chunk_len: int,
                 first_frame_offset: int = 1) -> list[Tensor]:
    """Full autoregression chunks of a video, skipping the conditioning offset."""
    out = []
    start = first_frame_offset
    while start + chunk_len <= video.shape[0]:
        out.append(video[start : start + chunk_len])
        start += chunk_len
    return out


def step_fvd(videos: list[Tensor], chunk_len: int,
             extractor: FeatureExtractor | None = None,
             first_frame_offset: int = 1, seed: int = 0) -> dict[int, float]:
    """Fréchet distance of every later chunk's features against chunk 1's.

    Needs a population: distributional statistics from a single video are
    rejected. Returns {chunk_index: score} for indices 2..C.
    """
    if len(videos) < 2:
        raise ContractError(
            f"step-fvd needs a population of videos, got {len(videos)}"
        )
    if extractor is None:
        extractor = FeatureExtractor(chunk_len, seed=seed)
    per_video = [video_chunks(v, chunk_len, first_frame_offset) for v in videos]
    num_chunks = min(len(c) for c in per_video)
    if num_chunks < 2:
        raise ContractError("step-fvd needs at least 2 chunks per video")

    features = [
        torch.stack([extractor(chunks[i]) for chunks in per_video])
        for i in range(num_chunks)
    ]
    reference = FrechetStats.from_samples(features[0])
    return {
        i + 1: frechet_distance(FrechetStats.from_samples(features[i]), reference)
        for i in range(1, num_chunks)
    }
