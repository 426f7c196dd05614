"""Closed-form diffusion mathematics.

Forward noising, the DDPM posterior with learned covariance, deterministic
DDIM stepping, the per-element variational-bound term, and classifier-free
guidance combination. Everything here is a pure function of its inputs;
`Schedule` is immutable after construction.

Step indices are 1-based throughout: t runs over 1..T, and alpha_bar(0) is
defined as 1 so the final DDIM step lands on the clean latent.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import ConfigurationError, ContractError


@dataclass(frozen=True)
class Schedule:
    """Diffusion constants for T steps plus the DDIM sub-schedule.

    All tensors are float64 and indexed by t-1 (entry 0 holds the t=1 value).
    `posterior_vars` stores the exact posterior variance, which is 0 at t=1;
    `posterior_log_vars` is the log-variance with the t=1 entry clipped to the
    t=2 value so log-space interpolation and KL terms stay finite.
    """

    num_steps: int
    betas: Tensor
    alphas: Tensor
    alpha_bars: Tensor
    posterior_vars: Tensor
    posterior_log_vars: Tensor
    ddim_steps: tuple[int, ...]

    def beta(self, t: int | Tensor) -> Tensor:
        return self._gather(self.betas, t)

    def alpha(self, t: int | Tensor) -> Tensor:
        return self._gather(self.alphas, t)

    def alpha_bar(self, t: int | Tensor) -> Tensor:
        """Cumulative product of alphas up to t, with alpha_bar(0) := 1."""
        if isinstance(t, Tensor):
            padded = torch.cat([torch.ones(1, dtype=self.alpha_bars.dtype), self.alpha_bars])
            return padded[t.long()]
        if t == 0:
            return torch.tensor(1.0, dtype=self.alpha_bars.dtype)
        return self._gather(self.alpha_bars, t)

    def posterior_var(self, t: int | Tensor) -> Tensor:
        return self._gather(self.posterior_vars, t)

    def posterior_log_var(self, t: int | Tensor) -> Tensor:
        return self._gather(self.posterior_log_vars, t)

    def _gather(self, values: Tensor, t: int | Tensor) -> Tensor:
        if isinstance(t, Tensor):
            if (t < 1).any() or (t > self.num_steps).any():
                raise ContractError(f"step index out of range 1..{self.num_steps}: {t}")
            return values[t.long() - 1]
        if not 1 <= t <= self.num_steps:
            raise ContractError(f"step index {t} out of range 1..{self.num_steps}")
        return values[t - 1]


@dataclass
class NoisePrediction:
    """Raw model output for one latent chunk: predicted noise and the
    covariance interpolation coefficient, both shaped like the chunk."""

    eps: Tensor
    v: Tensor

    def __post_init__(self):
        if self.eps.shape != self.v.shape:
            raise ContractError(
                f"eps and v shapes differ: {tuple(self.eps.shape)} vs {tuple(self.v.shape)}"
            )


def make_schedule(
    num_steps: int, beta_start: float, beta_end: float, num_ddim_steps: int
) -> Schedule:
    """Build a linear-beta schedule with an evenly strided DDIM sub-schedule.

    The sub-schedule is chosen so its last element is exactly `num_steps`.
    """
    if num_steps < 1:
        raise ConfigurationError(f"num_steps must be >= 1, got {num_steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigurationError(
            f"beta range invalid: need 0 < beta_start <= beta_end < 1, "
            f"got beta_start={beta_start}, beta_end={beta_end}"
        )
    if not 1 <= num_ddim_steps <= num_steps:
        raise ConfigurationError(
            f"num_ddim_steps must be in 1..num_steps={num_steps}, got {num_ddim_steps}"
        )

    if num_steps == 1:
        betas = torch.tensor([beta_start], dtype=torch.float64)
    else:
        betas = torch.linspace(beta_start, beta_end, num_steps, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    alpha_bars_prev = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bars[:-1]])

    posterior_vars = betas * (1.0 - alpha_bars_prev) / (1.0 - alpha_bars)
    # t=1 has zero posterior variance; clip its log to the t=2 value so the
    # learned-covariance interpolation stays finite (standard learned-variance recipe).
    if num_steps > 1:
        clipped = torch.cat([posterior_vars[1:2], posterior_vars[1:]])
    else:
        clipped = betas.clone()
    posterior_log_vars = torch.log(clipped)

    stride = num_steps // num_ddim_steps
    ddim = tuple(sorted(num_steps - i * stride for i in range(num_ddim_steps)))

    return Schedule(
        num_steps=num_steps,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        posterior_vars=posterior_vars,
        posterior_log_vars=posterior_log_vars,
        ddim_steps=ddim,
    )


def _expand(coef: Tensor, target: Tensor) -> Tensor:
    """Broadcast a scalar or per-sample coefficient over trailing dims of `target`."""
    coef = coef.to(target.dtype)
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (target.ndim - coef.ndim))


def q_sample(z0: Tensor, t: int | Tensor, eps: Tensor, s: Schedule) -> Tensor:
    """Forward-noise clean latents to step t: sqrt(ab_t) z0 + sqrt(1-ab_t) eps."""
    if z0.shape != eps.shape:
        raise ContractError(f"z0 shape {tuple(z0.shape)} != eps shape {tuple(eps.shape)}")
    ab = s.alpha_bar(t)
    return _expand(ab.sqrt(), z0) * z0 + _expand((1.0 - ab).sqrt(), z0) * eps


def ddpm_posterior(
    pred: NoisePrediction, z_t: Tensor, t: int | Tensor, s: Schedule
) -> tuple[Tensor, Tensor]:
    """Mean and variance of the reverse step p(z_{t-1} | z_t).

    The mean is the standard noise-prediction reparameterization; the variance
    interpolates between beta_t and the posterior variance in log space, with
    the raw coefficient mapped affinely from [-1, 1] to [0, 1] and clamped.
    """
    beta = s.beta(t)
    alpha = s.alpha(t)
    ab = s.alpha_bar(t)

    mean = _expand(alpha.rsqrt(), z_t) * (
        z_t - _expand(beta / (1.0 - ab).sqrt(), z_t) * pred.eps
    )

    frac = ((pred.v + 1.0) / 2.0).clamp(0.0, 1.0)
    log_var = frac * _expand(beta.log(), z_t) + (1.0 - frac) * _expand(
        s.posterior_log_var(t), z_t
    )
    return mean, log_var.exp()


def ddim_step(
    pred_eps: Tensor, z_t: Tensor, t: int, t_prev: int, s: Schedule
) -> Tensor:
    """One deterministic DDIM update from step t down to t_prev (eta = 0).

    The implied clean latent is clamped to [-1, 1] before re-noising;
    t_prev = 0 returns the clamped clean estimate directly.
    """
    if t_prev >= t:
        raise ContractError(f"ddim ordering violated: t_prev={t_prev} must be < t={t}")
    ab_t = s.alpha_bar(t)
    ab_prev = s.alpha_bar(t_prev)

    z0_hat = (z_t - _expand((1.0 - ab_t).sqrt(), z_t) * pred_eps) * _expand(
        ab_t.rsqrt(), z_t
    )
    z0_hat = z0_hat.clamp(-1.0, 1.0)
    return _expand(ab_prev.sqrt(), z_t) * z0_hat + _expand(
        (1.0 - ab_prev).sqrt(), z_t
    ) * pred_eps


def ddim_pairs(s: Schedule) -> list[tuple[int, int]]:
    """(t, t_prev) pairs traversing the sub-schedule from T down to 0."""
    steps = list(s.ddim_steps)
    return list(zip(reversed(steps), reversed([0] + steps[:-1])))


def gaussian_kl(
    mean_q: Tensor, log_var_q: Tensor, mean_p: Tensor, log_var_p: Tensor
) -> Tensor:
    """Elementwise KL(q || p) between diagonal Gaussians."""
    return 0.5 * (
        log_var_p
        - log_var_q
        + (log_var_q - log_var_p).exp()
        + (mean_q - mean_p).pow(2) * (-log_var_p).exp()
        - 1.0
    )


def vlb_term(
    pred: NoisePrediction, z0: Tensor, z_t: Tensor, t: int | Tensor, s: Schedule,
    detach_mean: bool = True,
) -> Tensor:
    """Per-element Gaussian KL between the true posterior and the model's
    reverse step, averaged over elements.

    Only the covariance is trained through this term: the model mean enters
    detached, following the learned-variance recipe this parameterization
    comes from. detach_mean=False lifts that stop-gradient (finite-difference
    checks cannot represent it).
    """
    if z0.shape != z_t.shape or pred.eps.shape != z_t.shape:
        raise ContractError("vlb_term shape mismatch between z0, z_t and prediction")
    beta = s.beta(t)
    alpha = s.alpha(t)
    ab = s.alpha_bar(t)
    t_prev = (t - 1) if isinstance(t, int) else t - 1
    ab_prev = s.alpha_bar(t_prev)

    coef_z0 = ab_prev.sqrt() * beta / (1.0 - ab)
    coef_zt = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab)
    q_mean = _expand(coef_z0, z_t) * z0 + _expand(coef_zt, z_t) * z_t
    q_log_var = _expand(s.posterior_log_var(t), z_t)

    eps = pred.eps.detach() if detach_mean else pred.eps
    p_mean, p_var = ddpm_posterior(NoisePrediction(eps=eps, v=pred.v), z_t, t, s)
    p_log_var = p_var.log()

    q_log_var = q_log_var.expand_as(p_log_var)
    return gaussian_kl(q_mean, q_log_var, p_mean, p_log_var).mean()


def cfg_combine(eps_cond: Tensor, eps_uncond: Tensor, scale: float) -> Tensor:
    """Classifier-free guidance: uncond + scale * (cond - uncond)."""
    if eps_cond.shape != eps_uncond.shape:
        raise ContractError(
            f"cfg shapes differ: {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}"
        )
    return eps_uncond + scale * (eps_cond - eps_uncond)
