"""Oracle-equivalence and invariant suites run on a random tiny model.

Each suite returns (name, passed, detail). The causality suite is also run
against a deliberately corrupted model (temporal mask disabled) as a
negative control: the run only counts as passing if that control fails.
"""

from __future__ import annotations

import dataclasses

import torch

from .inference import InferenceConfig, KVCache, cache_append, generate, make_cache
from .model import CausalVideoModel, ModelConfig
from .schedule import Schedule, ddim_pairs, ddim_step, make_schedule, q_sample


def _tiny_config(**overrides) -> ModelConfig:
    base = dict(
        num_blocks=2,
        hidden_dim=32,
        num_heads=4,
        head_dim=8,
        patch_size=4,
        max_frames=12,
        latent_shape=(8, 8, 3),
        caption_vocab_size=16,
        caption_len=3,
        sub_prompt_len=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


def _random_model(cfg: ModelConfig, seed: int) -> CausalVideoModel:
    model = CausalVideoModel(cfg).double()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.25)
    model.eval()
    return model


def _causality_violations(model: CausalVideoModel, cases: int, seed: int) -> int:
    """Count cases where changing future frames moved outputs at frames <= i."""
    cfg = model.config
    h, w, c = cfg.latent_shape
    gen = torch.Generator().manual_seed(seed)
    violations = 0
    for _ in range(cases):
        n = int(torch.randint(3, 7, (1,), generator=gen))
        cut = int(torch.randint(1, n, (1,), generator=gen))
        latents = torch.rand((1, n, h, w, c), generator=gen, dtype=torch.float64) * 2 - 1
        t = int(torch.randint(1, 50, (1,), generator=gen))
        timesteps = torch.full((1, n), t, dtype=torch.long)
        timesteps[0, 0] = 0  # one prompt frame so enhancement has a bank
        caption = torch.randint(1, cfg.caption_vocab_size, (1, cfg.caption_len),
                                generator=gen)
        with torch.no_grad():
            base = model(latents, timesteps, caption)
            mutated = latents.clone()
            mutated[0, cut:] = torch.rand(
                (n - cut, h, w, c), generator=gen, dtype=torch.float64) * 2 - 1
            moved = model(mutated, timesteps, caption)
        if not torch.equal(base.eps[:, :cut], moved.eps[:, :cut]) or not torch.equal(
            base.v[:, :cut], moved.v[:, :cut]
        ):
            violations += 1
    return violations


def suite_causality(seed: int = 0, cases: int = 20):
    model = _random_model(_tiny_config(), seed)
    violations = _causality_violations(model, cases, seed + 1)
    if violations:
        return "causality", False, f"{violations}/{cases} cases leaked future frames"

    corrupted = _random_model(_tiny_config(causal_temporal=False), seed)
    control = _causality_violations(corrupted, cases, seed + 1)
    if control == 0:
        return "causality", False, "negative control did not detect a disabled mask"
    return "causality", True, f"0/{cases} leaks; control flagged {control}/{cases}"


def suite_duplication_invariance(seed: int = 0, tol: float = 1e-6):
    h, w, c = (8, 8, 3)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for sp in (1, 2, 4):
        enhanced = _random_model(_tiny_config(sub_prompt_len=sp), seed)
        plain = _random_model(_tiny_config(sub_prompt_len=0), seed)
        n = 3
        latents = torch.rand((1, n, h, w, c), generator=gen, dtype=torch.float64) * 2 - 1
        timesteps = torch.zeros(1, n, dtype=torch.long)  # all prompt frames
        caption = torch.ones(1, 3, dtype=torch.long)
        with torch.no_grad():
            a = enhanced(latents, timesteps, caption)
            b = plain(latents, timesteps, caption)
        worst = max(worst, float((a.eps - b.eps).abs().max()))
    ok = worst <= tol
    return "duplication-invariance", ok, f"max deviation {worst:.3e} (tol {tol})"


def suite_kv_equivalence(seed: int = 0, tol: float = 1e-4):
    cfg = _tiny_config(max_frames=8)
    model = _random_model(cfg, seed)
    schedule = make_schedule(50, 1e-4, 0.02, 10)
    first = torch.rand(cfg.latent_shape, generator=torch.Generator().manual_seed(seed),
                       dtype=torch.float64) * 2 - 1
    caption = torch.tensor([1, 2, 3])
    icfg = InferenceConfig(chunk_len=3, cfg_scale=2.0, seed=seed, use_cache=True)
    with torch.no_grad():
        cached = generate(first, caption, 3, model, schedule, icfg)
        ref = generate(first, caption, 3, model, schedule,
                       dataclasses.replace(icfg, use_cache=False))
    diff = float((cached - ref).abs().max())
    return "kv-equivalence", diff <= tol, f"max |diff| {diff:.3e} (tol {tol})"


def suite_ring_buffer(seed: int = 0, cases: int = 1000):
    gen = torch.Generator().manual_seed(seed)
    for case in range(cases):
        cap = int(torch.randint(1, 9, (1,), generator=gen))
        cache = KVCache(
            capacity=cap,
            bank_capacity=2,
            layers=[_empty_layer()],
            prompt_bank=[torch.zeros(0, 1, 1)],
        )
        next_id = 0
        for _ in range(int(torch.randint(1, 9, (1,), generator=gen))):
            n_new = int(torch.randint(1, cap + 1, (1,), generator=gen))
            updates = [(
                torch.arange(next_id, next_id + n_new, dtype=torch.float32)
                .reshape(1, 1, n_new, 1),
                torch.zeros(1, 1, n_new, 1),
                torch.zeros(n_new, 1, 1),
            )]
            cache_append(cache, updates, n_new)
            next_id += n_new
            ids = cache.layers[0].k.flatten().tolist()
            if cache.frame_count > cap:
                return "ring-buffer", False, f"case {case}: overflow to {cache.frame_count}"
            if ids != list(range(next_id - cache.frame_count, next_id)):
                return "ring-buffer", False, f"case {case}: not an oldest-first suffix: {ids}"
            if list(cache.frame_ids) != list(
                range(next_id - cache.frame_count, next_id)
            ):
                return "ring-buffer", False, f"case {case}: frame id bookkeeping drifted"
    return "ring-buffer", True, f"{cases} randomized append sequences held the invariants"


def _empty_layer():
    from .inference import LayerKV

    return LayerKV(k=torch.zeros(1, 1, 0, 1), v=torch.zeros(1, 1, 0, 1))


def suite_schedule(seed: int = 0):
    gen = torch.Generator().manual_seed(seed)
    for _ in range(20):
        steps = int(torch.randint(2, 200, (1,), generator=gen))
        b1 = float(torch.rand((), generator=gen)) * 1e-3 + 1e-5
        b2 = b1 + float(torch.rand((), generator=gen)) * 0.05
        s = make_schedule(steps, b1, b2, steps)
        if not (s.alpha_bars[1:] < s.alpha_bars[:-1]).all():
            return "schedule", False, "alpha_bars not strictly decreasing"
        prod = torch.ones((), dtype=torch.float64)
        for i in range(steps):
            prod = prod * (1.0 - s.betas[i])
        if abs(float(prod - s.alpha_bars[-1])) > 1e-12 * max(1.0, abs(float(prod))):
            return "schedule", False, "cumulative product drifted"

    s = make_schedule(40, 1e-4, 0.02, 40)
    z0 = torch.rand(4, 4, generator=gen) * 1.6 - 0.8
    eps = torch.randn(4, 4, generator=gen)
    z = q_sample(z0, s.num_steps, eps, s)
    for t, t_prev in ddim_pairs(s):
        z = ddim_step(eps, z, t, t_prev, s)
    err = float((z - z0).abs().max())
    if err > 1e-4:
        return "schedule", False, f"ddim reconstruction error {err:.3e}"
    return "schedule", True, "monotone products and ddim reconstruction hold"


def run_selftest(seed: int = 0) -> list[tuple[str, bool, str]]:
    return [
        suite_schedule(seed),
        suite_causality(seed),
        suite_duplication_invariance(seed),
        suite_kv_equivalence(seed),
        suite_ring_buffer(seed),
    ]
