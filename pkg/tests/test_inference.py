import dataclasses
import hashlib
import math

import pytest
import torch

from arvid.errors import ContractError
from arvid.inference import (
    InferenceConfig,
    KVCache,
    LayerKV,
    attention_score_rows,
    bench_cache,
    cache_append,
    cached_causal_attention,
    denoise_chunk,
    generate,
    make_cache,
    new_state,
    write_cache_from_clean,
)
from arvid.model import causal_temporal_attention
from arvid.schedule import make_schedule
from tests.test_model import brute_force_masked_attention, random_model, tiny_config


def toy_cache(capacity: int, bank_capacity: int = 2) -> KVCache:
    return KVCache(
        capacity=capacity,
        bank_capacity=bank_capacity,
        layers=[LayerKV(k=torch.zeros(1, 1, 0, 1), v=torch.zeros(1, 1, 0, 1))],
        prompt_bank=[torch.zeros(0, 1, 1)],
    )


def toy_updates(first_id: int, n: int):
    ids = torch.arange(first_id, first_id + n, dtype=torch.float32)
    return [(ids.reshape(1, 1, n, 1), ids.reshape(1, 1, n, 1), ids.reshape(n, 1, 1))]


def test_cache_append_counts_from_capacity_example():
    # 48 resident + 16 new at capacity 49: evict 15, keep the newest 49.
    cache = toy_cache(49)
    cache_append(cache, toy_updates(0, 48), 48)
    cache_append(cache, toy_updates(48, 16), 16)
    assert cache.frame_count == 49
    assert list(cache.frame_ids) == list(range(15, 64))
    assert cache.layers[0].k.flatten().tolist() == list(range(15, 64))


def test_cache_append_empty_plus_one():
    cache = toy_cache(5)
    cache_append(cache, toy_updates(0, 1), 1)
    assert cache.frame_count == 1
    assert list(cache.frame_ids) == [0]


def test_cache_append_steady_state():
    cache = toy_cache(4)
    cache_append(cache, toy_updates(0, 4), 4)
    cache_append(cache, toy_updates(4, 3), 3)
    assert cache.frame_count == 4
    assert list(cache.frame_ids) == [3, 4, 5, 6]


def test_cache_append_rejects_oversized_chunk():
    cache = toy_cache(3)
    with pytest.raises(ContractError, match="capacity"):
        cache_append(cache, toy_updates(0, 4), 4)


def test_cache_append_bank_keeps_newest():
    cache = toy_cache(8, bank_capacity=2)
    cache_append(cache, toy_updates(0, 3), 3)
    assert cache.prompt_bank[0].flatten().tolist() == [1.0, 2.0]
    cache_append(cache, toy_updates(3, 1), 1)
    assert cache.prompt_bank[0].flatten().tolist() == [2.0, 3.0]


def test_ring_buffer_randomized_property():
    # Criterion 9 shape: randomized append sequences, never more than L
    # residents, always evicting oldest-first, ids a contiguous suffix.
    gen = torch.Generator().manual_seed(0)
    for _ in range(10_000):
        cap = int(torch.randint(1, 8, (1,), generator=gen))
        cache = toy_cache(cap)
        next_id = 0
        for _ in range(int(torch.randint(1, 6, (1,), generator=gen))):
            n = int(torch.randint(1, cap + 1, (1,), generator=gen))
            cache_append(cache, toy_updates(next_id, n), n)
            next_id += n
            assert cache.frame_count <= cap
            expect = list(range(next_id - cache.frame_count, next_id))
            assert list(cache.frame_ids) == expect
            assert cache.layers[0].k.flatten().tolist() == expect


def test_cached_causal_attention_empty_prefix_equals_plain():
    gen = torch.Generator().manual_seed(1)
    q = torch.randn(4, 8, generator=gen, dtype=torch.float64)
    k = torch.randn(4, 8, generator=gen, dtype=torch.float64)
    v = torch.randn(4, 8, generator=gen, dtype=torch.float64)
    out = cached_causal_attention(q, k, v, 0)
    assert torch.allclose(out, causal_temporal_attention(q, k, v))


def test_cached_causal_attention_matches_full_sequence_suffix():
    gen = torch.Generator().manual_seed(2)
    kk, n, d = 5, 3, 8
    q = torch.randn(kk + n, d, generator=gen, dtype=torch.float64)
    k = torch.randn(kk + n, d, generator=gen, dtype=torch.float64)
    v = torch.randn(kk + n, d, generator=gen, dtype=torch.float64)
    full = brute_force_masked_attention(q, k, v, lambda i, j: j <= i)
    out = cached_causal_attention(q[kk:], k, v, kk)
    assert float((out - full[kk:]).abs().max()) < 1e-6


def test_cached_causal_attention_row_count_contract():
    q = torch.zeros(3, 4)
    k = torch.zeros(6, 4)
    with pytest.raises(ContractError, match="prefix"):
        cached_causal_attention(q, k, k, 5)


def equivalence_fixture(seed=0, capacity=8):
    cfg = tiny_config(max_frames=capacity)
    model = random_model(cfg, seed=seed)
    schedule = make_schedule(40, 1e-4, 0.02, 8)
    gen = torch.Generator().manual_seed(seed + 100)
    first = torch.rand(8, 8, 3, generator=gen, dtype=torch.float64) * 2 - 1
    caption = torch.tensor([1, 2, 3])
    return model, schedule, first, caption


def test_denoise_chunk_deterministic():
    model, schedule, first, caption = equivalence_fixture()
    icfg = InferenceConfig(chunk_len=3, cfg_scale=2.0, seed=5)
    with torch.no_grad():
        a_state = new_state(model, first, caption, icfg)
        a = denoise_chunk(a_state, model, schedule, icfg.cfg_scale)
        b_state = new_state(model, first, caption, icfg)
        b = denoise_chunk(b_state, model, schedule, icfg.cfg_scale)
    assert torch.equal(a, b)


def test_cfg_scale_irrelevant_for_null_caption():
    model, schedule, first, _ = equivalence_fixture()
    null = torch.zeros(3, dtype=torch.long)
    outs = []
    for scale in (0.0, 7.5):
        icfg = InferenceConfig(chunk_len=3, cfg_scale=scale, seed=6)
        with torch.no_grad():
            state = new_state(model, first, null, icfg)
            outs.append(denoise_chunk(state, model, schedule, scale))
    assert float((outs[0] - outs[1]).abs().max()) < 1e-12


def _cache_digest(cache):
    h = hashlib.sha256()
    for entry in cache.layers:
        h.update(entry.k.numpy().tobytes())
        h.update(entry.v.numpy().tobytes())
    for bank in cache.prompt_bank:
        h.update(bank.numpy().tobytes())
    h.update(str((cache.first_frame_id, cache.frame_count)).encode())
    return h.hexdigest()


def test_cache_immutable_during_denoise():
    model, schedule, first, caption = equivalence_fixture()
    icfg = InferenceConfig(chunk_len=3, cfg_scale=2.0, seed=7)
    with torch.no_grad():
        state = new_state(model, first, caption, icfg)
        before = (_cache_digest(state.cache_cond), _cache_digest(state.cache_uncond))
        denoise_chunk(state, model, schedule, icfg.cfg_scale)
        after = (_cache_digest(state.cache_cond), _cache_digest(state.cache_uncond))
    assert before == after


def test_written_kv_matches_full_recompute_at_t0():
    model, schedule, first, caption = equivalence_fixture()
    icfg = InferenceConfig(chunk_len=3, cfg_scale=None, seed=8)
    with torch.no_grad():
        state = new_state(model, first, caption, icfg)
        chunk = denoise_chunk(state, model, schedule, None)
        write_cache_from_clean(state, model, chunk)
        state.frames = torch.cat([state.frames, chunk])

        frames = state.frames
        n = frames.shape[0]
        _, updates = model(
            frames,
            torch.zeros(1, n, dtype=torch.long),
            caption.reshape(1, -1),
            frame_ids=torch.arange(n),
            collect_cache=True,
        )
    for layer_idx, (k_ref, v_ref, bank_ref) in enumerate(updates):
        entry = state.cache_cond.layers[layer_idx]
        assert float((entry.k - k_ref).abs().max()) < 1e-5
        assert float((entry.v - v_ref).abs().max()) < 1e-5
        bank = state.cache_cond.prompt_bank[layer_idx]
        assert float((bank - bank_ref[-bank.shape[0]:]).abs().max()) < 1e-5


def test_write_never_mutates_resident_entries():
    model, schedule, first, caption = equivalence_fixture()
    icfg = InferenceConfig(chunk_len=2, cfg_scale=None, seed=9)
    with torch.no_grad():
        state = new_state(model, first, caption, icfg)
        k_before = state.cache_cond.layers[0].k.clone()
        chunk = denoise_chunk(state, model, schedule, None)
        write_cache_from_clean(state, model, chunk)
    k_after = state.cache_cond.layers[0].k
    assert torch.equal(k_after[:, :, : k_before.shape[2]], k_before)


def test_bank_holds_newest_frames_after_write():
    model, schedule, first, caption = equivalence_fixture()
    icfg = InferenceConfig(chunk_len=3, cfg_scale=None, seed=10)
    with torch.no_grad():
        state = new_state(model, first, caption, icfg)
        chunk = denoise_chunk(state, model, schedule, None)
        write_cache_from_clean(state, model, chunk)
    bank = state.cache_cond.prompt_bank[0]
    assert bank.shape[0] == model.config.bank_len == 2


def test_generate_frame_counts():
    model, schedule, first, caption = equivalence_fixture()
    icfg = InferenceConfig(chunk_len=4, cfg_scale=None, seed=11)
    with torch.no_grad():
        video = generate(first, caption, 1, model, schedule, icfg)
    assert video.shape[0] == 5

    icfg = InferenceConfig(chunk_len=2, cfg_scale=None, seed=11)
    with torch.no_grad():
        video = generate(first, caption, 3, model, schedule, icfg)
    assert video.shape[0] == 7
    with pytest.raises(ContractError, match="num_chunks"):
        generate(first, caption, 0, model, schedule, icfg)


def test_generate_cache_on_off_equivalence():
    model, schedule, first, caption = equivalence_fixture(seed=3)
    icfg = InferenceConfig(chunk_len=3, cfg_scale=2.0, seed=12, use_cache=True)
    with torch.no_grad():
        cached = generate(first, caption, 4, model, schedule, icfg)
        plain = generate(first, caption, 4, model, schedule,
                         dataclasses.replace(icfg, use_cache=False))
    assert cached.shape == plain.shape
    assert float((cached - plain).abs().max()) <= 1e-4


def test_generate_equivalence_through_eviction():
    # capacity 6 with chunks of 3 forces dequeuing from the second append on.
    model, schedule, first, caption = equivalence_fixture(seed=4, capacity=6)
    icfg = InferenceConfig(chunk_len=3, cfg_scale=1.5, seed=13, use_cache=True)
    with torch.no_grad():
        cached = generate(first, caption, 5, model, schedule, icfg)
        plain = generate(first, caption, 5, model, schedule,
                         dataclasses.replace(icfg, use_cache=False))
    assert cached.shape[0] == 16
    assert float((cached - plain).abs().max()) <= 1e-4


def test_generate_outputs_stay_in_range():
    model, schedule, first, caption = equivalence_fixture(seed=5)
    icfg = InferenceConfig(chunk_len=3, cfg_scale=None, seed=14)
    with torch.no_grad():
        video = generate(first, caption, 2, model, schedule, icfg)
    assert float(video.abs().max()) <= 1.0


def test_attention_score_rows_formulas():
    assert attention_score_rows(48, 16, cached=True) == 16 * 64
    assert attention_score_rows(48, 16, cached=False) == 64 * 64
    assert attention_score_rows(0, 8, True) == attention_score_rows(0, 8, False)


def test_bench_counts_match_closed_form():
    cfg = tiny_config(sub_prompt_len=0, max_frames=6)
    model = random_model(cfg, seed=6, dtype=torch.float32)
    schedule = make_schedule(20, 1e-4, 0.02, 2)
    with torch.no_grad():
        report = bench_cache(model, schedule, num_chunks=4, chunk_len=2,
                             capacity=6, repeats=1)
    n = 2
    ks = [min(i * n, 6) for i in range(4)]
    assert [c.prefix_len for c in report.chunks] == ks
    assert report.cached_score_total == sum(n * (k + n) for k in ks)
    assert report.uncached_score_total == sum((k + n) ** 2 for k in ks)
    assert report.chunks[0].cached_score_rows == report.chunks[0].uncached_score_rows
    # beyond the first chunk the cached mode does strictly less work
    for c in report.chunks[1:]:
        assert c.cached_score_rows < c.uncached_score_rows
    text = "\n".join(report.lines())
    assert f"score_rows_cached={report.cached_score_total}" in text


def test_bench_wall_time_cached_faster_beyond_first_chunk():
    cfg = tiny_config(sub_prompt_len=0, max_frames=12)
    model = random_model(cfg, seed=7, dtype=torch.float32)
    schedule = make_schedule(20, 1e-4, 0.02, 3)
    with torch.no_grad():
        report = bench_cache(model, schedule, num_chunks=3, chunk_len=4,
                             capacity=12, repeats=3)
    later = report.chunks[-1]
    assert later.cached_seconds < later.uncached_seconds
