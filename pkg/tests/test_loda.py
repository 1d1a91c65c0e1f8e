import math

import numpy as np
import pytest

from conceptsplit import tensor as T
from conceptsplit.adapters import AdapterSet, ConceptAdapter
from conceptsplit.loda import (AFGMaskSet, InferenceConfig, aggregate_attention, apply_afg,
                               compute_afg_masks, eta_schedule, harmonic_mean, kl_loss, klh_of,
                               loda_sample, lkl_loss, nearest_rank_threshold, pairwise_kl,
                               smooth_and_normalize, stage1_update)
from conceptsplit.model import initial_latent
from conceptsplit.sampling import sample
from conceptsplit.tensor import ContractError, Tensor
from conceptsplit.train import NumericError


def test_config_defaults_and_validation():
    c = InferenceConfig()
    assert (c.N, c.tau, c.gamma, c.p, c.m, c.steps, c.guidance) == (10, 1.0, 0.9, 3.0, -1e8, 50, 7.5)
    assert c.validate() == []
    errs = InferenceConfig(N=60, gamma=1.0, m=5.0, p=math.inf).validate()
    assert len(errs) == 4
    assert InferenceConfig(p=5.0).validate() == []


def test_aggregate_examples(verify, rng):
    m = rng.random((1, 1, 16, 5))
    agg = aggregate_attention([m], [1, 3], 4, 4)
    np.testing.assert_array_equal(agg.numpy()[..., 0], m[0, 0, :, 1].reshape(4, 4))
    two = aggregate_attention([m, m], [1, 3], 4, 4)
    np.testing.assert_allclose(two.numpy(), agg.numpy(), rtol=0, atol=1e-15)
    maps = [rng.random((1, 2, 16, 5)) for _ in range(3)]
    agg = aggregate_attention(maps, [0, 4], 4, 4)
    for j, s in enumerate([0, 4]):
        ref = np.zeros(16)
        for mm in maps:
            for h in range(2):
                ref += mm[0, h, :, s]
        np.testing.assert_allclose(agg.numpy()[..., j], (ref / 6).reshape(4, 4), atol=1e-9)
    with pytest.raises(ContractError, match="pad"):
        aggregate_attention(maps, [0, 3], 4, 4, n_words=3)


def test_smooth_and_normalize_examples(verify):
    u = smooth_and_normalize(np.full((16, 16), 0.3)).data
    np.testing.assert_allclose(u, 1 / 256, rtol=1e-12)
    z = smooth_and_normalize(np.zeros((16, 16))).data
    np.testing.assert_allclose(z, 1 / 256, rtol=1e-12)
    one = np.zeros((16, 16))
    one[5, 7] = 1.0
    bump = smooth_and_normalize(one).data
    assert abs(bump.sum() - 1) < 1e-9
    g = np.exp(-0.5 * np.arange(-1, 2) ** 2)
    g /= g.sum()
    np.testing.assert_allclose(bump[4:7, 6:9], np.outer(g, g), atol=1e-11)
    assert bump.min() >= 1e-12 / 2


def test_kl_examples(verify):
    P, Q = np.array([[0.75, 0.25]]), np.array([[0.25, 0.75]])
    assert abs(float(pairwise_kl(P, Q).data) - 0.5 * math.log(3)) < 1e-12
    assert abs(0.5 * math.log(3) - 0.549306) < 1e-6
    assert float(pairwise_kl(P, P).data) == 0.0
    a = float(pairwise_kl(np.array([0.9, 0.1]), np.array([0.5, 0.5])).data)
    b = float(pairwise_kl(np.array([0.5, 0.5]), np.array([0.9, 0.1])).data)
    assert abs(a - b) > 1e-3


def test_harmonic_mean_examples(verify):
    hm = lambda v: float(harmonic_mean([Tensor(np.array(x)) for x in v]).data)
    assert abs(hm([0.7, 0.7, 0.7]) - 0.7) < 1e-15
    assert abs(hm([1.0, 3.0]) - 1.5) < 1e-12
    assert abs(hm([2.0, 6.0, 6.0]) - 3.6) < 1e-12
    assert hm([0.0, 1.0]) == pytest.approx(2e-12, rel=1e-9)
    with pytest.raises(ContractError):
        harmonic_mean([])


def test_kl_loss_and_eta(verify):
    assert float(kl_loss(1.5, 1.0).data) == 0.0
    assert float(kl_loss(0.4, 1.0).data) == pytest.approx(0.6)
    assert eta_schedule(200, 200) == 20.0
    assert eta_schedule(0, 200) == 40.0
    assert eta_schedule(100, 200) == 30.0
    with pytest.raises(ContractError):
        eta_schedule(201, 200)


def test_klh_uses_ordered_pairs(verify, rng):
    a = rng.random((4, 4, 3))
    from conceptsplit.loda import AttentionAggregate
    agg = AttentionAggregate(Tensor(a), (0, 1, 2), 0)
    P = [smooth_and_normalize(a[..., j]).data for j in range(3)]
    kls = [np.sum(P[i] * np.log(P[i] / P[j])) for i in range(3) for j in range(3) if i != j]
    ref = len(kls) / sum(1 / k for k in kls)
    assert abs(float(klh_of(agg).data) - ref) < 1e-12
    with pytest.raises(ContractError):
        klh_of(AttentionAggregate(Tensor(a[..., :1]), (0,), 0))


def _prompt(model):
    words = "a red square and a blue circle".split()
    return words, model.embedder.encode(words)[None], [2, 6]


def test_stage1_safeguard_returns_input(small_model, rng):
    words, c, S = _prompt(small_model)
    z = rng.standard_normal((1,) + small_model.config.latent_shape)
    _, klh, _ = lkl_loss(small_model, z, c, 50, S, InferenceConfig(), None, len(words))
    cfg = InferenceConfig(tau=float(klh.data) * 0.5)
    z2, info = stage1_update(small_model, z, c, 50, S, cfg, None, len(words))
    assert z2 is z or z2.tobytes() == z.tobytes()
    assert info["updated"] is False and info["lkl"] == 0.0


def test_stage1_step_descends(small_model, rng):
    words, c, S = _prompt(small_model)
    cfg = InferenceConfig()
    z = rng.standard_normal((1,) + small_model.config.latent_shape)
    L0 = float(lkl_loss(small_model, z, c, 120, S, cfg, None, len(words))[0].data)
    z2, info = stage1_update(small_model, z, c, 120, S, cfg, None, len(words))
    assert info["eta"] == eta_schedule(120, 200) and info["updated"]
    assert float(lkl_loss(small_model, z2, c, 120, S, cfg, None, len(words))[0].data) <= L0


def test_stage1_nan_gradient_aborts(small_model, rng):
    words, c, S = _prompt(small_model)
    small_model.params["block0/cross/Wq"].data[0, 0] = np.nan
    z = rng.standard_normal((1,) + small_model.config.latent_shape)
    with pytest.raises((NumericError, ContractError)):
        with np.errstate(invalid="ignore"):
            stage1_update(small_model, z, c, 10, S, InferenceConfig(tau=100.0), None, len(words))


def test_nearest_rank_threshold():
    v = np.arange(1, 11, dtype=float)
    assert nearest_rank_threshold(v, 0.9) == 9.0
    assert nearest_rank_threshold(v, 0.0) == 1.0
    assert nearest_rank_threshold(v, 0.95) == 10.0


def test_mask_examples(rng):
    flat = np.full((16, 16, 1), 0.2)
    m = compute_afg_masks(flat, 0.9)
    assert m.masks.all() and m.thresholds[0] == pytest.approx(0.2)
    rand = rng.random((16, 16, 2))
    assert compute_afg_masks(rand, 0.0).masks.all()
    assert compute_afg_masks(rand, 0.9).counts() == [26, 26]


def _masks(k, H, W, rng):
    return AFGMaskSet(tuple(range(k)), np.zeros(k), rng.random((k, H, W)) < 0.4)


def test_apply_afg_examples(verify, rng):
    L = rng.standard_normal((1, 2, 16, 5))
    empty = AFGMaskSet((), np.zeros(0), np.zeros((0, 4, 4), bool))
    assert apply_afg(L, empty, 3, -1e8).data.tobytes() == L.tobytes()
    masks = AFGMaskSet((1, 3), np.zeros(2), np.zeros((2, 4, 4), bool))
    masks.masks[0, 0, 0] = masks.masks[1, 0, 0] = True   # contested cell
    masks.masks[0, 1, 1] = True                          # token 1 only
    masks.masks[1, 2, 2] = True                          # token 3 only
    out = apply_afg(L, masks, 3.0, -1e8).data
    d = out - L
    assert d[..., 0, 1][0, 0] == pytest.approx(3 - 1e8) and d[..., 0, 3][0, 0] == pytest.approx(3 - 1e8)
    assert np.all(d[..., 5, 1] == 3.0) and np.all(d[..., 5, 3] == -1e8)
    for col in (0, 2, 4):
        assert out[..., col].tobytes() == L[..., col].tobytes()
    attn = T.softmax(Tensor(out)).data
    assert np.all(attn[..., 10, 1] < 1e-8)
    with pytest.raises(ContractError, match="resolution"):
        apply_afg(np.zeros((1, 2, 9, 5)), masks, 3.0, -1e8)


def test_loda_reduces_to_plain_sampling(small_model):
    words, _, S = _prompt(small_model)
    cfg = InferenceConfig(N=0, afg=False, steps=4)
    z_T = initial_latent(2, small_model.config.latent_shape)
    z_a, recs, _ = loda_sample(small_model, z_T, words, S, cfg)
    z_b, _ = sample(small_model, words, steps=4, z_T=z_T, record=False)
    assert z_a.tobytes() == z_b.tobytes()
    assert not any(r.stage1 or r.afg for r in recs)


def test_loda_schedule_and_determinism(small_model):
    words, _, S = _prompt(small_model)
    cfg = InferenceConfig(N=2, steps=5)
    z_T = initial_latent(0, small_model.config.latent_shape)
    za, ra, fa = loda_sample(small_model, z_T, words, S, cfg)
    zb, rb, _ = loda_sample(small_model, z_T, words, S, cfg)
    assert za.tobytes() == zb.tobytes()
    assert [r.to_json() for r in ra] == [r.to_json() for r in rb]
    assert [r.stage1 for r in ra] == [True, True, False, False, False]
    assert [r.afg for r in ra] == [False, False, True, True, True]
    assert all(r.afg_mask_counts == [7, 7] for r in ra[2:])
    assert fa["masks"].shape == (2, 8, 8)


def test_loda_stage1_needs_two_tokens(small_model):
    words, _, _ = _prompt(small_model)
    z_T = initial_latent(0, small_model.config.latent_shape)
    with pytest.raises(ContractError):
        loda_sample(small_model, z_T, words, [2], InferenceConfig(stage1=True, steps=2))
    _, recs, _ = loda_sample(small_model, z_T, words, [2], InferenceConfig(steps=3, N=1))
    assert not any(r.stage1 for r in recs)


def test_loda_with_adapters_runs(small_model):
    words, _, S = _prompt(small_model)
    ads = [ConceptAdapter.fresh("x", "square", small_model), ConceptAdapter.fresh("y", "circle", small_model)]
    hooks = AdapterSet.bind(ads, small_model.embedder.positions(words))
    z_T = initial_latent(0, small_model.config.latent_shape)
    z_a, _, _ = loda_sample(small_model, z_T, words, S, InferenceConfig(steps=3, N=1), hooks)
    z_b, _, _ = loda_sample(small_model, z_T, words, S, InferenceConfig(steps=3, N=1))
    assert z_a.tobytes() == z_b.tobytes()
