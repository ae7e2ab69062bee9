import numpy as np
import pytest

import diffguide as dg
from diffguide.guidance import (
    GuidanceConfig,
    GuidanceDivergence,
    StabilizerConfig,
    adam,
    ema,
    guided_sample,
    identity,
    init_stabilizer_state,
    reverse_step,
    sample_batch,
    stabilize,
    unconditional_batch,
)
from diffguide.rng import substream
from diffguide.schedule import schedule_from_betas


# -- stabilizers --------------------------------------------------------------


def test_ema_beta_zero_passthrough():
    state = init_stabilizer_state(3)
    g = np.array([1.0, -2.0, 0.5])
    _, nu = stabilize(state, ema(0.0), g)
    assert np.array_equal(nu, g)


def test_ema_constant_input_recursion():
    state = init_stabilizer_state(1)
    cfg = ema(0.9)
    g = np.array([1.0])
    expected = [0.1, 0.19, 0.271]
    for want in expected:
        state, nu = stabilize(state, cfg, g)
        assert nu[0] == pytest.approx(want, abs=1e-15)


def test_adam_first_step_closed_form():
    eps = 1e-8
    state = init_stabilizer_state(1)
    state, nu = stabilize(state, adam(eps=eps), np.array([2.0]))
    m1 = 0.1 * 2.0
    v1 = 0.001 * 4.0
    assert nu[0] == pytest.approx(m1 / (np.sqrt(v1) + eps), abs=1e-12)
    assert nu[0] == pytest.approx(3.1623, abs=1e-4)


def test_adam_fixed_point_is_sign():
    cfg = adam()
    for g_val in (2.0, -0.3):
        state = init_stabilizer_state(1)
        g = np.array([g_val])
        for _ in range(10_000):
            state, nu = stabilize(state, cfg, g)
        assert nu[0] == pytest.approx(np.sign(g_val), abs=1e-3)


def test_identity_does_not_touch_state():
    state = init_stabilizer_state(2)
    new_state, nu = stabilize(state, identity(), np.array([1.0, 2.0]))
    assert np.array_equal(new_state.m, np.zeros(2))
    assert new_state.step == 1


def test_ema_one_homogeneous():
    rng = np.random.default_rng(0)
    gs = rng.standard_normal((20, 3))
    c = -2.7
    s1 = init_stabilizer_state(3)
    s2 = init_stabilizer_state(3)
    for g in gs:
        s1, nu1 = stabilize(s1, ema(0.95), g)
        s2, nu2 = stabilize(s2, ema(0.95), c * g)
    np.testing.assert_allclose(nu2, c * nu1, rtol=1e-12)


def test_adam_scale_invariant_on_constant_sequences():
    g = np.array([0.7])
    outs = []
    for c in (1.0, 100.0):
        state = init_stabilizer_state(1)
        for _ in range(50):
            state, nu = stabilize(state, adam(), c * g)
        outs.append(nu[0])
    assert outs[0] == pytest.approx(outs[1], abs=1e-6)


def test_stabilize_finite_for_finite_input():
    rng = np.random.default_rng(1)
    for cfg in (identity(), ema(0.99), adam()):
        state = init_stabilizer_state(4)
        for _ in range(30):
            g = rng.standard_normal(4) * 10.0 ** rng.integers(-8, 8)
            state, nu = stabilize(state, cfg, g)
            assert np.all(np.isfinite(nu))
    state = init_stabilizer_state(2)
    _, nu = stabilize(state, adam(), np.zeros(2))
    assert np.array_equal(nu, np.zeros(2))


def test_stabilize_is_pure():
    state = init_stabilizer_state(2)
    m_before = state.m.copy()
    stabilize(state, ema(0.9), np.ones(2))
    assert np.array_equal(state.m, m_before)
    assert state.step == 0


def test_stabilize_batch_rows_independent():
    # row-wise batched update equals per-row scalar updates, bitwise
    rng = np.random.default_rng(2)
    G = rng.standard_normal((3, 5, 2))  # 3 steps, 5 chains
    batch = init_stabilizer_state((5, 2))
    singles = [init_stabilizer_state(2) for _ in range(5)]
    for step in range(3):
        batch, nu_b = stabilize(batch, adam(), G[step])
        for i in range(5):
            singles[i], nu_s = stabilize(singles[i], adam(), G[step][i])
            assert np.array_equal(nu_b[i], nu_s)


def test_stabilizer_config_validation():
    with pytest.raises(ValueError):
        StabilizerConfig("ema", beta=1.0)
    with pytest.raises(ValueError):
        StabilizerConfig("adam", eps=0.0)
    with pytest.raises(ValueError):
        StabilizerConfig("momentum")
    with pytest.raises(ValueError):
        stabilize(init_stabilizer_state(2), ema(0.9), np.zeros(3))


def test_guidance_config_validation(h_oracle):
    with pytest.raises(ValueError):
        GuidanceConfig(classifier=h_oracle, target_class=0, scale=-1.0)
    with pytest.raises(ValueError):
        GuidanceConfig(classifier=h_oracle, target_class=0, path="x1pred")
    with pytest.raises(ValueError):
        GuidanceConfig(classifier=h_oracle, target_class=0, jacobian_mode="partial")


# -- reverse sampling ----------------------------------------------------------


def test_reverse_step_no_noise_limit(spec2):
    sch = schedule_from_betas([1e-13, 1e-13])
    dn = dg.AnalyticDenoiser(spec2, sch)
    x = np.array([0.4, -0.2])
    out = reverse_step(dn, sch, x, 2, np.random.default_rng(0))
    np.testing.assert_allclose(out, x, atol=1e-6)


def test_reverse_step_final_step_deterministic(small_denoiser, small_schedule):
    x = np.array([0.3, 0.9])
    a = reverse_step(small_denoiser, small_schedule, x, 1, np.random.default_rng(1))
    b = reverse_step(small_denoiser, small_schedule, x, 1, np.random.default_rng(999))
    assert np.array_equal(a, b)


def test_scale_zero_bit_identical_to_unguided(small_denoiser, small_schedule, h_nonrobust):
    for path in ("raw", "x0pred"):
        cfg = GuidanceConfig(
            classifier=h_nonrobust, target_class=1, scale=0.0, path=path, stabilizer=ema(0.9)
        )
        guided = sample_batch(small_denoiser, small_schedule, cfg, 8, 77)
        plain = unconditional_batch(small_denoiser, small_schedule, 8, 77)
        assert np.array_equal(guided.samples, plain.samples)


def test_single_chain_equals_batch_row_zero(small_denoiser, small_schedule, h_nonrobust):
    cfg = GuidanceConfig(
        classifier=h_nonrobust, target_class=1, scale=4.0, path="x0pred", stabilizer=ema(0.99)
    )
    batch = sample_batch(small_denoiser, small_schedule, cfg, 3, 55)
    single = guided_sample(small_denoiser, small_schedule, cfg, 55)
    assert np.array_equal(single, batch.samples[0])


def test_chain_permutation_permutes_outputs(small_denoiser, small_schedule, h_nonrobust):
    cfg = GuidanceConfig(classifier=h_nonrobust, target_class=1, scale=4.0, path="raw")
    base = sample_batch(small_denoiser, small_schedule, cfg, 4, 31)
    perm = [2, 0, 3, 1]
    shuffled = sample_batch(small_denoiser, small_schedule, cfg, 4, 31, chain_indices=perm)
    assert np.array_equal(shuffled.samples, base.samples[perm])


def test_unguided_engine_matches_scalar_reverse_loop(small_denoiser, small_schedule):
    batch = unconditional_batch(small_denoiser, small_schedule, 3, 42)
    for i in range(3):
        gen = substream(42, "chain", i)
        x = gen.standard_normal(2)
        for t in range(small_schedule.T, 0, -1):
            x = reverse_step(small_denoiser, small_schedule, x, t, gen)
        assert np.array_equal(x, batch.samples[i])


def test_trace_gradients_match_public_op(small_denoiser, small_schedule, h_nonrobust):
    cfg = GuidanceConfig(
        classifier=h_nonrobust, target_class=0, scale=2.0, path="x0pred", stabilizer=ema(0.9)
    )
    sample, trace = guided_sample(small_denoiser, small_schedule, cfg, 5, return_trace=True)
    # reconstruct each step's state: x at step t is the *previous* record's x
    gen = substream(5, "chain", 0)
    x_t = gen.standard_normal(2)
    for rec in trace:
        g = dg.guided_log_prob_gradient(
            small_denoiser, h_nonrobust, x_t, rec["t"], 0, path="x0pred"
        )
        np.testing.assert_allclose(rec["g"][0], g, rtol=0, atol=1e-13)
        x_t = rec["x"][0]
    assert np.array_equal(sample, trace[-1]["x"][0])


def test_sampling_deterministic(small_denoiser, small_schedule, h_oracle):
    cfg = GuidanceConfig(classifier=h_oracle, target_class=0, scale=3.0, path="x0pred")
    a = sample_batch(small_denoiser, small_schedule, cfg, 6, 9)
    b = sample_batch(small_denoiser, small_schedule, cfg, 6, 9)
    assert np.array_equal(a.samples, b.samples)


def test_different_seeds_differ(small_denoiser, small_schedule):
    a = unconditional_batch(small_denoiser, small_schedule, 4, 1)
    b = unconditional_batch(small_denoiser, small_schedule, 4, 2)
    assert not np.array_equal(a.samples, b.samples)


def test_unconditional_samples_match_data_distribution(denoiser, schedule400, spec2):
    batch = unconditional_batch(denoiser, schedule400, 1500, 123)
    assert batch.n_diverged == 0
    ref = dg.sample_dataset(spec2, 1500, 321).points
    assert dg.frechet_distance(batch.samples, ref) < 0.05


def test_divergence_detection_and_reporting(small_denoiser, small_schedule, h_oracle):
    # unnormalized oracle logit gradients grow linearly in x, so an absurd
    # scale compounds to overflow within a few steps
    cfg = GuidanceConfig(
        classifier=h_oracle, target_class=0, scale=1e12, path="raw", objective="logit"
    )
    batch = sample_batch(small_denoiser, small_schedule, cfg, 4, 3)
    assert batch.n_diverged == 4
    assert np.all(np.isnan(batch.samples))
    assert np.all(batch.diverged_t > 0)
    assert len(batch.kept()) == 0
    with pytest.raises(GuidanceDivergence) as err:
        guided_sample(small_denoiser, small_schedule, cfg, 3)
    assert err.value.t > 0


def test_oracle_guidance_lands_in_target_class(denoiser, schedule400, h_oracle, spec2):
    # end-to-end check scored by exact Bayes classification of the outputs
    cfg = GuidanceConfig(classifier=h_oracle, target_class=0, scale=3.0, path="raw")
    batch = sample_batch(denoiser, schedule400, cfg, 300, 606)
    assert batch.n_diverged == 0
    from diffguide.classifier import predict_logits

    pred = np.argmax(predict_logits(h_oracle, batch.samples), axis=1)
    assert np.mean(pred == 0) >= 0.95


def test_healthy_chains_unaffected_by_bad_ones(small_denoiser, small_schedule, h_oracle):
    # a diverged chain is NaN-frozen; other chains keep their isolated outcome
    cfg_ok = GuidanceConfig(classifier=h_oracle, target_class=0, scale=1.0, path="raw")
    ok = sample_batch(small_denoiser, small_schedule, cfg_ok, 3, 8)
    assert ok.n_diverged == 0
    assert np.all(np.isfinite(ok.samples))


def test_batch_rejects_bad_n(small_denoiser, small_schedule, h_oracle):
    cfg = GuidanceConfig(classifier=h_oracle, target_class=0, scale=1.0)
    with pytest.raises(ValueError):
        sample_batch(small_denoiser, small_schedule, cfg, 0, 1)
    with pytest.raises(ValueError):
        unconditional_batch(small_denoiser, small_schedule, 0, 1)
