import numpy as np
import pytest

from diffguide.classifier import accuracy, bayes_oracle, input_gradient, predict_logits
from diffguide.schedule import schedule_from_betas
from diffguide.synthdata import make_spec, sample_dataset

from conftest import binomial_3sigma


def test_oracle_equal_logits_at_midpoint():
    spec = make_spec(
        [
            (0.5, [(1.0, [-1.0, 0.0], 0.2)]),
            (0.5, [(1.0, [1.0, 0.0], 0.2)]),
        ]
    )
    logits = predict_logits(bayes_oracle(spec), np.array([0.0, 0.37]))
    assert logits[0] == pytest.approx(logits[1], abs=1e-12)


def test_oracle_argmax_inside_component(spec2, h_oracle):
    deep = spec2.classes[0].components[0].mean
    assert np.argmax(predict_logits(h_oracle, deep)) == 0
    deep1 = spec2.classes[1].components[1].mean
    assert np.argmax(predict_logits(h_oracle, deep1)) == 1


def test_oracle_softmax_is_true_posterior(spec2, h_oracle):
    # softmax of log-joint logits must reproduce prior * density / evidence
    from diffguide.nn import log_softmax
    from diffguide.synthdata import class_density

    x = np.array([0.31, -0.44])
    logits = predict_logits(h_oracle, x)
    post = np.exp(log_softmax(logits))
    joint = np.array([spec2.classes[y].prior * class_density(spec2, y, x) for y in range(2)])
    np.testing.assert_allclose(post, joint / joint.sum(), rtol=1e-12)


def test_robust_clean_accuracy_close_to_nonrobust(h_nonrobust, h_robust, val_ds):
    a_nr = accuracy(h_nonrobust, val_ds.points, val_ds.labels)
    a_r = accuracy(h_robust, val_ds.points, val_ds.labels)
    assert a_r >= a_nr - 0.02


def test_oracle_beats_trained_on_fresh_data(spec2, h_oracle, h_nonrobust, h_robust):
    fresh = sample_dataset(spec2, 4000, 777)
    a_o = accuracy(h_oracle, fresh.points, fresh.labels)
    slack = binomial_3sigma(0.99, len(fresh))
    for h in (h_nonrobust, h_robust):
        assert a_o >= accuracy(h, fresh.points, fresh.labels) - slack


def test_accuracy_on_training_set(h_nonrobust, train_ds):
    assert accuracy(h_nonrobust, train_ds.points, train_ds.labels) >= 0.99


def test_full_noise_accuracy_near_chance(h_nonrobust, val_ds, schedule400):
    acc = accuracy(
        h_nonrobust, val_ds.points, val_ds.labels, "forward_noise",
        t=400, schedule=schedule400, seed=5,
    )
    assert 0.4 <= acc <= 0.6


def test_zero_beta_noise_equals_clean(h_nonrobust, val_ds):
    sch0 = schedule_from_betas(np.zeros(10), allow_degenerate=True)
    plain = accuracy(h_nonrobust, val_ds.points, val_ds.labels)
    noised = accuracy(
        h_nonrobust, val_ds.points, val_ds.labels, "forward_noise",
        t=5, schedule=sch0, seed=3,
    )
    assert noised == plain


def test_noisy_accuracy_nonincreasing_up_to_sampling_error(h_nonrobust, val_ds, schedule400):
    tol = binomial_3sigma(0.5, len(val_ds))
    best = 1.0
    for t in range(20, 401, 20):
        acc = accuracy(
            h_nonrobust, val_ds.points, val_ds.labels, "forward_noise",
            t=t, schedule=schedule400, seed=100 + t,
        )
        assert acc <= best + tol
        best = min(best, acc)


def test_robust_not_below_nonrobust_under_noise(h_nonrobust, h_robust, val_ds, schedule400):
    tol = binomial_3sigma(0.5, len(val_ds))
    for t in range(100, 401, 50):
        kw = dict(t=t, schedule=schedule400, seed=200 + t)
        a_r = accuracy(h_robust, val_ds.points, val_ds.labels, "forward_noise", **kw)
        a_nr = accuracy(h_nonrobust, val_ds.points, val_ds.labels, "forward_noise", **kw)
        assert a_r >= a_nr - tol


def test_x0_pred_preprocess_runs(h_nonrobust, val_ds, schedule400, denoiser):
    acc = accuracy(
        h_nonrobust, val_ds.points[:500], val_ds.labels[:500], "x0_pred",
        t=150, schedule=schedule400, denoiser=denoiser, seed=4,
    )
    assert 0.5 <= acc <= 1.0


def test_accuracy_validates_arguments(h_nonrobust, val_ds):
    with pytest.raises(ValueError):
        accuracy(h_nonrobust, val_ds.points, val_ds.labels, "blur")
    with pytest.raises(ValueError):
        accuracy(h_nonrobust, val_ds.points, val_ds.labels, "forward_noise")


def test_oracle_input_gradient_matches_finite_differences(spec2, h_oracle):
    from diffguide.nn import log_softmax_target

    rng = np.random.default_rng(31)
    for _ in range(20):
        x = rng.standard_normal(2) * 1.2
        y = int(rng.integers(2))
        g = input_gradient(h_oracle, x, y)
        h = 1e-5
        g_fd = np.zeros(2)
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            up = log_softmax_target(predict_logits(h_oracle, x + e), y)
            dn = log_softmax_target(predict_logits(h_oracle, x - e), y)
            g_fd[j] = (up - dn) / (2 * h)
        assert np.linalg.norm(g - g_fd) <= 1e-5 * max(1.0, np.linalg.norm(g_fd))


def test_mlp_handle_gradient_delegates(h_nonrobust, model_nonrobust):
    from diffguide import nn

    x = np.array([0.2, -0.1])
    np.testing.assert_array_equal(
        input_gradient(h_nonrobust, x, 1), nn.input_gradient(model_nonrobust, x, 1)
    )
