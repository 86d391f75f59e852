import dataclasses
import math

import numpy as np
import pytest

from conftest import oracle_exact_elbo, small_instance

from nmm import tape as tm
from nmm.graph import from_edge_pairs, make_random_graph
from nmm.kernel import random_nmm_params, sample_labels_ancestral
from nmm.learning import (
    Adam,
    TrainConfig,
    TrainingDiverged,
    loo_coefficients,
    reinforce_gradient,
    taped_replay,
    train,
)
from nmm.parameterize import (
    BackboneConfig,
    init_theta,
    layout_for,
    params_from_theta,
)
from nmm.tape import check_gradient
from nmm.util import rng_from_seed
from nmm.variational import elbo_estimate, sample_q


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(num_samples=0)
    with pytest.raises(ValueError):
        TrainConfig(num_samples=1, baseline="loo")
    TrainConfig(num_samples=1, baseline="none")


def test_loo_baseline_shift_invariance_exact():
    rng = rng_from_seed(0)
    f = list(rng.normal(size=6))
    shifted = [x + 123.456 for x in f]
    assert np.allclose(loo_coefficients(f), loo_coefficients(shifted), atol=1e-12)


def test_independence_case_analytic_gradient():
    # gamma huge -> L identity; single node's bound is ln(alpha_y / alpha_tot)
    g = from_edge_pairs(1, [])
    cfg = BackboneConfig(kind="free", embed_dim=2, init_gamma=50.0)
    layout = layout_for(cfg, 1, 0, 2)
    rng = rng_from_seed(1)
    theta = init_theta(cfg, layout, rng)
    theta[layout.slices()["u"]] = [0.3, -0.4]
    elbo, grad = reinforce_gradient(cfg, theta, g, {0: 0}, 2, rng_from_seed(2))
    params = params_from_theta(cfg, theta, g)
    a = params.alpha[0]
    assert elbo == pytest.approx(math.log(a[0] / a.sum()), abs=1e-9)
    sig = lambda x: 1.0 / (1.0 + math.exp(-x))  # noqa: E731
    expect_u0 = (1.0 / a[0] - 1.0 / a.sum()) * sig(0.3)
    expect_u1 = (-1.0 / a.sum()) * sig(-0.4)
    sls = layout.slices()
    assert grad[sls["u"]][0] == pytest.approx(expect_u0, abs=1e-9)
    assert grad[sls["u"]][1] == pytest.approx(expect_u1, abs=1e-9)


def test_alpha_space_derivative_of_independent_bound():
    # direct check of d/d alpha_y [ln(alpha_y) - ln(alpha_0 + alpha_1)] at (1,1)
    def f(t, p):
        return tm.log(p[0]) - tm.log(p[0] + p[1])

    rep = check_gradient(f, [1.0, 1.0], tol=1e-8)
    assert rep.passed
    assert rep.grad[0] == pytest.approx(0.5, abs=1e-12)


def test_pathwise_gradient_frozen_sample_matches_fd():
    # gradient of f = ln p - ln q with (order, assignment) frozen
    for seed in range(5):
        rng = rng_from_seed(3000, seed)
        g = make_random_graph(4, 5, rng)
        cfg = BackboneConfig(kind="free", embed_dim=3)
        layout = layout_for(cfg, 4, 0, 2)
        theta = init_theta(cfg, layout, rng) + 0.1 * rng.standard_normal(layout.size)
        labels = {i: int(rng.integers(2)) for i in range(4)}
        params = params_from_theta(cfg, theta, g)
        frozen = sample_q(params, labels, g, rng)

        def f(t, nodes):
            taped = params_from_theta(cfg, nodes, g)
            lj, lq = taped_replay(taped, g, frozen.permutation, frozen.assignment, labels)
            return lj - lq

        rep = check_gradient(f, theta, tol=1e-5)
        assert rep.passed, (seed, rep.max_rel_error)


def test_reinforce_mean_matches_exact_gradient_small():
    # light version of the unbiasedness check (full version in acceptance)
    rng = rng_from_seed(4000)
    g = from_edge_pairs(2, [(0, 1)])
    cfg = BackboneConfig(kind="free", embed_dim=2)
    layout = layout_for(cfg, 2, 0, 2)
    theta = init_theta(cfg, layout, rng) + 0.2 * rng.standard_normal(layout.size)
    labels = {0: 0, 1: 1}

    def exact_elbo_at(th):
        return oracle_exact_elbo(params_from_theta(cfg, th, g), labels, g)

    h = 1e-5
    fd = np.zeros(layout.size)
    for k in range(layout.size):
        up, dn = theta.copy(), theta.copy()
        up[k] += h
        dn[k] -= h
        fd[k] = (exact_elbo_at(up) - exact_elbo_at(dn)) / (2 * h)

    draws = 3000
    acc = np.zeros(layout.size)
    sq = np.zeros(layout.size)
    for _ in range(draws):
        _, grad = reinforce_gradient(cfg, theta, g, labels, 2, rng)
        acc += grad
        sq += grad * grad
    mean = acc / draws
    se = np.sqrt(np.maximum(sq / draws - mean**2, 1e-18) / draws)
    assert np.all(np.abs(mean - fd) < 4 * se + 1e-8)


def test_reinforce_empty_labels():
    g = from_edge_pairs(2, [(0, 1)])
    cfg = BackboneConfig(kind="free", embed_dim=2)
    layout = layout_for(cfg, 2, 0, 2)
    theta = init_theta(cfg, layout, rng_from_seed(1))
    elbo, grad = reinforce_gradient(cfg, theta, g, {}, 4, rng_from_seed(2))
    assert elbo == 0.0 and np.all(grad == 0.0)


def test_adam_zero_lr_keeps_parameters():
    opt = Adam(3, lr=0.0)
    theta = np.array([1.0, -2.0, 0.5])
    out = opt.step(theta, np.array([10.0, -3.0, 1.0]))
    assert np.array_equal(out, theta)


def test_train_zero_lr_returns_initial_parameters():
    rng = rng_from_seed(5)
    g = make_random_graph(6, 8, rng)
    labels = {i: int(rng.integers(2)) for i in range(6)}
    cfg = BackboneConfig(kind="free", embed_dim=2)
    layout = layout_for(cfg, 6, 0, 2)
    init = init_theta(cfg, layout, rng_from_seed(6, 1))
    result = train(
        TrainConfig(epochs=5, lr=0.0, seed=6, l2=0.0),
        cfg, g, labels, num_classes=2,
    )
    assert np.allclose(result.theta, init, atol=1e-15)


def test_train_determinism():
    rng = rng_from_seed(7)
    g = make_random_graph(8, 12, rng)
    labels = {i: int(rng.integers(2)) for i in range(8)}
    val = {0: labels.pop(0), 1: labels.pop(1)}
    cfg = BackboneConfig(kind="free", embed_dim=3)
    conf = TrainConfig(epochs=6, seed=11, l2=0.0)
    a = train(conf, cfg, g, labels, val, num_classes=2)
    b = train(conf, cfg, g, labels, val, num_classes=2)
    assert a.trace == b.trace
    assert np.array_equal(a.theta, b.theta)


def test_train_divergence_reports_trace():
    # square activation overflows once the step size launches u past 1e154
    rng = rng_from_seed(8)
    g = make_random_graph(4, 4, rng)
    labels = {i: 0 for i in range(4)}
    cfg = BackboneConfig(kind="free", embed_dim=2, alpha_activation="square_plus_one")
    with pytest.raises(TrainingDiverged):
        train(TrainConfig(epochs=3, lr=1e200, seed=8, l2=0.0), cfg, g, labels, num_classes=2)


def test_training_recovers_ground_truth_bound_level():
    # data from a known model; the fitted free model's training bound should
    # come within 0.05 * |tau| of the bound at the generating parameters
    rng = rng_from_seed(9)
    g = make_random_graph(30, 45, rng, max_neighbors=6)
    true = random_nmm_params(g, 2, rng, 0.25, 0.6)
    y, _ = sample_labels_ancestral(true, g, rng)
    labels = {i: int(y[i]) for i in range(g.num_nodes)}
    cfg = BackboneConfig(kind="free", embed_dim=4)
    result = train(
        TrainConfig(epochs=500, lr=0.02, num_samples=8, seed=9, l2=0.0),
        cfg, g, labels, num_classes=2,
    )
    fitted = params_from_theta(cfg, result.theta, g)
    eval_rng = rng_from_seed(10)
    fitted_bound, _ = elbo_estimate(fitted, labels, g, 400, eval_rng)
    true_bound, _ = elbo_estimate(true, labels, g, 400, eval_rng)
    assert fitted_bound >= true_bound - 0.05 * len(labels)


def test_free_attention_matches_or_beats_identity_training():
    # identity-constrained (huge gamma) vs free attention at equal budget
    rng = rng_from_seed(12)
    g = make_random_graph(20, 30, rng, max_neighbors=6)
    true = random_nmm_params(g, 2, rng, 0.25, 0.5)
    y, _ = sample_labels_ancestral(true, g, rng)
    labels = {i: int(y[i]) for i in range(g.num_nodes)}
    free_cfg = BackboneConfig(kind="free", embed_dim=4, init_gamma=0.0)
    ident_cfg = BackboneConfig(kind="free", embed_dim=4, init_gamma=50.0)
    conf = TrainConfig(epochs=300, lr=0.02, num_samples=8, seed=13, l2=0.0)
    free = train(conf, free_cfg, g, labels, num_classes=2)
    ident = train(conf, ident_cfg, g, labels, num_classes=2)
    free_params = params_from_theta(free_cfg, free.theta, g)
    ident_params = params_from_theta(ident_cfg, ident.theta, g)
    free_bound, _ = elbo_estimate(free_params, labels, g, 800, rng_from_seed(14))
    ident_bound = sum(
        math.log(ident_params.alpha[i, labels[i]] / ident_params.alpha_totals[i])
        for i in labels
    )
    assert free_bound >= ident_bound - 1e-6


def test_early_stopping_respects_patience():
    rng = rng_from_seed(15)
    g = make_random_graph(10, 14, rng)
    all_labels = {i: int(rng.integers(2)) for i in range(10)}
    train_labels = {i: all_labels[i] for i in range(6)}
    val_labels = {i: all_labels[i] for i in range(6, 10)}
    conf = TrainConfig(epochs=200, seed=16, patience=5, l2=0.0)
    cfg = BackboneConfig(kind="free", embed_dim=2)
    result = train(conf, cfg, g, train_labels, val_labels, num_classes=2)
    assert len(result.trace) < 200
    assert result.best_epoch is not None
    accs = [rec["val_acc"] for rec in result.trace]
    assert accs[result.best_epoch] == max(accs)
