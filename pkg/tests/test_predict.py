import math
from itertools import product

import numpy as np
import pytest

from conftest import oracle_marginal, small_instance, two_node_uniform

from nmm.graph import from_edge_pairs, make_random_graph
from nmm.kernel import (
    EnumerationBudgetError,
    NmmParams,
    identity_attention_params,
    random_nmm_params,
)
from nmm.predict import (
    greedy_decode,
    init_particles,
    pairwise_ll,
    predict_exact_smallset,
    predict_marginal,
)
from nmm.util import rng_from_seed


def test_prior_marginal_with_no_evidence():
    g, params = small_instance(0)
    particles = init_particles(params, {}, g, 4, rng_from_seed(0))
    for i in range(g.num_nodes):
        probs = predict_marginal(params, particles, i, g)
        nbrs = g.neighborhood(i)
        expect = params.attn[i] @ (
            params.alpha[nbrs] / params.alpha_totals[nbrs][:, None]
        )
        assert np.allclose(probs, expect, atol=1e-12)
        assert abs(probs.sum() - 1.0) < 1e-10


def test_identity_attention_ignores_neighbors():
    g = from_edge_pairs(3, [(0, 1), (1, 2)])
    alpha = np.array([[2.0, 1.0], [1.0, 3.0], [1.0, 1.0]])
    params = identity_attention_params(alpha, g)
    particles = init_particles(params, {0: 0, 2: 1}, g, 8, rng_from_seed(1))
    probs = predict_marginal(params, particles, 1, g)
    assert np.allclose(probs, alpha[1] / alpha[1].sum(), atol=1e-12)


def test_two_node_seven_twelfths():
    g, params = two_node_uniform()
    particles = init_particles(params, {0: 0}, g, 32, rng_from_seed(2))
    probs = predict_marginal(params, particles, 1, g)
    # both particle branches give the same posterior mixture here
    assert probs[0] == pytest.approx(7 / 12, abs=1e-12)
    exact = predict_exact_smallset(params, {0: 0}, [1], g)
    assert exact[(0,)] == pytest.approx(7 / 12, rel=1e-10)
    assert exact[(1,)] == pytest.approx(5 / 12, rel=1e-10)


def test_exact_smallset_normalizes_and_matches_oracle():
    for seed in range(15):
        g, params = small_instance(seed, max_nodes=4)
        rng = rng_from_seed(5000, seed)
        nodes = list(rng.permutation(g.num_nodes))
        n_obs = int(rng.integers(0, min(2, len(nodes)) + 1))
        observed = {int(i): int(rng.integers(params.num_classes)) for i in nodes[:n_obs]}
        targets = [int(i) for i in nodes[n_obs : n_obs + 2]]
        if not targets:
            continue
        dist = predict_exact_smallset(params, observed, targets, g)
        assert sum(dist.values()) == pytest.approx(1.0, abs=1e-9)
        denom = oracle_marginal(params, observed, g) if observed else 0.0
        for combo, p in dist.items():
            joint = dict(observed)
            joint.update(zip(targets, combo))
            expect = math.exp(oracle_marginal(params, joint, g) - denom)
            assert p == pytest.approx(expect, rel=1e-8, abs=1e-12)


def test_exact_smallset_empty_targets():
    g, params = two_node_uniform()
    assert predict_exact_smallset(params, {0: 0}, [], g) == {(): 1.0}


def test_exact_smallset_budget():
    rng = rng_from_seed(4)
    g = make_random_graph(16, 40, rng)
    params = random_nmm_params(g, 2, rng)
    with pytest.raises(EnumerationBudgetError):
        predict_exact_smallset(params, {}, list(range(16)), g)


def test_disconnected_uniform_target_stays_uniform():
    g = from_edge_pairs(3, [(0, 1)])
    alpha = np.array([[3.0, 1.0], [1.0, 2.0], [1.0, 1.0]])
    params = random_nmm_params(g, 2, rng_from_seed(5))
    params = NmmParams(alpha, params.attn)
    dist = predict_exact_smallset(params, {0: 0}, [2], g)
    assert dist[(0,)] == pytest.approx(0.5, rel=1e-10)


def test_monte_carlo_matches_exact_prediction():
    for seed in range(8):
        g, params = small_instance(seed, max_nodes=4)
        rng = rng_from_seed(6000, seed)
        nodes = list(rng.permutation(g.num_nodes))
        observed = {int(nodes[0]): int(rng.integers(params.num_classes))}
        target = int(nodes[1])
        exact = predict_exact_smallset(params, observed, [target], g)
        t = 4000
        particles = init_particles(params, observed, g, t, rng)
        mc = predict_marginal(params, particles, target, g)
        per = np.array([
            predict_marginal(params, type(particles)([s], particles.labels), target, g)
            for s in particles.particles
        ])
        se = per.std(axis=0, ddof=1) / math.sqrt(t)
        for k in range(params.num_classes):
            assert abs(mc[k] - exact[(k,)]) < 4 * se[k] + 1e-9


def test_greedy_single_target_matches_marginal_argmax():
    g, params = small_instance(9)
    observed = {0: 0}
    rng = rng_from_seed(7)
    result = greedy_decode(params, observed, [1], g, 16, rng)
    particles = init_particles(params, observed, g, 16, rng_from_seed(7))
    probs = predict_marginal(params, particles, 1, g)
    assert result.labels[1] == int(np.argmax(probs))


def test_greedy_two_node_chain():
    g, params = two_node_uniform()
    result = greedy_decode(params, {0: 0}, [1], g, 8, rng_from_seed(8))
    assert result.labels[1] == 0  # 7/12 beats 5/12


def test_greedy_tie_breaks_to_lowest_class():
    g = from_edge_pairs(2, [(0, 1)])
    params = NmmParams(np.ones((2, 2)), (np.array([0.5, 0.5]), np.array([0.5, 0.5])))
    result = greedy_decode(params, {}, [0, 1], g, 8, rng_from_seed(9))
    assert result.labels[0] == 0 and result.labels[1] == 0


def test_greedy_decode_order_flag():
    g, params = small_instance(11)
    targets = list(range(g.num_nodes))
    a = greedy_decode(params, {}, targets, g, 8, rng_from_seed(10), order="id")
    assert a.order == sorted(targets)
    b = greedy_decode(params, {}, targets, g, 8, rng_from_seed(10), order="confidence")
    assert sorted(b.order) == sorted(targets)


def test_greedy_rejects_observed_target():
    g, params = two_node_uniform()
    with pytest.raises(ValueError):
        greedy_decode(params, {0: 0}, [0], g, 4, rng_from_seed(11))


def test_pairwise_ll_two_node_value():
    g, params = two_node_uniform()
    val = pairwise_ll(params, [(0, 1)], {0: 0, 1: 0}, g)
    assert val == pytest.approx(math.log(7 / 24), rel=1e-12)


def test_pairwise_ll_identity_independent_pair():
    g, params = two_node_uniform()
    ind = identity_attention_params(params.alpha, g)
    val = pairwise_ll(ind, [(0, 1)], {0: 0, 1: 1}, g)
    assert val == pytest.approx(2.0 * math.log(0.5), rel=1e-12)


def test_pairwise_ll_errors():
    g, params = two_node_uniform()
    with pytest.raises(ValueError, match="no test edges"):
        pairwise_ll(params, [], {0: 0}, g)
    with pytest.raises(ValueError, match="unlabeled"):
        pairwise_ll(params, [(0, 1)], {0: 0}, g)


def test_positive_correlation_on_shared_neighborhoods():
    # symmetric concentrations + strictly positive attention: observing a
    # class at one endpoint cannot lower the neighbor's probability of it
    for seed in range(12):
        rng = rng_from_seed(7000, seed)
        g = make_random_graph(4, 5, rng, max_neighbors=4)
        a = float(rng.uniform(0.2, 3.0))
        params = random_nmm_params(g, 2, rng)
        params = NmmParams(np.full((4, 2), a), params.attn)
        edges = g.edges()
        if not len(edges):
            continue
        u, v = (int(x) for x in edges[0])
        p_joint = math.exp(oracle_marginal(params, {u: 0, v: 0}, g))
        p_u = math.exp(oracle_marginal(params, {u: 0}, g))
        p_v = math.exp(oracle_marginal(params, {v: 0}, g))
        assert p_joint / p_u >= p_v - 1e-10


def test_pll_prefers_true_correlated_model():
    # data drawn from a correlated model scores higher under it than under
    # the moment-matched independent baseline (statistical, many replicates)
    from conftest import anchored_params
    from nmm.kernel import node_marginal, sample_labels_ancestral

    rng = rng_from_seed(8000)
    g = make_random_graph(16, 24, rng, max_neighbors=5)
    params = anchored_params(g)
    marginals = np.array([node_marginal(params, i, g) for i in range(g.num_nodes)])
    independent = identity_attention_params(marginals, g)
    edges = [tuple(map(int, e)) for e in g.edges()]
    wins = 0
    for rep in range(6):
        y, _ = sample_labels_ancestral(params, g, rng_from_seed(8001, rep))
        labels = {i: int(y[i]) for i in range(g.num_nodes)}
        corr = pairwise_ll(params, edges, labels, g)
        ind = pairwise_ll(independent, edges, labels, g)
        wins += corr > ind
    assert wins >= 5
