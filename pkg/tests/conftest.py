"""Shared fixtures and independent oracles.

Oracles here deliberately avoid the library's own probability code: joints
come straight from the Beta-ratio formula via math.lgamma, marginals from
full enumeration over the assignment product space, and variational
quantities from chain-rule ratios of those joints.
"""

from __future__ import annotations

import math
from itertools import permutations, product

import numpy as np
import pytest

from nmm.graph import Graph, from_edge_pairs, make_random_graph
from nmm.kernel import NmmParams, random_nmm_params
from nmm.util import rng_from_seed


# ---------------------------------------------------------------------------
# independent oracles (math.lgamma only)
# ---------------------------------------------------------------------------


def oracle_log_joint(params: NmmParams, labels: dict, assignment: dict, graph: Graph) -> float:
    """ln p(y, c) straight from the attention product and Beta ratios."""
    total = 0.0
    for i in labels:
        nbrs = list(graph.neighborhood(i))
        pos = nbrs.index(assignment[i])
        l = params.attn[i][pos]
        if l == 0.0:
            return -math.inf
        total += math.log(l)
    counts: dict[int, list[int]] = {}
    for i in labels:
        row = counts.setdefault(assignment[i], [0] * params.num_classes)
        row[labels[i]] += 1
    for j, row in counts.items():
        a = params.alpha[j]
        before = sum(math.lgamma(x) for x in a) - math.lgamma(float(a.sum()))
        post = [x + r for x, r in zip(a, row)]
        after = sum(math.lgamma(x) for x in post) - math.lgamma(float(sum(post)))
        total += after - before
    return total


def oracle_marginal(params: NmmParams, labels: dict, graph: Graph) -> float:
    """ln p(y) by summing the oracle joint over the whole assignment space."""
    tau = sorted(labels)
    spaces = [list(graph.neighborhood(i)) for i in tau]
    vals = []
    for combo in product(*spaces):
        c = dict(zip(tau, (int(x) for x in combo)))
        vals.append(oracle_log_joint(params, labels, c, graph))
    m = max(vals)
    if m == -math.inf:
        return -math.inf
    return m + math.log(sum(math.exp(v - m) for v in vals))


def oracle_q_chain(params: NmmParams, labels: dict, order: list[int],
                   assignment: dict, graph: Graph) -> float:
    """ln q(c | y) for a fixed order, from ratios of oracle joints."""
    log_q = 0.0
    for d, i in enumerate(order):
        prefix = {k: assignment[k] for k in order[:d]}
        lab_prefix = {k: labels[k] for k in order[:d]}
        num = oracle_log_joint(
            params, {**lab_prefix, i: labels[i]}, {**prefix, i: assignment[i]}, graph
        )
        cand = []
        for j in graph.neighborhood(i):
            cand.append(
                oracle_log_joint(
                    params, {**lab_prefix, i: labels[i]}, {**prefix, i: int(j)}, graph
                )
            )
        m = max(cand)
        denom = m + math.log(sum(math.exp(v - m) for v in cand))
        log_q += num - denom
    return log_q


def oracle_exact_elbo(params: NmmParams, labels: dict, graph: Graph) -> float:
    """Permutation-averaged exact bound: mean over all orders of
    E_q[ln p - ln q] with the expectation enumerated over assignments."""
    tau = sorted(labels)
    spaces = [list(graph.neighborhood(i)) for i in tau]
    bounds = []
    for order in permutations(tau):
        order = list(order)
        total = 0.0
        for combo in product(*spaces):
            c = dict(zip(tau, (int(x) for x in combo)))
            lq = oracle_q_chain(params, labels, order, c, graph)
            if lq == -math.inf:
                continue
            lj = oracle_log_joint(params, labels, c, graph)
            total += math.exp(lq) * (lj - lq)
        bounds.append(total)
    return float(np.mean(bounds))


def mc_dirichlet_integral(params: NmmParams, labels: dict, assignment: dict,
                          graph: Graph, rng: np.random.Generator,
                          n_samples: int = 1_000_000) -> tuple[float, float]:
    """Monte Carlo estimate of p(y, c): draw the latent probability vectors
    explicitly, average the product of picked entries, multiply by the
    (deterministic) attention factor.  Returns (mean, standard error)."""
    tau = sorted(labels)
    attn_factor = 1.0
    for i in tau:
        nbrs = list(graph.neighborhood(i))
        attn_factor *= float(params.attn[i][nbrs.index(assignment[i])])
    chosen = sorted(set(assignment.values()))
    z = {}
    for j in chosen:
        draws = rng.standard_gamma(np.tile(params.alpha[j], (n_samples, 1)))
        z[j] = draws / draws.sum(axis=1, keepdims=True)
    prod = np.ones(n_samples)
    for i in tau:
        prod *= z[assignment[i]][:, labels[i]]
    prod *= attn_factor
    mean = float(prod.mean())
    se = float(prod.std(ddof=1) / math.sqrt(n_samples))
    return mean, se


@pytest.fixture
def rng():
    return rng_from_seed(12345)


def small_instance(seed: int, max_nodes: int = 6, num_classes: int | None = None,
                   max_neighbors: int | None = 3,
                   alpha_low: float = 0.2, alpha_high: float = 5.0):
    """Random small (graph, params) pair for oracle comparisons."""
    rng = rng_from_seed(9000, seed)
    n = int(rng.integers(2, max_nodes + 1))
    edges = int(rng.integers(1, max(2, 2 * n)))
    g = make_random_graph(n, edges, rng, max_neighbors=max_neighbors)
    c = num_classes or int(rng.integers(2, 4))
    params = random_nmm_params(g, c, rng, alpha_low, alpha_high)
    return g, params


def two_node_uniform():
    """The canonical hand-computable instance: one edge, C=2, flat
    concentrations, uniform attention."""
    g = from_edge_pairs(2, [(0, 1)])
    params = NmmParams(
        np.ones((2, 2)), (np.array([0.5, 0.5]), np.array([0.5, 0.5]))
    )
    return g, params


def anchored_params(graph: Graph, alpha: float = 0.2, focus: float = 0.9) -> NmmParams:
    """Strongly positively correlated generator: diffuse symmetric
    concentrations and attention concentrated on the smallest-id neighbor,
    so edge endpoints usually borrow the same latent vector."""
    n = graph.num_nodes
    attn = []
    for i in range(n):
        nbrs = graph.neighborhood(i)
        row = np.full(len(nbrs), (1.0 - focus) / max(1, len(nbrs) - 1))
        row[0] = focus
        if len(nbrs) == 1:
            row = np.array([1.0])
        attn.append(row)
    return NmmParams(np.full((n, 2), alpha), tuple(attn))
