"""Conditional label prediction and evaluation metrics.

Prediction conditions on observed labels through posterior particles: each
particle is one assignment draw c_tau ~ q(c_tau | y_tau), under which every
neighbor j carries a posterior Dirichlet with concentration
alpha_j + s_j(counts of that particle).  An unlabeled node's predictive
distribution is then the attention-weighted mixture of posterior means,
averaged over particles.  Small instances can bypass sampling entirely via
ratios of exactly enumerated marginals.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Mapping

import numpy as np

from .graph import Graph, check_node_set
from .kernel import (
    DEFAULT_MAX_CONFIGS,
    EnumerationBudgetError,
    NmmParams,
    exact_marginal,
)
from .variational import QSample, extend_sample, sample_q

__all__ = [
    "ParticleSet",
    "GreedyResult",
    "init_particles",
    "predict_marginal",
    "predict_exact_smallset",
    "greedy_decode",
    "pairwise_ll",
]


@dataclass
class ParticleSet:
    """Equal-weight assignment particles sharing one observed-label map."""

    particles: list[QSample]
    labels: dict[int, int]

    def __len__(self) -> int:
        return len(self.particles)


def init_particles(
    params: NmmParams,
    labels: Mapping[int, int],
    graph: Graph,
    num_particles: int,
    rng: np.random.Generator,
) -> ParticleSet:
    if num_particles < 1:
        raise ValueError("need at least one particle")
    particles = [
        sample_q(params, labels, graph, rng) for _ in range(num_particles)
    ]
    return ParticleSet(particles, dict(labels))


def predict_marginal(
    params: NmmParams, particles: ParticleSet, i: int, graph: Graph
) -> np.ndarray:
    """Predictive distribution of node i's label given the observed set:
    the particle average of sum_j L[i,j] * posterior_mean_j."""
    nbrs = graph.neighborhood(i)
    attn = params.attn[i]
    alpha = params.alpha
    totals = params.alpha_totals
    out = np.zeros(params.num_classes)
    for sample in particles.particles:
        counts = sample.counts
        probs = np.zeros(params.num_classes)
        for pos, j in enumerate(nbrs):
            j = int(j)
            w = attn[pos]
            if w == 0.0:
                continue
            row = counts.counts.get(j)
            if row is None:
                probs += w * alpha[j] / totals[j]
            else:
                probs += w * (alpha[j] + np.asarray(row, dtype=float)) / (
                    totals[j] + counts.totals[j]
                )
        out += probs
    return out / len(particles.particles)


def predict_exact_smallset(
    params: NmmParams,
    observed: Mapping[int, int],
    targets,
    graph: Graph,
    max_configs: int = DEFAULT_MAX_CONFIGS,
) -> dict[tuple[int, ...], float]:
    """Exact p(y_targets | y_observed) for every target configuration.

    Each configuration costs one enumerated marginal of the union set; the
    budget check covers assignment configurations times C^{|targets|}.
    """
    targets = check_node_set(targets, graph.num_nodes)
    for i in targets:
        if i in observed:
            raise ValueError(f"target node {i} already has an observed label")
    if not targets:
        return {(): 1.0}
    c = params.num_classes
    n_assign = 1
    for i in list(observed) + targets:
        n_assign *= len(graph.neighborhood(i))
    if n_assign * (c ** len(targets)) > max_configs:
        raise EnumerationBudgetError(
            "exact small-set prediction exceeds the enumeration budget"
        )
    log_obs = exact_marginal(params, observed, graph, max_configs=max_configs)
    out: dict[tuple[int, ...], float] = {}
    for combo in product(range(c), repeat=len(targets)):
        joint = dict(observed)
        joint.update(zip(targets, combo))
        out[combo] = float(
            np.exp(exact_marginal(params, joint, graph, max_configs=max_configs) - log_obs)
        )
    return out


@dataclass
class GreedyResult:
    labels: dict[int, int]
    probs: dict[int, np.ndarray]
    order: list[int]


def greedy_decode(
    params: NmmParams,
    observed: Mapping[int, int],
    targets,
    graph: Graph,
    num_particles: int,
    rng: np.random.Generator,
    order: str = "id",
) -> GreedyResult:
    """Predict target labels one at a time, committing each argmax.

    After each commitment every particle extends with a drawn assignment for
    the new node, so later predictions condition on earlier ones.  ``order``
    is "id" (ascending node id, the default) or "confidence" (most certain
    marginal first).  Ties in the argmax go to the lowest class id.
    """
    targets = check_node_set(targets, graph.num_nodes)
    for i in targets:
        if i in observed:
            raise ValueError(f"target node {i} already has an observed label")
    if order not in ("id", "confidence"):
        raise ValueError(f"unknown decode order {order!r}")
    particles = init_particles(params, observed, graph, num_particles, rng)
    pending = sorted(targets)
    decided: dict[int, int] = {}
    probs: dict[int, np.ndarray] = {}
    visit_order: list[int] = []
    while pending:
        if order == "id":
            i = pending.pop(0)
            p = predict_marginal(params, particles, i, graph)
        else:
            margs = [predict_marginal(params, particles, i, graph) for i in pending]
            best = int(np.argmax([float(np.max(m)) for m in margs]))
            i = pending.pop(best)
            p = margs[best]
        label = int(np.argmax(p))  # argmax takes the lowest index on ties
        decided[i] = label
        probs[i] = p
        visit_order.append(i)
        particles.labels[i] = label
        for sample in particles.particles:
            extend_sample(params, sample, i, label, graph, rng)
    return GreedyResult(decided, probs, visit_order)


def pairwise_ll(
    params: NmmParams,
    test_edges,
    labels: Mapping[int, int],
    graph: Graph,
) -> float:
    """Mean log p(y_u, y_v) over test edges, each by exact enumeration."""
    edges = list(test_edges)
    if not edges:
        raise ValueError("no test edges")
    total = 0.0
    for u, v in edges:
        u, v = int(u), int(v)
        if u not in labels or v not in labels:
            raise ValueError(f"unlabeled endpoint on edge ({u},{v})")
        total += exact_marginal(params, {u: labels[u], v: labels[v]}, graph)
    return total / len(edges)
