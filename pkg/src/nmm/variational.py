"""Parameter-free autoregressive posterior over neighbor assignments.

Given observed labels y_tau, the approximating distribution q(c_tau | y_tau)
factorizes along a uniformly random node ordering; each factor is the exact
conditional of c_i given everything visited so far, computed from the model's
own (alpha, L) with no parameters of its own.  The conditional weight of
candidate j is

    L[i, j] * (alpha[j, y_i] + s[j, y_i]) / (alpha_total[j] + s_total[j]),

the one-step Beta-ratio increment of the collapsed joint, so sampling also
accumulates ln p(y, c) for free: the chosen unnormalized log-weight *is* the
joint increment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .graph import Graph
from .kernel import NEG_INF, CountTable, NmmParams

__all__ = [
    "QSample",
    "q_conditional",
    "sample_q",
    "elbo_estimate",
    "extend_sample",
    "assignment_log_q",
]


@dataclass
class QSample:
    """One draw of c over the visited nodes, with its ordering and log masses."""

    assignment: dict[int, int]
    permutation: list[int]
    log_q: float
    log_joint: float
    counts: CountTable

    def copy(self) -> "QSample":
        return QSample(
            dict(self.assignment),
            list(self.permutation),
            self.log_q,
            self.log_joint,
            self.counts.copy(),
        )


def _log_weights(
    params: NmmParams, counts: CountTable, i: int, y_i: int, graph: Graph
) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized log conditional weights of c_i over n(i), given counts."""
    nbrs = graph.neighborhood(i)
    la = params.log_attn[i]
    alpha = params.alpha
    totals = params.alpha_totals
    lw = np.empty(len(nbrs))
    log_ = math.log
    for pos in range(len(nbrs)):
        l_ij = la[pos]
        if l_ij == NEG_INF:
            lw[pos] = NEG_INF
            continue
        j = int(nbrs[pos])
        lw[pos] = (
            l_ij
            + log_(alpha[j, y_i] + counts.count(j, y_i))
            - log_(totals[j] + counts.total(j))
        )
    return nbrs, lw


def q_conditional(
    params: NmmParams, counts: CountTable, i: int, y_i: int, graph: Graph
) -> np.ndarray:
    """Exact conditional of c_i over n(i), normalized in linear space after
    subtracting the max log-weight."""
    _, lw = _log_weights(params, counts, i, y_i, graph)
    m = float(np.max(lw))
    if m == NEG_INF:
        raise ValueError(f"degenerate attention: node {i} has no feasible neighbor")
    p = np.exp(lw - m)
    return p / p.sum()


def _logsumexp(lw: np.ndarray) -> float:
    m = float(np.max(lw))
    if m == NEG_INF:
        return NEG_INF
    return m + math.log(float(np.exp(lw - m).sum()))


def _visit(
    params: NmmParams,
    sample: QSample,
    i: int,
    y_i: int,
    graph: Graph,
    rng: np.random.Generator,
) -> None:
    nbrs, lw = _log_weights(params, sample.counts, i, y_i, graph)
    m = float(np.max(lw))
    if m == NEG_INF:
        raise ValueError(f"degenerate attention: node {i} has no feasible neighbor")
    p = np.exp(lw - m)
    p /= p.sum()
    u = rng.random()
    acc = 0.0
    pos = len(p) - 1
    for k in range(len(p) - 1):
        acc += p[k]
        if u < acc:
            pos = k
            break
    j = int(nbrs[pos])
    sample.assignment[i] = j
    sample.permutation.append(i)
    sample.log_q += float(lw[pos]) - _logsumexp(lw)
    sample.log_joint += float(lw[pos])
    sample.counts.add(j, y_i)


def sample_q(
    params: NmmParams,
    labels: Mapping[int, int],
    graph: Graph,
    rng: np.random.Generator,
    counts: CountTable | None = None,
) -> QSample:
    """Draw c_tau ~ q under a fresh uniform permutation of tau.

    ``counts`` may pass in a cleared table for reuse across many samples.
    """
    if counts is None:
        counts = CountTable(params.num_classes)
    else:
        counts.clear()
    sample = QSample({}, [], 0.0, 0.0, counts)
    tau = sorted(labels)
    if not tau:
        return sample
    order = [tau[k] for k in rng.permutation(len(tau))]
    for i in order:
        _visit(params, sample, i, labels[i], graph, rng)
    return sample


def extend_sample(
    params: NmmParams,
    sample: QSample,
    i: int,
    y_i: int,
    graph: Graph,
    rng: np.random.Generator,
) -> QSample:
    """Append node i to an existing sample, drawing c_i from the current
    conditional and updating counts and log masses in place."""
    if i in sample.assignment:
        raise ValueError(f"node {i} already present in sample")
    _visit(params, sample, i, y_i, graph, rng)
    return sample


def elbo_estimate(
    params: NmmParams,
    labels: Mapping[int, int],
    graph: Graph,
    num_samples: int,
    rng: np.random.Generator,
) -> tuple[float, list[float]]:
    """Monte Carlo lower bound (1/T) sum_t [ln p(y, c_t) - ln q(c_t)].

    Returns the mean and the per-sample values (kept for gradient baselines).
    """
    if num_samples < 1:
        raise ValueError("need at least one sample")
    counts = CountTable(params.num_classes)
    per_sample = []
    for _ in range(num_samples):
        s = sample_q(params, labels, graph, rng, counts=counts)
        per_sample.append(s.log_joint - s.log_q)
    return float(np.mean(per_sample)), per_sample


def assignment_log_q(
    params: NmmParams,
    labels: Mapping[int, int],
    graph: Graph,
    order: list[int],
    assignment: Mapping[int, int],
) -> tuple[float, float]:
    """(log q, log joint) of a fixed assignment replayed under a fixed order."""
    counts = CountTable(params.num_classes)
    log_q = 0.0
    log_joint = 0.0
    for i in order:
        y_i = labels[i]
        nbrs, lw = _log_weights(params, counts, i, y_i, graph)
        j = assignment[i]
        pos = graph.neighbor_position(i, j)
        log_q += float(lw[pos]) - _logsumexp(lw)
        log_joint += float(lw[pos])
        counts.add(j, y_i)
    return log_q, log_joint
