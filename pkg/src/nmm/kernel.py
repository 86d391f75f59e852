"""Collapsed neighbor-mixture probability core.

Every node i borrows the latent label-probability vector of one attended
neighbor c_i in n(i).  With the Dirichlet vectors integrated out, the joint
over a labeled subset tau factorizes into attention terms and per-neighbor
Beta ratios over the count statistics

    p(y_tau, c_tau) = prod_i L[i, c_i] * prod_j B(alpha_j + s_j) / B(alpha_j),

where s_j counts, per class, the nodes that selected neighbor j.  This module
holds that joint, exact marginals by enumeration over neighbor assignments,
posterior concentration updates, and both generative samplers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Mapping

import numpy as np

from .graph import Graph
from .special import log_beta

__all__ = [
    "NmmParams",
    "CountTable",
    "EnumerationBudgetError",
    "suff_stats",
    "log_joint",
    "exact_marginal",
    "posterior_alpha",
    "sample_labels_ancestral",
    "sample_labels_marginalized",
    "node_marginal",
    "random_nmm_params",
    "identity_attention_params",
    "save_params",
    "load_params",
    "dirichlet_draw",
]

NEG_INF = -math.inf

DEFAULT_MAX_SUBSET = 12
DEFAULT_MAX_CONFIGS = 1 << 24


class EnumerationBudgetError(RuntimeError):
    """Exact enumeration would exceed the configured budget; callers should
    fall back to the variational path."""


@dataclass
class NmmParams:
    """Per-node Dirichlet concentrations and neighbor-attention vectors.

    ``alpha`` is (N, C) with strictly positive entries.  ``attn[i]`` is a
    probability vector aligned entry-for-entry with the sorted neighborhood
    ``graph.neighborhood(i)``.
    """

    alpha: np.ndarray
    attn: tuple[np.ndarray, ...]

    @property
    def num_nodes(self) -> int:
        return self.alpha.shape[0]

    @property
    def num_classes(self) -> int:
        return self.alpha.shape[1]

    @cached_property
    def alpha_totals(self) -> np.ndarray:
        return self.alpha.sum(axis=1)

    @cached_property
    def log_attn(self) -> tuple[np.ndarray, ...]:
        out = []
        with np.errstate(divide="ignore"):
            for row in self.attn:
                out.append(np.log(row))
        return tuple(out)

    def validate(self, graph: Graph) -> None:
        if self.alpha.ndim != 2 or self.alpha.shape[0] != graph.num_nodes:
            raise ValueError("alpha must be (num_nodes, num_classes)")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if not np.all(self.alpha > 0.0):
            raise ValueError("alpha entries must be strictly positive")
        if len(self.attn) != graph.num_nodes:
            raise ValueError("one attention vector per node required")
        for i, row in enumerate(self.attn):
            nbrs = graph.neighborhood(i)
            if len(row) != len(nbrs):
                raise ValueError(f"attention row {i} does not match |n({i})|")
            if np.any(row < 0.0):
                raise ValueError(f"attention row {i} has negative entries")
            if abs(float(row.sum()) - 1.0) > 1e-12:
                raise ValueError(f"attention row {i} does not sum to 1")

    def copy(self) -> "NmmParams":
        return NmmParams(self.alpha.copy(), tuple(r.copy() for r in self.attn))


class CountTable:
    """Sparse per-neighbor class counts s_j with cached row totals."""

    __slots__ = ("counts", "totals", "num_classes")

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts: dict[int, list[int]] = {}
        self.totals: dict[int, int] = {}

    def add(self, j: int, y: int) -> None:
        row = self.counts.get(j)
        if row is None:
            row = [0] * self.num_classes
            self.counts[j] = row
            self.totals[j] = 0
        row[y] += 1
        self.totals[j] += 1

    def remove(self, j: int, y: int) -> None:
        row = self.counts[j]
        row[y] -= 1
        self.totals[j] -= 1
        if self.totals[j] == 0:
            del self.counts[j]
            del self.totals[j]

    def count(self, j: int, y: int) -> int:
        row = self.counts.get(j)
        return row[y] if row is not None else 0

    def total(self, j: int) -> int:
        return self.totals.get(j, 0)

    def clear(self) -> None:
        self.counts.clear()
        self.totals.clear()

    def copy(self) -> "CountTable":
        out = CountTable(self.num_classes)
        out.counts = {j: row.copy() for j, row in self.counts.items()}
        out.totals = dict(self.totals)
        return out

    def items(self):
        return self.counts.items()

    def __len__(self) -> int:
        return len(self.counts)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, CountTable)
            and self.counts == other.counts
            and self.totals == other.totals
        )


def _check_domains(labels: Mapping[int, int], assignment: Mapping[int, int]) -> None:
    if set(labels) != set(assignment):
        raise ValueError("labels and assignment must cover the same node set")


def suff_stats(labels: Mapping[int, int], assignment: Mapping[int, int],
               num_classes: int) -> CountTable:
    """Count, per chosen neighbor j and class, the nodes assigned to j."""
    _check_domains(labels, assignment)
    table = CountTable(num_classes)
    for i in sorted(labels):
        table.add(assignment[i], labels[i])
    return table


def log_joint(
    params: NmmParams,
    labels: Mapping[int, int],
    assignment: Mapping[int, int],
    graph: Graph,
) -> float:
    """ln p(y_tau, c_tau) for the collapsed joint; -inf when an attention
    entry of the assignment carries zero probability."""
    _check_domains(labels, assignment)
    log_attn = params.log_attn
    total = 0.0
    for i in sorted(labels):
        pos = graph.neighbor_position(i, assignment[i])
        la = log_attn[i][pos]
        if la == NEG_INF:
            return NEG_INF
        total += la
    table = suff_stats(labels, assignment, params.num_classes)
    alpha = params.alpha
    for j, row in sorted(table.items()):
        arow = alpha[j]
        post = arow + np.asarray(row, dtype=float)
        total += log_beta(post) - log_beta(arow)
    return total


def exact_marginal(
    params: NmmParams,
    labels: Mapping[int, int],
    graph: Graph,
    max_subset: int = DEFAULT_MAX_SUBSET,
    max_configs: int = DEFAULT_MAX_CONFIGS,
) -> float:
    """ln p(y_tau) by enumerating every neighbor assignment of tau.

    Depth-first over the product space of neighborhoods, maintaining the count
    table incrementally so each branch costs O(1) Beta-ratio updates; the leaf
    weights stream through an online log-sum-exp.  Raises
    :class:`EnumerationBudgetError` when |tau| exceeds ``max_subset`` or the
    product of neighborhood sizes exceeds ``max_configs``.
    """
    tau = sorted(labels)
    if len(tau) > max_subset:
        raise EnumerationBudgetError(
            f"subset of {len(tau)} nodes exceeds exact-enumeration cap {max_subset}"
        )
    nbrs_list = []
    n_configs = 1
    for i in tau:
        nbrs = graph.neighborhood(i)
        nbrs_list.append(nbrs)
        n_configs *= len(nbrs)
        if n_configs > max_configs:
            raise EnumerationBudgetError(
                f"{n_configs}+ assignment configurations exceed cap {max_configs}"
            )

    alpha = params.alpha
    totals0 = params.alpha_totals
    log_attn = params.log_attn
    ys = [labels[i] for i in tau]

    # online log-sum-exp accumulator
    acc_max = NEG_INF
    acc_sum = 0.0

    counts: dict[int, int] = {}
    table: dict[int, list[int]] = {}
    n = len(tau)
    log_ = math.log

    def descend(d: int, logw: float) -> None:
        nonlocal acc_max, acc_sum
        if d == n:
            if logw > acc_max:
                acc_sum = acc_sum * math.exp(acc_max - logw) + 1.0 if acc_max != NEG_INF else 1.0
                acc_max = logw
            else:
                acc_sum += math.exp(logw - acc_max)
            return
        i = tau[d]
        y = ys[d]
        la_row = log_attn[i]
        for pos, j in enumerate(nbrs_list[d]):
            la = la_row[pos]
            if la == NEG_INF:
                continue
            j = int(j)
            row = table.get(j)
            if row is None:
                s_y = 0
                s_tot = 0
            else:
                s_y = row[y]
                s_tot = counts[j]
            w = la + log_(alpha[j, y] + s_y) - log_(totals0[j] + s_tot)
            if row is None:
                row = [0] * params.num_classes
                table[j] = row
                counts[j] = 0
            row[y] += 1
            counts[j] += 1
            descend(d + 1, logw + w)
            row[y] -= 1
            counts[j] -= 1
            if counts[j] == 0:
                del counts[j]
                del table[j]

    descend(0, 0.0)
    if acc_max == NEG_INF:
        return NEG_INF
    return acc_max + math.log(acc_sum)


def posterior_alpha(
    params: NmmParams,
    labels: Mapping[int, int],
    assignment: Mapping[int, int],
) -> np.ndarray:
    """Updated concentrations alpha'_j = alpha_j + s_j; untouched rows copy."""
    table = suff_stats(labels, assignment, params.num_classes)
    out = params.alpha.copy()
    for j, row in table.items():
        out[j] += np.asarray(row, dtype=float)
    return out


def dirichlet_draw(alpha_rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Row-wise Dirichlet samples via per-class gamma draws, normalized."""
    g = rng.standard_gamma(alpha_rows)
    g = np.maximum(g, 1e-300)  # guard against all-zero rows at tiny shapes
    return g / g.sum(axis=-1, keepdims=True)


def _categorical(probs: np.ndarray, u: float) -> int:
    acc = 0.0
    last = len(probs) - 1
    for k in range(last):
        acc += probs[k]
        if u < acc:
            return k
    return last


def sample_labels_ancestral(
    params: NmmParams, graph: Graph, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw (y, c) for every node by following the generative story:
    z_j ~ Dirichlet(alpha_j), c_i ~ Categorical(L_i), y_i ~ Categorical(z_{c_i})."""
    n = params.num_nodes
    z = dirichlet_draw(params.alpha, rng)
    c = np.empty(n, dtype=np.int64)
    us = rng.random(n)
    for i in range(n):
        nbrs = graph.neighborhood(i)
        c[i] = nbrs[_categorical(params.attn[i], us[i])]
    y = np.empty(n, dtype=np.int64)
    us = rng.random(n)
    for i in range(n):
        y[i] = _categorical(z[c[i]], us[i])
    return y, c


def sample_labels_marginalized(
    params: NmmParams, graph: Graph, rng: np.random.Generator
) -> np.ndarray:
    """Draw y with the neighbor indicators integrated out:
    y_i ~ Categorical(sum_j L[i,j] z_j)."""
    n = params.num_nodes
    z = dirichlet_draw(params.alpha, rng)
    y = np.empty(n, dtype=np.int64)
    us = rng.random(n)
    for i in range(n):
        nbrs = graph.neighborhood(i)
        mix = params.attn[i] @ z[nbrs]
        y[i] = _categorical(mix, us[i])
    return y


def node_marginal(params: NmmParams, i: int, graph: Graph) -> np.ndarray:
    """Exact single-node marginal p(y_i): the attention-weighted mixture of
    neighbor Dirichlet means."""
    nbrs = graph.neighborhood(i)
    means = params.alpha[nbrs] / params.alpha_totals[nbrs][:, None]
    return params.attn[i] @ means


def random_nmm_params(
    graph: Graph,
    num_classes: int,
    rng: np.random.Generator,
    alpha_low: float = 0.2,
    alpha_high: float = 5.0,
) -> NmmParams:
    """Random valid parameters: uniform concentrations, Dirichlet attention."""
    alpha = rng.uniform(alpha_low, alpha_high, size=(graph.num_nodes, num_classes))
    attn = []
    for i in range(graph.num_nodes):
        k = len(graph.neighborhood(i))
        row = rng.standard_gamma(np.ones(k))
        attn.append(row / row.sum())
    return NmmParams(alpha, tuple(attn))


def identity_attention_params(alpha: np.ndarray, graph: Graph) -> NmmParams:
    """Independence special case: every node attends only to itself."""
    attn = []
    for i in range(graph.num_nodes):
        nbrs = graph.neighborhood(i)
        row = np.zeros(len(nbrs))
        row[graph.neighbor_position(i, i)] = 1.0
        attn.append(row)
    return NmmParams(np.asarray(alpha, dtype=float), tuple(attn))


def save_params(params: NmmParams, path) -> None:
    """JSON snapshot; float round-trip is value-exact (shortest repr)."""
    doc = {
        "num_nodes": params.num_nodes,
        "num_classes": params.num_classes,
        "alpha": [[float(a) for a in row] for row in params.alpha],
        "attn": [[float(a) for a in row] for row in params.attn],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_params(path, graph: Graph | None = None) -> NmmParams:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    alpha = np.array(doc["alpha"], dtype=float)
    attn = tuple(np.array(row, dtype=float) for row in doc["attn"])
    params = NmmParams(alpha, attn)
    if graph is not None:
        params.validate(graph)
    return params
