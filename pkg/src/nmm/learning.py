"""Stochastic maximum-likelihood training of the bound over theta.

The gradient estimator is plain REINFORCE with a leave-one-out baseline.
With f_t = ln p(y, c_t) - ln q(c_t) and b_t the mean of the other samples'
f values, the per-step estimate is

    (1/T) sum_t [ (f_t - b_t) * grad ln q_t + grad ln p_t - grad ln q_t ],

which collapses onto the tape as one backward pass from
sum_t [ln p_t + (f_t - b_t - 1) * ln q_t] / T, the coefficients being
constants.  Both log masses of a sample share their tape subexpressions: the
chosen candidate's log-weight is simultaneously the joint increment and the
numerator of the q factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tape as tm
from .graph import Graph
from .kernel import NmmParams
from .parameterize import (
    BackboneConfig,
    TapedParams,
    init_theta,
    layout_for,
    params_from_theta,
)
from .variational import sample_q
from .util import rng_from_seed

__all__ = [
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "Adam",
    "loo_coefficients",
    "taped_replay",
    "reinforce_gradient",
    "train",
]


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, trace: list | None = None):
        super().__init__(message)
        self.trace = trace or []


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 0.01
    num_samples: int = 8
    baseline: str = "loo"  # "none" | "loo"
    seed: int = 0
    l2: float = 0.005
    patience: int = 100

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError("num_samples must be at least 1")
        if self.baseline not in ("none", "loo"):
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.baseline == "loo" and self.num_samples < 2:
            raise ValueError("leave-one-out baseline needs at least 2 samples")


@dataclass
class TrainResult:
    theta: np.ndarray
    trace: list[dict] = field(default_factory=list)
    best_epoch: int | None = None


class Adam:
    """Adaptive-moment first-order updates (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, size: int, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """One descent step along ``grad``; pass the negated gradient to ascend."""
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def loo_coefficients(f_values: list[float]) -> list[float]:
    """f_t minus the mean of the other samples; exactly invariant to adding a
    shared constant to every f_t."""
    t = len(f_values)
    if t < 2:
        raise ValueError("leave-one-out baseline needs at least 2 samples")
    total = math.fsum(f_values)
    return [f - (total - f) / (t - 1) for f in f_values]


def taped_replay(
    taped: TapedParams,
    graph: Graph,
    order: list[int],
    assignment: Mapping[int, int],
    labels: Mapping[int, int],
):
    """Re-walk a frozen (order, assignment) on the tape.

    Returns (log_joint_node, log_q_node).  Counts are plain integers; the
    differentiable quantities are the alpha entries and log-attention terms.
    """
    counts: dict[int, list[int]] = {}
    totals: dict[int, int] = {}
    lj_terms = []
    lq_terms = []
    for i in order:
        y_i = labels[i]
        nbrs = graph.neighborhood(i)
        la_row = taped.log_attn[i]
        ws = []
        for pos, j in enumerate(nbrs):
            j = int(j)
            row = counts.get(j)
            s_y = row[y_i] if row is not None else 0
            s_tot = totals.get(j, 0)
            w = (
                la_row[pos]
                + tm.log(taped.alpha[j][y_i] + s_y)
                - tm.log(taped.alpha_tot[j] + s_tot)
            )
            ws.append(w)
        lse = tm.logsumexp(ws)
        cpos = graph.neighbor_position(i, assignment[i])
        lj_terms.append(ws[cpos])
        lq_terms.append(ws[cpos] - lse)
        j = assignment[i]
        row = counts.get(j)
        if row is None:
            row = [0] * len(taped.alpha[0])
            counts[j] = row
            totals[j] = 0
        row[y_i] += 1
        totals[j] += 1
    return tm.vsum(lj_terms), tm.vsum(lq_terms)


def reinforce_gradient(
    config: BackboneConfig,
    theta: np.ndarray,
    graph: Graph,
    labels: Mapping[int, int],
    num_samples: int,
    rng: np.random.Generator,
    baseline: str = "loo",
) -> tuple[float, np.ndarray]:
    """Estimate the bound and its gradient with respect to theta.

    Draws ``num_samples`` assignments from q, then differentiates the combined
    objective described in the module docstring through (alpha, L) into theta.
    """
    t = tm.Tape()
    try:
        theta_nodes = t.inputs(theta)
        taped = params_from_theta(config, theta_nodes, graph)
    except tm.TapeError as err:
        raise TrainingDiverged(f"non-finite parameterization: {err}") from err
    numeric = taped.to_numeric(graph)

    if not labels:
        return 0.0, np.zeros(len(theta))

    try:
        draws = [sample_q(numeric, labels, graph, rng) for _ in range(num_samples)]
        pairs = [
            taped_replay(taped, graph, s.permutation, s.assignment, labels)
            for s in draws
        ]
    except tm.TapeError as err:
        raise TrainingDiverged(f"non-finite sample term: {err}") from err
    f_values = [lj.value - lq.value for lj, lq in pairs]
    if baseline == "loo" and num_samples >= 2:
        centered = loo_coefficients(f_values)
    else:
        centered = f_values
    terms = []
    for (lj, lq), coeff in zip(pairs, centered):
        terms.append(lj + (coeff - 1.0) * lq)
    objective = tm.vsum(terms) * (1.0 / num_samples)
    try:
        grad = t.gradient(objective, theta_nodes)
    except tm.TapeError as err:
        raise TrainingDiverged(f"non-finite gradient: {err}") from err
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise TrainingDiverged(f"non-finite gradient entry for parameter {bad}")
    return float(np.mean(f_values)), grad


def _validation_accuracy(
    config: BackboneConfig,
    theta: np.ndarray,
    graph: Graph,
    train_labels: Mapping[int, int],
    val_labels: Mapping[int, int],
    rng: np.random.Generator,
    num_particles: int = 8,
) -> float:
    # local import: predict builds on this module's sampling artifacts
    from .predict import init_particles, predict_marginal

    if not val_labels:
        return float("nan")
    params = params_from_theta(config, theta, graph)
    particles = init_particles(params, train_labels, graph, num_particles, rng)
    hits = 0
    for i in sorted(val_labels):
        probs = predict_marginal(params, particles, i, graph)
        if int(np.argmax(probs)) == val_labels[i]:
            hits += 1
    return hits / len(val_labels)


def train(
    config: TrainConfig,
    backbone: BackboneConfig,
    graph: Graph,
    train_labels: Mapping[int, int],
    val_labels: Mapping[int, int] | None = None,
    init: np.ndarray | None = None,
    num_classes: int | None = None,
) -> TrainResult:
    """Ascend the bound over observed labels; adaptive-moment steps, optional
    early stopping on validation accuracy, best-validation snapshot returned.

    Without a validation set the final parameters are returned.  Raises
    :class:`TrainingDiverged` (with the trace attached) if the bound estimate
    stops being finite.
    """
    if not train_labels:
        raise ValueError("train requires at least one observed label")
    if num_classes is None:
        num_classes = _num_classes_of(train_labels, val_labels)
    num_features = 0 if graph.features is None else graph.features.shape[1]
    layout = layout_for(backbone, graph.num_nodes, num_features, num_classes)
    theta = init_theta(backbone, layout, rng_from_seed(config.seed, 1)) if init is None else init.copy()
    if len(theta) != layout.size:
        raise ValueError("initial theta does not match the layout")

    opt = Adam(layout.size, config.lr)
    penalty_mask = layout.penalty_mask()
    rng_train = rng_from_seed(config.seed, 2)
    trace: list[dict] = []
    best_theta = theta.copy()
    best_acc = -np.inf
    best_epoch: int | None = None
    since_best = 0

    for epoch in range(config.epochs):
        try:
            elbo, grad = reinforce_gradient(
                backbone, theta, graph, train_labels, config.num_samples,
                rng_train, baseline=config.baseline,
            )
        except TrainingDiverged as err:
            raise TrainingDiverged(f"epoch {epoch}: {err}", trace) from err
        if not math.isfinite(elbo):
            raise TrainingDiverged(f"bound diverged at epoch {epoch}", trace)
        if config.l2 > 0.0:
            grad = grad - 2.0 * config.l2 * penalty_mask * theta
        theta = opt.step(theta, -grad)

        record: dict = {"epoch": epoch, "elbo": elbo}
        if val_labels:
            acc = _validation_accuracy(
                backbone, theta, graph, train_labels, val_labels,
                rng_from_seed(config.seed, 3, epoch),
            )
            record["val_acc"] = acc
            if acc > best_acc:
                best_acc = acc
                best_theta = theta.copy()
                best_epoch = epoch
                since_best = 0
            else:
                since_best += 1
        trace.append(record)
        if val_labels and since_best >= config.patience:
            break

    if val_labels and best_epoch is not None:
        return TrainResult(best_theta, trace, best_epoch)
    return TrainResult(theta, trace, None)


def _num_classes_of(*label_maps) -> int:
    top = 1
    for m in label_maps:
        if m:
            top = max(top, max(m.values()) + 1)
    return max(2, top)
