"""Backbones mapping node features to (alpha, L) through tape-friendly ops.

Three interchangeable backbones produce per-node embeddings u_i (length C)
and v_i (length H):

* ``free``   — u, v read directly from the parameter vector (size scales
               with the graph in this mode only);
* ``linear`` — independent affine maps of the raw features for u and v;
* ``onehop`` — one round of mean aggregation over n(i), a relu hidden layer,
               and separate output heads for u and v.

The deterministic transform to model parameters is shared by all three:
``alpha_i = activation(u_i)`` entrywise (both activations keep every entry
above 1), and ``L_i = softmax_j of omega^2 * cos(v_i, v_j) + gamma*[j == i]``
over the neighborhood, with ``omega^2 = rho^2`` so the sharpness stays
non-negative while rho itself is unconstrained.  All operations accept tape
nodes or plain floats, so the same code path serves training and inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tape as tm
from .graph import Graph
from .kernel import NmmParams

__all__ = [
    "BackboneConfig",
    "EmbeddingOutputs",
    "ParamLayout",
    "TapedParams",
    "layout_for",
    "init_theta",
    "backbone_forward",
    "compute_params",
    "params_from_theta",
]

_KINDS = ("free", "linear", "onehop")
_ACTIVATIONS = ("softplus_plus_one", "square_plus_one")


@dataclass(frozen=True)
class BackboneConfig:
    """Backbone choice plus the attention-head hyperparameters."""

    kind: str = "free"
    embed_dim: int = 8
    alpha_activation: str = "softplus_plus_one"
    init_omega_sq: float = 1.0
    init_gamma: float = 0.0
    hidden_dim: int = 16

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.alpha_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown alpha activation {self.alpha_activation!r}")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be at least 1")
        if self.init_omega_sq < 0.0:
            raise ValueError("init_omega_sq must be non-negative")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "embed_dim": self.embed_dim,
            "alpha_activation": self.alpha_activation,
            "init_omega_sq": self.init_omega_sq,
            "init_gamma": self.init_gamma,
            "hidden_dim": self.hidden_dim,
        }

    @staticmethod
    def from_dict(doc: dict) -> "BackboneConfig":
        return BackboneConfig(**doc)


@dataclass
class EmbeddingOutputs:
    """Per-node embedding rows plus the learnable attention scalars."""

    u: list  # N rows of length C (floats or tape nodes)
    v: list  # N rows of length H
    rho: object  # omega^2 = rho^2
    gamma: object


@dataclass(frozen=True)
class ParamLayout:
    """Named blocks of the flat parameter vector."""

    blocks: tuple[tuple[str, tuple[int, ...]], ...]
    penalized: frozenset = field(default_factory=frozenset)

    @property
    def size(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.blocks)

    def slices(self) -> dict[str, slice]:
        out = {}
        start = 0
        for name, shape in self.blocks:
            n = int(np.prod(shape))
            out[name] = slice(start, start + n)
            start += n
        return out

    def block(self, theta: Sequence, name: str) -> list:
        sl = self.slices()[name]
        return list(theta[sl])

    def penalty_mask(self) -> np.ndarray:
        mask = np.zeros(self.size)
        sls = self.slices()
        for name in self.penalized:
            mask[sls[name]] = 1.0
        return mask


def layout_for(
    config: BackboneConfig, num_nodes: int, num_features: int, num_classes: int
) -> ParamLayout:
    c, h = num_classes, config.embed_dim
    if config.kind == "free":
        blocks = (("u", (num_nodes, c)), ("v", (num_nodes, h)))
        penalized: tuple[str, ...] = ()
    elif config.kind == "linear":
        if num_features < 1:
            raise ValueError("linear backbone requires node features")
        blocks = (
            ("W_u", (c, num_features)),
            ("b_u", (c,)),
            ("W_v", (h, num_features)),
            ("b_v", (h,)),
        )
        penalized = ("W_u", "b_u", "W_v", "b_v")
    else:  # onehop
        if num_features < 1:
            raise ValueError("onehop backbone requires node features")
        k = config.hidden_dim
        blocks = (
            ("W1", (k, num_features)),
            ("b1", (k,)),
            ("W2", (c, k)),
            ("b2", (c,)),
            ("W3", (h, k)),
            ("b3", (h,)),
        )
        penalized = ("W1", "b1", "W2", "b2", "W3", "b3")
    blocks = blocks + (("rho", (1,)), ("gamma", (1,)))
    return ParamLayout(blocks, frozenset(penalized))


def init_theta(
    config: BackboneConfig, layout: ParamLayout, rng: np.random.Generator
) -> np.ndarray:
    """Symmetric uniform init for weight matrices (a = sqrt(6/(fan_in+fan_out))),
    zero biases; free mode starts u at zero and v at 0.1 * standard normal."""
    theta = np.zeros(layout.size)
    sls = layout.slices()
    for name, shape in layout.blocks:
        if name.startswith("W"):
            fan_out, fan_in = shape
            a = np.sqrt(6.0 / (fan_in + fan_out))
            theta[sls[name]] = rng.uniform(-a, a, size=int(np.prod(shape)))
        elif name == "v":
            theta[sls[name]] = 0.1 * rng.standard_normal(int(np.prod(shape)))
        elif name == "rho":
            theta[sls[name]] = np.sqrt(config.init_omega_sq)
        elif name == "gamma":
            theta[sls[name]] = config.init_gamma
        # u and biases stay zero
    return theta


def _affine(W_rows: list[list], b: list, x: np.ndarray) -> list:
    return [tm.dot(w_row, x) + b_k for w_row, b_k in zip(W_rows, b)]


def _as_rows(flat: list, rows: int, cols: int) -> list[list]:
    return [flat[r * cols : (r + 1) * cols] for r in range(rows)]


def backbone_forward(
    config: BackboneConfig, theta: Sequence, graph: Graph
) -> EmbeddingOutputs:
    """Evaluate the backbone at ``theta`` (tape nodes or floats)."""
    num_nodes = graph.num_nodes
    feats = graph.features
    if config.kind != "free" and feats is None:
        raise ValueError(f"backbone {config.kind!r} requires node features")
    num_features = 0 if feats is None else feats.shape[1]

    # num_classes is implied by the layout; recover it from theta's length
    c = _infer_num_classes(config, len(theta), num_nodes, num_features)
    layout = layout_for(config, num_nodes, num_features, c)
    if layout.size != len(theta):
        raise ValueError(
            f"theta has {len(theta)} entries, layout expects {layout.size}"
        )
    h = config.embed_dim
    rho = layout.block(theta, "rho")[0]
    gamma = layout.block(theta, "gamma")[0]

    if config.kind == "free":
        u = _as_rows(layout.block(theta, "u"), num_nodes, c)
        v = _as_rows(layout.block(theta, "v"), num_nodes, h)
        return EmbeddingOutputs(u, v, rho, gamma)

    if config.kind == "linear":
        W_u = _as_rows(layout.block(theta, "W_u"), c, num_features)
        b_u = layout.block(theta, "b_u")
        W_v = _as_rows(layout.block(theta, "W_v"), h, num_features)
        b_v = layout.block(theta, "b_v")
        u = [_affine(W_u, b_u, feats[i]) for i in range(num_nodes)]
        v = [_affine(W_v, b_v, feats[i]) for i in range(num_nodes)]
        return EmbeddingOutputs(u, v, rho, gamma)

    # onehop: mean aggregation over the self-inclusive neighborhood
    k = config.hidden_dim
    W1 = _as_rows(layout.block(theta, "W1"), k, num_features)
    b1 = layout.block(theta, "b1")
    W2 = _as_rows(layout.block(theta, "W2"), c, k)
    b2 = layout.block(theta, "b2")
    W3 = _as_rows(layout.block(theta, "W3"), h, k)
    b3 = layout.block(theta, "b3")
    u, v = [], []
    for i in range(num_nodes):
        mean_x = feats[graph.neighborhood(i)].mean(axis=0)
        hidden = [tm.relu(z) for z in _affine(W1, b1, mean_x)]
        u.append([tm.vsum([w * hk for w, hk in zip(row, hidden)]) + bk
                  for row, bk in zip(W2, b2)])
        v.append([tm.vsum([w * hk for w, hk in zip(row, hidden)]) + bk
                  for row, bk in zip(W3, b3)])
    return EmbeddingOutputs(u, v, rho, gamma)


def _infer_num_classes(
    config: BackboneConfig, theta_len: int, num_nodes: int, num_features: int
) -> int:
    if config.kind == "free":
        rem = theta_len - 2 - num_nodes * config.embed_dim
        c, check = divmod(rem, num_nodes)
    elif config.kind == "linear":
        rem = theta_len - 2 - (num_features + 1) * config.embed_dim
        c, check = divmod(rem, num_features + 1)
    else:
        k = config.hidden_dim
        rem = theta_len - 2 - k * (num_features + 1) - (k + 1) * config.embed_dim
        c, check = divmod(rem, k + 1)
    if check != 0 or c < 2:
        raise ValueError("theta length does not match any class count")
    return c


@dataclass
class TapedParams:
    """Differentiable view of (alpha, log L) aligned with neighborhoods."""

    alpha: list[list]       # N x C nodes
    alpha_tot: list         # N nodes
    log_attn: list[list]    # ragged, aligned with graph.neighborhood(i)

    def to_numeric(self, graph: Graph) -> NmmParams:
        n = len(self.alpha)
        alpha = np.array(
            [[tm.value_of(a) for a in row] for row in self.alpha], dtype=float
        )
        attn = tuple(
            np.exp(np.array([tm.value_of(s) for s in self.log_attn[i]]))
            for i in range(n)
        )
        return NmmParams(alpha, attn)


def _alpha_entry(u_ic, activation: str):
    if activation == "softplus_plus_one":
        return tm.softplus(u_ic) + 1.0
    return tm.square(u_ic) + 1.0


def compute_params(
    config: BackboneConfig, outputs: EmbeddingOutputs, graph: Graph
):
    """Transform embeddings into model parameters.

    Returns an :class:`NmmParams` when the embeddings are plain numbers and a
    :class:`TapedParams` when they are tape nodes (the transform itself is
    identical, so gradients flow end to end).
    """
    num_nodes = graph.num_nodes
    act = config.alpha_activation
    alpha_rows = [
        [_alpha_entry(u_ic, act) for u_ic in outputs.u[i]] for i in range(num_nodes)
    ]
    alpha_tot = [tm.vsum(row) for row in alpha_rows]
    omega_sq = tm.square(outputs.rho)

    norms_sq = [tm.dot(outputs.v[i], outputs.v[i]) for i in range(num_nodes)]
    norms = [
        tm.sqrt(nsq) if tm.value_of(nsq) > 0.0 else 0.0 for nsq in norms_sq
    ]

    def cos(i: int, j: int):
        if tm.value_of(norms_sq[i]) == 0.0 or tm.value_of(norms_sq[j]) == 0.0:
            return 0.0
        return tm.dot(outputs.v[i], outputs.v[j]) / (norms[i] * norms[j])

    log_attn_rows = []
    for i in range(num_nodes):
        nbrs = graph.neighborhood(i)
        logits = []
        for j in nbrs:
            s = omega_sq * cos(i, int(j))
            if int(j) == i:
                s = s + outputs.gamma
            logits.append(s)
        lse = tm.logsumexp(logits)
        log_attn_rows.append([s - lse for s in logits])

    taped = any(
        type(x) is tm.Node
        for x in (outputs.rho, outputs.gamma)
    ) or any(type(x) is tm.Node for row in outputs.u for x in row) or any(
        type(x) is tm.Node for row in outputs.v for x in row
    )
    result = TapedParams(alpha_rows, alpha_tot, log_attn_rows)
    if taped:
        return result
    return result.to_numeric(graph)


def params_from_theta(
    config: BackboneConfig, theta: Sequence, graph: Graph
) -> "NmmParams | TapedParams":
    """Full map theta -> (alpha, L); numeric in, numeric out."""
    return compute_params(config, backbone_forward(config, theta, graph), graph)
