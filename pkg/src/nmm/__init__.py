"""Neighbor mixture models over graph node labels.

A generative model in which every node borrows the latent label-probability
vector of one attended neighbor; integrating the Dirichlet vectors out leaves
a tractable collapsed joint over labels and neighbor choices.  The package
covers exact desk-scale inference by enumeration, a parameter-free
autoregressive variational posterior, score-function parameter learning,
conditional label prediction, and KL-minimizing approximation of external
Ising targets, plus a CLI over all of it.
"""

from .graph import (
    Graph,
    UNKNOWN_LABEL,
    load_edge_list,
    load_features,
    load_labels,
    load_split,
    make_grid_graph,
    make_random_graph,
    save_edge_list,
)
from .kernel import (
    CountTable,
    EnumerationBudgetError,
    NmmParams,
    exact_marginal,
    identity_attention_params,
    load_params,
    log_joint,
    node_marginal,
    posterior_alpha,
    random_nmm_params,
    sample_labels_ancestral,
    sample_labels_marginalized,
    save_params,
    suff_stats,
)
from .learning import Adam, TrainConfig, TrainResult, TrainingDiverged, reinforce_gradient, train
from .parameterize import BackboneConfig, backbone_forward, compute_params, init_theta, layout_for, params_from_theta
from .predict import (
    ParticleSet,
    greedy_decode,
    init_particles,
    pairwise_ll,
    predict_exact_smallset,
    predict_marginal,
)
from .special import digamma, log_beta, log_gamma
from .tape import GradCheckReport, Node, Tape, TapeError, check_gradient, record_and_backward
from .util import rng_from_seed
from .variational import QSample, elbo_estimate, extend_sample, q_conditional, sample_q
from .ising import (
    IsingModel,
    MeanFieldState,
    exact_kl_oracle,
    ising_log_unnorm,
    kl_upper_bound,
    make_ising_grid,
    mean_field_fit,
)

__version__ = "0.1.0"
