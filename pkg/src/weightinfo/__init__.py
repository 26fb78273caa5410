"""weightinfo: estimate the information stored in network weights during
training, train under an information-penalized objective with SGLD, and
validate every approximation against brute-force oracles at small scale."""

from .data import (
    Dataset,
    corrupt_labels,
    load_idx,
    multinomial_bootstrap,
    poisson_weights,
    randomize_labels,
    subsample,
    synthetic_blobs,
    write_idx_images,
    write_idx_labels,
)
from .fisher import (
    GradientBuffer,
    bootstrap_covariance_oracle,
    empirical_fim_dense,
    fim_vector_product,
    fisher_true_dense,
    hessian_exact,
    hessian_fisher_gap,
    influence,
    influence_matrix,
    log_det_prior_cov,
    perturbed_shift,
    prior_cov_fisher,
)
from .iiw import (
    GaussianSpec,
    IiwEstimate,
    MovingAverageState,
    TrackConfig,
    TrackResult,
    estimate_iiw,
    gaussian_kl,
    pac_bayes_bound,
    track_iiw_during_training,
    update_moving_average,
)
from .nets import (
    NetworkSpec,
    OptimizerState,
    accuracy,
    apply_dropout,
    cross_entropy,
    forward,
    init_params,
    loss_and_grad,
    optimizer_step,
    per_sample_grads,
)
from .sgld import (
    PibResult,
    PosteriorSample,
    PriorSpec,
    SgldConfig,
    build_prior,
    energy_grad,
    posterior_predict,
    prior_neg_log_grad,
    run_pib_training,
    schedule,
    sgld_step,
)

__version__ = "0.1.0"
