"""Fisher-information operators, Hessians, influence functions, and the
bootstrap covariance oracle.

Two representations of the gradient second-moment matrix coexist: a dense
(D x D) matrix for small models, and an implicit rank-T form held as a ring
buffer of gradients.  Every implicit-path operation has a dense counterpart it
is tested against.
"""

from __future__ import annotations

import numpy as np

from . import nets
from .data import Dataset, poisson_weights
from .errors import CapacityError, ConfigError, ConvergenceError, NumericError, ShapeError

DENSE_DIM_GUARD = 2000


class GradientBuffer:
    """Ring buffer of gradient vectors; an implicit rank-T second-moment matrix.

    With stored rows g_1..g_T (all evaluated at one reference point), the
    matrix represented is (1/T) sum_t g_t g_t^T.
    """

    def __init__(self, capacity: int, mode: str = "minibatch"):
        if capacity < 1:
            raise ConfigError("buffer capacity must be >= 1")
        if mode not in ("minibatch", "per_sample"):
            raise ConfigError(f"unknown gradient mode {mode!r}")
        self.capacity = int(capacity)
        self.mode = mode
        self._rows: np.ndarray | None = None
        self._count = 0
        self._next = 0

    def add(self, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=np.float64)
        if grad.ndim != 1:
            raise ShapeError("gradients must be flat vectors")
        if self._rows is None:
            self._rows = np.empty((self.capacity, grad.size))
        elif grad.size != self._rows.shape[1]:
            raise ShapeError(f"gradient length {grad.size} != buffer width {self._rows.shape[1]}")
        self._rows[self._next] = grad
        self._next = (self._next + 1) % self.capacity
        self._count = min(self._count + 1, self.capacity)

    def add_rows(self, grads: np.ndarray) -> None:
        for row in np.asarray(grads, dtype=np.float64):
            self.add(row)

    def clear(self) -> None:
        self._count = 0
        self._next = 0

    @property
    def count(self) -> int:
        return self._count

    @property
    def dim(self) -> int:
        if self._rows is None:
            raise NumericError("empty gradient buffer has no dimension")
        return self._rows.shape[1]

    def as_matrix(self) -> np.ndarray:
        """Stored gradients as a (count x D) matrix (storage order, oldest-first not guaranteed)."""
        if self._count == 0:
            raise NumericError("gradient buffer is empty")
        return self._rows[: self._count]


def empirical_fim_dense(grads: np.ndarray, max_dim: int = DENSE_DIM_GUARD) -> np.ndarray:
    """Dense (1/T) sum_t g_t g_t^T from a (T x D) gradient matrix."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.ndim != 2 or grads.shape[0] < 1:
        raise ShapeError(f"need a (T, D) gradient matrix, got {grads.shape}")
    if grads.shape[1] > max_dim:
        raise CapacityError(
            f"D={grads.shape[1]} exceeds dense guard {max_dim}; use fim_vector_product"
        )
    f = grads.T @ grads / grads.shape[0]
    return 0.5 * (f + f.T)


def fim_vector_product(buffer: GradientBuffer, v: np.ndarray) -> np.ndarray:
    """F v without materializing F: (1/T) sum_t g_t (g_t . v).  Cost O(T D)."""
    g = buffer.as_matrix()
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (g.shape[1],):
        raise ShapeError(f"vector length {v.shape} != gradient dimension {g.shape[1]}")
    return g.T @ (g @ v) / g.shape[0]


def fisher_true_dense(
    net: nets.NetworkSpec,
    params: np.ndarray,
    ds: Dataset,
    max_dim: int = DENSE_DIM_GUARD,
) -> np.ndarray:
    """Model-expectation Fisher matrix (1/n) sum_i J_i^T (diag(p_i) - p_i p_i^T) J_i.

    The expectation over the model's own label distribution makes this the
    Gauss-Newton curvature of the cross-entropy; it coincides with the Hessian
    exactly when the logits are linear in the parameters.
    """
    if net.num_params > max_dim:
        raise CapacityError(f"D={net.num_params} exceeds dense guard {max_dim}")
    jac = nets.logits_jacobian(net, params, ds.inputs)
    probs = nets.softmax(nets.forward(net, params, ds.inputs))
    m = np.einsum("bc,ce->bce", probs, np.eye(net.num_classes)) - np.einsum(
        "bc,be->bce", probs, probs
    )
    f = np.einsum("bci,bck,bkj->ij", jac, m, jac) / ds.n
    return 0.5 * (f + f.T)


def hessian_from_grad(grad_fn, params: np.ndarray, max_dim: int = DENSE_DIM_GUARD) -> np.ndarray:
    """Hessian of any objective by central differences of its gradient.

    Step h_j = 1e-5 * (1 + |theta_j|) per coordinate; the result is
    symmetrized, which also averages away most finite-difference noise.
    """
    params = np.asarray(params, dtype=np.float64)
    d = params.size
    if d > max_dim:
        raise CapacityError(f"D={d} exceeds dense guard {max_dim}")
    h = np.empty((d, d))
    for j in range(d):
        step = 1e-5 * (1.0 + abs(params[j]))
        up = params.copy()
        up[j] += step
        down = params.copy()
        down[j] -= step
        h[:, j] = (grad_fn(up) - grad_fn(down)) / (2.0 * step)
    return 0.5 * (h + h.T)


def hessian_exact(
    net: nets.NetworkSpec,
    params: np.ndarray,
    ds: Dataset,
    max_dim: int = DENSE_DIM_GUARD,
    clip: float | None = None,
) -> np.ndarray:
    """Hessian of the network's mean loss over the dataset (finite differences)."""

    def grad_fn(p):
        _, g = nets.loss_and_grad(net, p, ds.inputs, ds.labels, clip=clip)
        return g

    return hessian_from_grad(grad_fn, params, max_dim=max_dim)


def influence(H: np.ndarray, grad_j: np.ndarray, damping: float = 0.0) -> np.ndarray:
    """Influence vector -(H + damping I)^{-1} grad_j.

    The predicted parameter shift from leaving sample j out is -psi/n; from
    reweighting sample j by xi_j it is (xi_j - 1) * psi / n.
    """
    H = np.asarray(H, dtype=np.float64)
    grad_j = np.asarray(grad_j, dtype=np.float64)
    a = H + damping * np.eye(H.shape[0])
    try:
        psi = -np.linalg.solve(a, grad_j)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"Hessian singular even with damping {damping}") from exc
    if not np.all(np.isfinite(psi)):
        raise NumericError("non-finite influence vector")
    return psi


def influence_matrix(H: np.ndarray, grads: np.ndarray, damping: float = 0.0) -> np.ndarray:
    """All influence vectors at once: rows of -(H + damping I)^{-1} G^T, shape (n x D)."""
    H = np.asarray(H, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    a = H + damping * np.eye(H.shape[0])
    try:
        psi = -np.linalg.solve(a, grads.T).T
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"Hessian singular even with damping {damping}") from exc
    return psi


def perturbed_shift(psi_set: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """First-order minimizer shift under per-sample reweighting: (1/n) Psi^T (xi - 1)."""
    psi_set = np.asarray(psi_set, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    if psi_set.ndim != 2 or xi.shape != (psi_set.shape[0],):
        raise ShapeError(f"need (n, D) influence rows and (n,) weights, got {psi_set.shape}, {xi.shape}")
    return psi_set.T @ (xi - 1.0) / psi_set.shape[0]


def bootstrap_covariance_oracle(
    ds: Dataset,
    num_resamples: int,
    trainer,
    rng: np.random.Generator,
) -> np.ndarray:
    """Empirical covariance of Poisson-reweighted retrained minimizers.

    ``trainer(dataset, xi)`` must return the minimizer of the xi-reweighted
    empirical risk (xi=None meaning all-ones) and raise ConvergenceError if it
    cannot reach its tolerance.  This is the brute-force reference the
    Fisher-based prior covariance is checked against.
    """
    if num_resamples < 2:
        raise ConfigError("need at least 2 bootstrap resamples")
    center = trainer(ds, None)
    dim = center.size
    cov = np.zeros((dim, dim))
    for k in range(num_resamples):
        xi = poisson_weights(ds.n, rng)
        try:
            theta_k = trainer(ds, xi.astype(np.float64))
        except ConvergenceError as exc:
            raise ConvergenceError(f"bootstrap retraining {k} failed: {exc}") from exc
        delta = theta_k - center
        cov += np.outer(delta, delta)
    cov /= num_resamples
    return 0.5 * (cov + cov.T)


def default_damping(diag_mean: float) -> float:
    """Tikhonov damping proportional to the mean diagonal of F (1e-8 relative)."""
    return 1e-8 * max(diag_mean, 0.0)


def prior_cov_fisher(F: np.ndarray, n: int, damping: float = 0.0) -> np.ndarray:
    """Prior covariance surrogate (1/n) (F + damping I)^{-1}, symmetric PD."""
    F = np.asarray(F, dtype=np.float64)
    a = F + damping * np.eye(F.shape[0])
    try:
        inv = np.linalg.inv(a)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"F singular even with damping {damping}") from exc
    cov = inv / n
    return 0.5 * (cov + cov.T)


def log_det_prior_cov(buffer: GradientBuffer, damping: float, n: int) -> float:
    """log det[(1/n)(F + eps I)^{-1}] through the T x T Gram matrix.

    The nonzero eigenvalues of F = (1/T) G^T G equal those of the Gram matrix
    (1/T) G G^T, so the log-determinant of the damped inverse is

        -sum_r log(mu_r + eps) - (D - r) log(eps) - D log(n)

    without ever forming a D x D matrix.
    """
    if damping <= 0.0:
        raise ConfigError("damping must be positive: F is rank deficient whenever T < D")
    if n < 1:
        raise ConfigError("need n >= 1")
    g = buffer.as_matrix()
    t, dim = g.shape
    gram = g @ g.T / t
    mu = np.linalg.eigvalsh(0.5 * (gram + gram.T))
    # rank cutoff relative to the largest eigenvalue, standard matrix-rank tolerance
    tol = max(mu.max(), 0.0) * max(t, dim) * np.finfo(np.float64).eps
    nonzero = mu[mu > tol]
    r = nonzero.size
    return float(-np.sum(np.log(nonzero + damping)) - (dim - r) * np.log(damping) - dim * np.log(n))


def hessian_fisher_gap(
    net: nets.NetworkSpec,
    params: np.ndarray,
    ds: Dataset,
    max_dim: int = DENSE_DIM_GUARD,
) -> float:
    """Relative Frobenius gap ||H - F||_F / ||F||_F between Hessian and Fisher.

    Small near a well-fit minimum (where the residual term of the Gauss-Newton
    decomposition vanishes); typically large at random weights.  Diagnostic
    only.
    """
    h = hessian_exact(net, params, ds, max_dim=max_dim)
    f = fisher_true_dense(net, params, ds, max_dim=max_dim)
    denom = np.linalg.norm(f)
    if denom == 0.0:
        raise NumericError("Fisher matrix is identically zero")
    return float(np.linalg.norm(h - f) / denom)
