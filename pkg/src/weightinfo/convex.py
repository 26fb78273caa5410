"""Full-batch trainers for small convex models.

These exist to serve the brute-force oracles: bootstrap retraining and
leave-one-out style checks need minimizers pinned down to a tight gradient
tolerance, which is only practical for convex objectives (softmax regression
with an L2 term, ridge regression).
"""

from __future__ import annotations

import numpy as np

from . import nets
from .data import Dataset
from .errors import ConvergenceError


def weighted_objective(
    net: nets.NetworkSpec,
    params: np.ndarray,
    ds: Dataset,
    xi: np.ndarray | None,
    l2: float,
) -> tuple[float, np.ndarray]:
    """Value and gradient of (1/n) sum_i xi_i * (ce_i + l2/2 ||theta||^2).

    Each sample's loss carries its own share of the regularizer, so the
    per-sample losses used by influence functions and this objective agree.
    """
    loss, grad = nets.loss_and_grad(net, params, ds.inputs, ds.labels, sample_weights=xi)
    weight_mass = 1.0 if xi is None else float(np.mean(xi))
    if l2 > 0.0:
        loss += 0.5 * l2 * weight_mass * float(params @ params)
        grad = grad + l2 * weight_mass * params
    return loss, grad


def gd_minimize(value_grad, x0: np.ndarray, tol: float = 1e-9, max_iters: int = 200_000) -> np.ndarray:
    """Full-batch gradient descent with Armijo backtracking to ||grad|| <= tol.

    Value-based line searches stall once objective differences drop below
    float granularity, so prefer :func:`gd_minimize_fixed` with a curvature
    bound when one is available; this generic version suits loose tolerances.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    value, grad = value_grad(x)
    step = 1.0
    for _ in range(max_iters):
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol:
            return x
        step = min(step * 2.0, 1e6)  # allow the step to grow back after conservative phases
        while True:
            candidate = x - step * grad
            cand_value, cand_grad = value_grad(candidate)
            if cand_value <= value - 1e-4 * step * gnorm * gnorm:
                break
            step *= 0.5
            if step < 1e-18:
                raise ConvergenceError("line search failed: no descent direction at machine precision")
        x, value, grad = candidate, cand_value, cand_grad
    raise ConvergenceError(f"gradient norm {float(np.linalg.norm(grad)):.3e} after {max_iters} iterations")


def gd_minimize_fixed(
    grad_fn, x0: np.ndarray, step: float, tol: float = 1e-9, max_iters: int = 200_000
) -> np.ndarray:
    """Fixed-step gradient descent to ||grad|| <= tol.

    With step <= 1/L on an L-smooth strongly convex objective the gradient
    norm contracts geometrically all the way down to machine scale, with no
    value comparison to stall on.  The step is halved if the gradient norm
    ever grows substantially (a conservative divergence guard).
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    grad = grad_fn(x)
    gnorm = float(np.linalg.norm(grad))
    for _ in range(max_iters):
        if gnorm <= tol:
            return x
        x = x - step * grad
        grad = grad_fn(x)
        new_norm = float(np.linalg.norm(grad))
        if not np.isfinite(new_norm) or new_norm > 2.0 * gnorm:
            step *= 0.5
            if step < 1e-18:
                raise ConvergenceError("fixed-step descent diverged at machine precision")
        gnorm = new_norm
    raise ConvergenceError(f"gradient norm {gnorm:.3e} after {max_iters} iterations")


def _softmax_step_bound(ds: Dataset, xi: np.ndarray | None, l2: float) -> float:
    """1/L for the weighted softmax objective.

    The logit curvature of softmax cross-entropy is at most 1/2, so
    L <= 0.5 * lambda_max((1/n) sum_i xi_i x~_i x~_i^T) + l2 * mean(xi) with
    x~ the input extended by the bias constant 1.
    """
    n = ds.n
    weights = np.ones(n) if xi is None else np.asarray(xi, dtype=np.float64)
    if weights.sum() <= 0:
        raise ConvergenceError("all resampling weights are zero")
    extended = np.hstack([ds.inputs, np.ones((n, 1))])
    moment = (extended * weights[:, None]).T @ extended / n
    lam_max = float(np.linalg.eigvalsh(moment)[-1])
    lipschitz = 0.5 * lam_max + l2 * float(weights.mean())
    return 1.0 / lipschitz


def make_softmax_trainer(
    net: nets.NetworkSpec,
    l2: float,
    init: np.ndarray,
    tol: float = 1e-9,
    max_iters: int = 200_000,
):
    """Trainer callable (dataset, xi) -> minimizer for the reweighted objective.

    Always warm-starts from the same `init` so retrained minimizers differ
    only through the weights, not the starting point.
    """
    if net.num_layers != 1:
        raise ConvergenceError("convex trainer requires a single linear layer (softmax regression)")
    init = np.asarray(init, dtype=np.float64).copy()

    def trainer(ds: Dataset, xi: np.ndarray | None) -> np.ndarray:
        step = _softmax_step_bound(ds, xi, l2)

        def grad_fn(p):
            _, g = weighted_objective(net, p, ds, xi, l2)
            return g

        return gd_minimize_fixed(grad_fn, init, step, tol=tol, max_iters=max_iters)

    return trainer


# ---------------------------------------------------------------------------
# binary logistic regression
#
# Unlike the two-class softmax net, the single-logit parameterization has no
# gauge freedom, so its Fisher matrix is well conditioned; this is the model
# the retraining-based prior-covariance checks run on.


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _with_bias(x):
    return np.hstack([x, np.ones((x.shape[0], 1))])


def logistic_per_sample_grads(theta: np.ndarray, x: np.ndarray, y: np.ndarray, l2: float) -> np.ndarray:
    """Rows (p_i - y_i) x~_i + l2 * theta, each sample carrying its regularizer share."""
    xt = _with_bias(np.asarray(x, dtype=np.float64))
    p = _sigmoid(xt @ theta)
    return (p - y)[:, None] * xt + l2 * theta


def logistic_hessian(theta: np.ndarray, x: np.ndarray, l2: float) -> np.ndarray:
    """(1/n) sum_i p_i (1-p_i) x~_i x~_i^T + l2 I."""
    xt = _with_bias(np.asarray(x, dtype=np.float64))
    p = _sigmoid(xt @ theta)
    h = xt.T @ ((p * (1.0 - p))[:, None] * xt) / xt.shape[0]
    return h + l2 * np.eye(xt.shape[1])


def make_logistic_trainer(l2: float, tol: float = 1e-9, max_iters: int = 500_000):
    """Trainer (dataset, xi) -> minimizer of the xi-weighted regularized
    binary cross-entropy, by fixed-step gradient descent (step = 1/L, with the
    logistic curvature bound 1/4)."""

    def trainer(ds: Dataset, xi: np.ndarray | None) -> np.ndarray:
        xt = _with_bias(ds.inputs)
        y = ds.labels.astype(np.float64)
        n = ds.n
        w = np.ones(n) if xi is None else np.asarray(xi, dtype=np.float64)
        if w.sum() <= 0:
            raise ConvergenceError("all resampling weights are zero")
        moment = (xt * w[:, None]).T @ xt / n
        step = 1.0 / (0.25 * float(np.linalg.eigvalsh(moment)[-1]) + l2 * float(w.mean()))

        def grad_fn(theta):
            p = _sigmoid(xt @ theta)
            return xt.T @ (w * (p - y)) / n + l2 * w.mean() * theta

        return gd_minimize_fixed(grad_fn, np.zeros(xt.shape[1]), step, tol=tol, max_iters=max_iters)

    return trainer


def logistic_testbed(rng: np.random.Generator, n: int = 200, features: int = 9):
    """Well-specified logistic data with heterogeneous feature scales.

    Labels are drawn from the model's own conditional distribution, so the
    gradient second moment matches the curvature at the optimum (the
    information-matrix equality); the spread of feature scales gives the
    parameter covariance a wide, testable diagonal range.
    """
    scales = np.geomspace(0.4, 4.0, features)
    x = rng.standard_normal((n, features)) * scales
    theta_star = rng.standard_normal(features) / scales / 2.0
    y = (rng.random(n) < _sigmoid(x @ theta_star)).astype(np.int64)
    return Dataset(x, y, 2)
