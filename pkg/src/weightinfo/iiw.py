"""Information stored in weights: Gaussian-KL primitives, the quadratic-form
estimator over a gradient buffer, and the tracking loop that logs the estimate
during SGD training.

The quantity tracked is n/T * sum_t (delta . g_t)^2 where delta is the gap
between a quadratic running average of the weights and the (pretrained) prior
mean, and g_t are loss gradients at the current reference point.  It equals
n * delta^T F delta for the rank-T gradient second-moment matrix F, i.e. the
quadratic term of a Gaussian KL divergence with a Fisher-shaped prior
covariance, which upper-bounds the generalization gap through a PAC-Bayes
argument.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nets
from .data import Dataset
from .errors import ConfigError, DivergenceError, NumericError, ShapeError
from .fisher import GradientBuffer, prior_cov_fisher
from .metrics import MetricsRecord


@dataclass
class GaussianSpec:
    """Gaussian with dense (D x D) or diagonal (D,) covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        d = self.mean.size
        if self.cov.shape not in ((d,), (d, d)):
            raise ShapeError(f"covariance must be ({d},) or ({d},{d}), got {self.cov.shape}")

    @property
    def is_diagonal(self) -> bool:
        return self.cov.ndim == 1

    def dense_cov(self) -> np.ndarray:
        return np.diag(self.cov) if self.is_diagonal else self.cov

    @classmethod
    def from_fim_buffer(cls, mean, buffer: GradientBuffer, n: int, damping: float) -> "GaussianSpec":
        """Gaussian whose covariance is the implicit-Fisher prior (1/n)(F+eps I)^{-1}."""
        g = buffer.as_matrix()
        f = g.T @ g / g.shape[0]
        return cls(mean, prior_cov_fisher(f, n, damping))


def _chol(cov: np.ndarray, which: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"{which} covariance is not positive definite") from exc


def gaussian_kl(post: GaussianSpec, prior: GaussianSpec) -> float:
    """KL(post || prior) between two Gaussians, in nats.

    1/2 [ log det(S0)/det(Sp) - D + (mp-m0)^T S0^{-1} (mp-m0) + tr(S0^{-1} Sp) ]
    with posterior (mp, Sp) and prior (m0, S0).  Non-negative, zero only for
    identical distributions.
    """
    if post.mean.size != prior.mean.size:
        raise ShapeError("dimension mismatch between the two Gaussians")
    d = post.mean.size
    delta = post.mean - prior.mean
    if post.is_diagonal and prior.is_diagonal:
        if np.any(post.cov <= 0) or np.any(prior.cov <= 0):
            raise NumericError("diagonal covariance entries must be positive")
        return float(
            0.5
            * (
                np.sum(np.log(prior.cov) - np.log(post.cov))
                - d
                + delta @ (delta / prior.cov)
                + np.sum(post.cov / prior.cov)
            )
        )
    sp = post.dense_cov()
    s0 = prior.dense_cov()
    lp = _chol(sp, "posterior")
    l0 = _chol(s0, "prior")
    logdet_p = 2.0 * np.sum(np.log(np.diag(lp)))
    logdet_0 = 2.0 * np.sum(np.log(np.diag(l0)))
    # solve through the prior Cholesky factor for the quadratic and trace terms
    y = np.linalg.solve(l0, delta)
    quad = float(y @ y)
    z = np.linalg.solve(l0, lp)
    trace = float(np.sum(z * z))
    return float(0.5 * (logdet_0 - logdet_p - d + quad + trace))


@dataclass
class MovingAverageState:
    """Quadratic (root-mean-square) running average of the weight trajectory.

    theta_bar_t = sqrt(rho * theta_bar_{t-1}^2 + (1-rho)/K * sum over the last
    K stored weight vectors, squared elementwise).  The squared average is the
    stored quantity; the update is applied in its algebraically equivalent
    incremental form  sq + (1-rho) * (window_mean - sq)  so that a constant
    trajectory is an exact fixed point, with no roundoff drift.
    """

    mean_square: np.ndarray
    rho: float
    window: int
    recent: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.mean_square = np.asarray(self.mean_square, dtype=np.float64)
        if not 0.0 <= self.rho < 1.0:
            raise ConfigError(f"rho must be in [0,1), got {self.rho}")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")

    @property
    def theta_bar(self) -> np.ndarray:
        """The running average itself (non-negative elementwise)."""
        return np.sqrt(self.mean_square)

    @classmethod
    def zeros(cls, dim: int, rho: float, window: int) -> "MovingAverageState":
        return cls(np.zeros(dim), rho, window)

    @classmethod
    def seeded(cls, params: np.ndarray, rho: float, window: int) -> "MovingAverageState":
        """Start from a resting trajectory: ring pre-filled with `params`.

        A run that never moves then reports theta_bar == |params| exactly at
        every step, which is what the tracker needs after pretraining.
        """
        params = np.asarray(params, dtype=np.float64)
        state = cls(params * params, rho, window)
        state.recent = [params.copy() for _ in range(window)]
        return state


def update_moving_average(state: MovingAverageState, params: np.ndarray) -> MovingAverageState:
    """Advance the ring with the newest weights and update the average in place.

    Before the ring fills, absent entries contribute zero to the window sum,
    matching a literal reading of the recursion.
    """
    params = np.asarray(params, dtype=np.float64)
    if params.shape != state.mean_square.shape:
        raise ShapeError("params shape does not match the moving-average state")
    state.recent.append(params.copy())
    if len(state.recent) > state.window:
        state.recent.pop(0)
    window_sum = np.zeros_like(state.mean_square)
    for w in state.recent:
        window_sum += w * w
    window_mean = window_sum / state.window
    state.mean_square = state.mean_square + (1.0 - state.rho) * (window_mean - state.mean_square)
    return state


@dataclass(frozen=True)
class IiwEstimate:
    """One logged value of the weight-information estimate (in nats, up to the
    dropped proportionality constants)."""

    value: float
    iteration: int
    n_samples: int
    grads_used: int


def estimate_iiw(
    delta: np.ndarray, buffer: GradientBuffer, n: int, iteration: int = 0
) -> IiwEstimate:
    """Quadratic form n * delta^T F delta via inner products with stored gradients.

    Computed as (n/T) sum_t (delta . g_t)^2, never materializing the D x D
    matrix.
    """
    g = buffer.as_matrix()
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (g.shape[1],):
        raise ShapeError(f"delta length {delta.shape} != gradient dimension {g.shape[1]}")
    proj = g @ delta
    value = float(n / g.shape[0] * np.sum(proj * proj))
    return IiwEstimate(value, iteration, n, g.shape[0])


def pac_bayes_bound(sigma: float, n: int, iiw: float) -> float:
    """Generalization-gap bound sqrt(2 sigma^2 * iiw / n) for sigma-sub-Gaussian loss."""
    if n < 1:
        raise ConfigError("need n >= 1")
    if iiw < 0:
        raise ConfigError("information estimate must be non-negative")
    return float(np.sqrt(2.0 * sigma * sigma * iiw / n))


@dataclass
class TrackConfig:
    """Hyperparameters for the tracked-SGD run.

    `theta0_policy` is either "init" (prior mean at initialization) or
    "warmup:<k>" (pretrain k iterations of plain minibatch SGD first);
    "warmup:epoch" pretrains exactly one epoch.  `fim_grads` gradients are
    recomputed at the frozen current weights for every logged estimate.
    """

    total_iters: int
    batch_size: int
    learning_rate: float
    optimizer: str = "sgd"
    rho: float = 0.99
    window: int = 10
    fim_grads: int = 512
    grad_mode: str = "minibatch"
    log_points: int = 50
    theta0_policy: str = "warmup:epoch"
    clip: float | None = None
    l2_weight: float = 0.0
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.total_iters < 0:
            raise ConfigError("total_iters must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.grad_mode not in ("minibatch", "per_sample"):
            raise ConfigError(f"unknown grad_mode {self.grad_mode!r}")
        if self.fim_grads < 1:
            raise ConfigError("fim_grads must be >= 1")
        if self.log_points < 1:
            raise ConfigError("log_points must be >= 1")
        policy = self.theta0_policy
        if policy != "init" and not policy.startswith("warmup:"):
            raise ConfigError(f"theta0_policy must be 'init' or 'warmup:<k>', got {policy!r}")

    def warmup_iters(self, batches_per_epoch: int) -> int:
        if self.theta0_policy == "init":
            return 0
        spec = self.theta0_policy.split(":", 1)[1]
        if spec == "epoch":
            return batches_per_epoch
        try:
            k = int(spec)
        except ValueError:
            raise ConfigError(f"bad warmup length {spec!r}") from None
        if k < 0:
            raise ConfigError("warmup length must be >= 0")
        return k


@dataclass
class TrackResult:
    final_params: np.ndarray
    theta0: np.ndarray
    estimates: list[IiwEstimate]
    metrics: list[MetricsRecord]
    trajectory_grads: GradientBuffer


class _BatchStream:
    """Endless stream of minibatch index blocks, reshuffled every epoch."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if batch_size > n:
            raise ConfigError(f"batch size {batch_size} exceeds dataset size {n}")
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self._order = None
        self._pos = 0

    @property
    def batches_per_epoch(self) -> int:
        return self.n // self.batch_size

    def next(self) -> np.ndarray:
        if self._order is None or self._pos + self.batch_size > self.batches_per_epoch * self.batch_size:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def _fill_reference_buffer(net, params, ds, cfg, stream, rng):
    """Gradients at the frozen reference point, one buffer per estimate."""
    buf = GradientBuffer(cfg.fim_grads, mode=cfg.grad_mode)
    if cfg.grad_mode == "minibatch":
        for _ in range(cfg.fim_grads):
            idx = stream.next()
            _, g = nets.loss_and_grad(
                net, params, ds.inputs[idx], ds.labels[idx], clip=cfg.clip
            )
            buf.add(g)
    else:
        remaining = cfg.fim_grads
        while remaining > 0:
            take = min(remaining, ds.n, 256)  # bounds the (take x D) temporary
            idx = rng.choice(ds.n, size=take, replace=False)
            rows = nets.per_sample_grads(net, params, ds.inputs[idx], ds.labels[idx], clip=cfg.clip)
            buf.add_rows(rows)
            remaining -= take
    return buf


def track_iiw_during_training(
    net: nets.NetworkSpec,
    ds: Dataset,
    cfg: TrackConfig,
    rng: np.random.Generator,
    test_ds: Dataset | None = None,
    init: np.ndarray | None = None,
) -> TrackResult:
    """Train by minibatch SGD while logging the weight-information estimate.

    Phases: (1) optional pretraining fixes the prior mean; (2) the tracked run
    stores every step's gradient in a ring buffer and maintains the quadratic
    moving average; (3) at each logging interval the weights are frozen,
    `fim_grads` fresh gradients are taken there, and the quadratic form is
    evaluated with delta = theta_bar - |theta0|.

    The prior mean enters through its elementwise magnitude so that a run
    that never moves (zero learning rate) reports exactly zero information;
    both sides of the gap then live in the same quadratic-mean space.
    """
    params = init_copy(init, net, rng)
    stream = _BatchStream(ds.n, cfg.batch_size, rng)
    opt = nets.OptimizerState(cfg.optimizer, cfg.learning_rate) if cfg.learning_rate > 0 else None

    def step(p):
        idx = stream.next()
        drop_rng = rng if cfg.dropout_rate > 0 else None
        try:
            loss, grad = nets.loss_and_grad(
                net,
                p,
                ds.inputs[idx],
                ds.labels[idx],
                clip=cfg.clip,
                dropout_rate=cfg.dropout_rate,
                rng=drop_rng,
            )
        except NumericError as exc:
            raise DivergenceError(f"training diverged: {exc}", iteration=opt.step if opt else 0) from exc
        if cfg.l2_weight > 0.0:
            grad = grad + cfg.l2_weight * p
        if not np.isfinite(loss):
            raise DivergenceError("training loss became non-finite", iteration=opt.step if opt else 0)
        if opt is None:
            return loss, grad, p
        new_p, _ = nets.optimizer_step(opt, p, grad)
        return loss, grad, new_p

    warmup = cfg.warmup_iters(stream.batches_per_epoch)
    for _ in range(warmup):
        _, _, params = step(params)
    theta0 = params.copy()
    # prior magnitude through the same square/sqrt roundtrip as the running
    # average, so a trajectory that never moves yields delta == 0 exactly
    theta0_mag = np.sqrt(theta0 * theta0)

    ma = MovingAverageState.seeded(theta0, cfg.rho, cfg.window)
    trajectory = GradientBuffer(max(cfg.fim_grads, 1), mode="minibatch")
    estimates: list[IiwEstimate] = []
    records: list[MetricsRecord] = []
    interval = max(cfg.total_iters // cfg.log_points, 1)

    def log_point(t, p):
        ref = _fill_reference_buffer(net, p, ds, cfg, stream, rng)
        delta = ma.theta_bar - theta0_mag
        est = estimate_iiw(delta, ref, ds.n, iteration=t)
        estimates.append(est)
        train_loss = nets.cross_entropy(nets.forward(net, p, ds.inputs), ds.labels, clip=cfg.clip)
        train_acc = nets.accuracy(net, p, ds.inputs, ds.labels)
        test_acc = (
            nets.accuracy(net, p, test_ds.inputs, test_ds.labels) if test_ds is not None else None
        )
        records.append(
            MetricsRecord(t, train_loss, train_acc, test_acc, est.value, cfg.learning_rate)
        )

    try:
        for t in range(1, cfg.total_iters + 1):
            _, grad, params = step(params)
            trajectory.add(grad)
            update_moving_average(ma, params)
            if t % interval == 0 or t == cfg.total_iters:
                log_point(t, params)
    except DivergenceError as exc:
        exc.metrics = records
        exc.estimates = estimates
        exc.last_params = params
        raise
    return TrackResult(params, theta0, estimates, records, trajectory)


def init_copy(init, net, rng):
    if init is not None:
        arr = np.asarray(init, dtype=np.float64).copy()
        if arr.size != net.num_params:
            raise ShapeError(f"init length {arr.size} != parameter count {net.num_params}")
        return arr
    return nets.init_params(net, rng)
