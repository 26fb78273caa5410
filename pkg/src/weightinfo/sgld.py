"""Gibbs-posterior sampling by stochastic gradient Langevin dynamics.

The target is proportional to exp(-U(w)/beta) with energy
U(w) = data loss - beta * log p(w), where the prior is a Gaussian centred at
pretrained weights whose inverse covariance is n * (F + eps I) for an implicit
rank-T gradient second-moment matrix F.  One SGLD update is a gradient step
plus isotropic noise of per-coordinate variance 2 * eta * beta.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import nets
from .data import Dataset
from .errors import ConfigError, DivergenceError, NumericError, ParseError, ShapeError
from .fisher import GradientBuffer, fim_vector_product, log_det_prior_cov
from .iiw import estimate_iiw
from .metrics import MetricsRecord

SCHEDULES = ("cosine", "constant", "inverse_sqrt")
LIKELIHOOD_SCALES = ("batch_over_n", "standard")


@dataclass
class PriorSpec:
    """Gaussian prior: mean theta0, inverse covariance n * (F + damping I).

    F is held implicitly as a gradient buffer filled at theta0 and, by
    default, frozen for the whole run (refresh_interval=None); a positive
    refresh_interval refills it at the current iterate every that many
    iterations.  An empty buffer (None) degrades to the isotropic
    damping-only prior.
    """

    theta0: np.ndarray
    fim: GradientBuffer | None
    damping: float
    n: int
    refresh_interval: int | None = None

    def __post_init__(self):
        self.theta0 = np.asarray(self.theta0, dtype=np.float64)
        if self.damping <= 0:
            raise ConfigError("prior damping must be positive")
        if self.n < 1:
            raise ConfigError("prior needs n >= 1")
        if self.refresh_interval is not None and self.refresh_interval < 1:
            raise ConfigError("refresh_interval must be >= 1 or None")
        if self.fim is not None and self.fim.count == 0:
            self.fim = None


def _fill_fim_buffer(buf, net, params, ds, batch_size, rng):
    n = ds.n
    batch_size = min(batch_size, n)
    for _ in range(buf.capacity):
        idx = rng.choice(n, size=batch_size, replace=False)
        _, g = nets.loss_and_grad(net, params, ds.inputs[idx], ds.labels[idx])
        buf.add(g)


def build_prior(
    net: nets.NetworkSpec,
    theta0: np.ndarray,
    ds: Dataset,
    batch_size: int,
    num_grads: int,
    damping: float,
    rng: np.random.Generator,
    refresh_interval: int | None = None,
) -> PriorSpec:
    """Fill the prior's gradient buffer with minibatch gradients at theta0."""
    buf = GradientBuffer(num_grads, mode="minibatch")
    _fill_fim_buffer(buf, net, theta0, ds, batch_size, rng)
    return PriorSpec(theta0, buf, damping, ds.n, refresh_interval)


def prior_neg_log_grad(params: np.ndarray, prior: PriorSpec) -> np.ndarray:
    """Gradient of the prior's quadratic penalty: 2 n (F + eps I)(w - theta0).

    The log-determinant part of -log p(w) is constant in w, so it never
    contributes here.
    """
    params = np.asarray(params, dtype=np.float64)
    if params.shape != prior.theta0.shape:
        raise ShapeError("params shape does not match the prior mean")
    delta = params - prior.theta0
    pull = prior.damping * delta
    if prior.fim is not None:
        pull = pull + fim_vector_product(prior.fim, delta)
    return 2.0 * prior.n * pull


def prior_quadratic(params: np.ndarray, prior: PriorSpec) -> float:
    """The quadratic penalty n (w-theta0)^T (F + eps I) (w-theta0) itself."""
    delta = np.asarray(params, dtype=np.float64) - prior.theta0
    value = prior.damping * float(delta @ delta)
    if prior.fim is not None:
        value += float(delta @ fim_vector_product(prior.fim, delta))
    return prior.n * value


def prior_log_det(prior: PriorSpec) -> float:
    """The constant log det(Sigma_0) diagnostic; requires a non-empty buffer."""
    if prior.fim is None:
        raise ConfigError("log-det diagnostic needs a filled gradient buffer")
    return log_det_prior_cov(prior.fim, prior.damping, prior.n)


def energy_grad(
    net: nets.NetworkSpec,
    params: np.ndarray,
    inputs: np.ndarray,
    labels: np.ndarray,
    prior: PriorSpec | None,
    beta: float,
    n: int,
    likelihood_scale: str = "batch_over_n",
    clip: float | None = None,
) -> np.ndarray:
    """Minibatch estimate of the energy gradient.

    `batch_over_n` weights the summed batch log-likelihood by B/n (so the data
    term is (B^2/n) times the mean-loss gradient); `standard` uses the plain
    mean-loss gradient.  The two coincide when B^2 == n.  The prior enters as
    beta * prior_neg_log_grad.
    """
    if likelihood_scale not in LIKELIHOOD_SCALES:
        raise ConfigError(f"unknown likelihood scale {likelihood_scale!r}")
    if beta < 0:
        raise ConfigError("temperature must be >= 0")
    _, g = nets.loss_and_grad(net, params, inputs, labels, clip=clip)
    batch = np.asarray(inputs).shape[0]
    if likelihood_scale == "batch_over_n":
        g = (batch * batch / n) * g
    if beta > 0.0 and prior is not None:
        g = g + beta * prior_neg_log_grad(params, prior)
    return g


def sgld_step(
    params: np.ndarray,
    grad: np.ndarray,
    eta: float,
    beta: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """w - eta * grad + sqrt(2 eta beta) * standard normal noise.

    With beta == 0 no noise is drawn and the update is bit-identical to plain
    SGD.  Works elementwise on arrays of any shape (e.g. a matrix of
    independent chains).
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ShapeError("gradient shape does not match parameters")
    if eta <= 0:
        raise ConfigError("step size must be positive")
    if beta < 0:
        raise ConfigError("temperature must be >= 0")
    out = params - eta * grad
    if beta > 0.0:
        out = out + np.sqrt(2.0 * eta * beta) * rng.standard_normal(params.shape)
    return out


def schedule(value0: float, t: int, horizon: int, kind: str, floor: float = 0.0) -> float:
    """Decay schedules; monotone non-increasing in t, never below `floor`."""
    if kind not in SCHEDULES:
        raise ConfigError(f"unknown schedule {kind!r}, expected one of {SCHEDULES}")
    if not 0 <= t <= horizon:
        raise ConfigError(f"need 0 <= t <= horizon, got t={t}, horizon={horizon}")
    if kind == "constant":
        value = value0
    elif kind == "cosine":
        value = value0 * 0.5 * (1.0 + np.cos(np.pi * t / horizon))
    else:
        value = value0 / np.sqrt(1.0 + t)
    return float(max(value, floor))


@dataclass(frozen=True)
class PosteriorSample:
    params: np.ndarray
    iteration: int
    energy: float


@dataclass
class SgldConfig:
    """Chain hyperparameters: initial step size / temperature, their decay
    schedules and floors, burn-in, thinning stride, and the data batch size."""

    total_iters: int
    batch_size: int
    step_size: float
    temperature: float
    step_decay: str = "cosine"
    temp_decay: str = "cosine"
    step_floor: float = 1e-6
    temp_floor: float = 1e-8
    burn_in: int = 0
    sample_stride: int = 1
    likelihood_scale: str = "batch_over_n"
    log_points: int = 20
    clip: float | None = None
    # optional early stop: end once the running mean of collected samples
    # moves by less than stability_tol (relative) over stability_window samples
    stability_window: int | None = None
    stability_tol: float = 1e-4

    def __post_init__(self):
        if self.step_size <= 0 or self.temperature < 0:
            raise ConfigError("need step_size > 0 and temperature >= 0")
        if not 0 <= self.burn_in < max(self.total_iters, 1):
            raise ConfigError("burn_in must be < total_iters")
        if self.sample_stride < 1:
            raise ConfigError("sample_stride must be >= 1")
        if self.step_decay not in SCHEDULES or self.temp_decay not in SCHEDULES:
            raise ConfigError(f"decay kinds must be one of {SCHEDULES}")
        if self.likelihood_scale not in LIKELIHOOD_SCALES:
            raise ConfigError(f"likelihood_scale must be one of {LIKELIHOOD_SCALES}")
        if self.stability_window is not None and self.stability_window < 2:
            raise ConfigError("stability_window must be >= 2 or None")


@dataclass
class PibResult:
    samples: list[PosteriorSample]
    metrics: list[MetricsRecord]
    final_params: np.ndarray
    prior: PriorSpec


def run_pib_training(
    net: nets.NetworkSpec,
    ds: Dataset,
    prior: PriorSpec,
    cfg: SgldConfig,
    rng: np.random.Generator,
    init: np.ndarray | None = None,
    test_ds: Dataset | None = None,
) -> PibResult:
    """Sample the Gibbs posterior of the bounded-information objective.

    The chain starts at the prior mean (or `init`), takes SGLD steps on the
    minibatch energy gradient with scheduled step size and temperature, and
    collects every `sample_stride`-th iterate after `burn_in`.  Metrics rows
    log full-dataset loss/accuracy, the current prior penalty, and the
    temperature.
    """
    params = prior.theta0.copy() if init is None else np.asarray(init, dtype=np.float64).copy()
    if params.shape != prior.theta0.shape:
        raise ShapeError("init shape does not match the prior mean")
    n = ds.n
    batch = min(cfg.batch_size, n)
    samples: list[PosteriorSample] = []
    sample_sum = np.zeros_like(params)
    mean_history: list[np.ndarray] = []
    records: list[MetricsRecord] = []
    interval = max(cfg.total_iters // cfg.log_points, 1)

    def full_energy(p, beta):
        loss = nets.cross_entropy(nets.forward(net, p, ds.inputs), ds.labels, clip=cfg.clip)
        return loss + beta * prior_quadratic(p, prior), loss

    try:
        for t in range(1, cfg.total_iters + 1):
            eta = schedule(cfg.step_size, t - 1, cfg.total_iters, cfg.step_decay, cfg.step_floor)
            beta = schedule(cfg.temperature, t - 1, cfg.total_iters, cfg.temp_decay, cfg.temp_floor)
            idx = rng.choice(n, size=batch, replace=False)
            try:
                g = energy_grad(
                    net,
                    params,
                    ds.inputs[idx],
                    ds.labels[idx],
                    prior,
                    beta,
                    n,
                    likelihood_scale=cfg.likelihood_scale,
                    clip=cfg.clip,
                )
            except NumericError as exc:
                raise DivergenceError(f"energy gradient diverged: {exc}", iteration=t) from exc
            params = sgld_step(params, g, eta, beta, rng)
            if not np.all(np.isfinite(params)):
                raise DivergenceError("SGLD iterate became non-finite", iteration=t)
            if (
                prior.refresh_interval is not None
                and prior.fim is not None
                and t % prior.refresh_interval == 0
            ):
                prior.fim.clear()
                _fill_fim_buffer(prior.fim, net, params, ds, batch, rng)
            if t > cfg.burn_in and (t - cfg.burn_in) % cfg.sample_stride == 0:
                energy, _ = full_energy(params, beta)
                if not np.isfinite(energy):
                    raise DivergenceError("energy became non-finite", iteration=t)
                samples.append(PosteriorSample(params.copy(), t, energy))
                sample_sum += params
                mean_history.append(sample_sum / len(samples))
            if t % interval == 0 or t == cfg.total_iters:
                energy, loss = full_energy(params, beta)
                train_acc = nets.accuracy(net, params, ds.inputs, ds.labels)
                test_acc = (
                    nets.accuracy(net, params, test_ds.inputs, test_ds.labels)
                    if test_ds is not None
                    else None
                )
                iiw_diag = _prior_gap_information(params, prior)
                records.append(
                    MetricsRecord(
                        t,
                        loss,
                        train_acc,
                        test_acc,
                        iiw_diag,
                        eta,
                        extras={"energy": energy, "beta": beta},
                    )
                )
            if (
                cfg.stability_window is not None
                and len(mean_history) > cfg.stability_window
            ):
                prev = mean_history[-1 - cfg.stability_window]
                drift = np.linalg.norm(mean_history[-1] - prev)
                if drift <= cfg.stability_tol * (np.linalg.norm(prev) + 1e-12):
                    break
    except DivergenceError as exc:
        exc.metrics = records
        exc.last_params = params
        raise
    return PibResult(samples, records, params, prior)


def _prior_gap_information(params, prior):
    """Quadratic-form information of the current gap to the prior mean (diagnostic)."""
    if prior.fim is None:
        return 0.0
    delta = params - prior.theta0
    return estimate_iiw(delta, prior.fim, prior.n).value


def posterior_predict(
    samples: list[PosteriorSample], net: nets.NetworkSpec, inputs: np.ndarray
) -> np.ndarray:
    """Monte-Carlo posterior predictive: mean softmax over the stored samples."""
    if not samples:
        raise ConfigError("need at least one posterior sample")
    acc = None
    for s in samples:
        probs = nets.softmax(nets.forward(net, s.params, inputs))
        acc = probs if acc is None else acc + probs
    return acc / len(samples)


def save_checkpoint(path, params: np.ndarray, iteration: int) -> None:
    """Flat binary checkpoint: u64 length, float64 values, i64 iteration (little-endian)."""
    params = np.asarray(params, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", params.size))
        f.write(params.astype("<f8").tobytes())
        f.write(struct.pack("<q", iteration))


def load_checkpoint(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as f:
        raw = f.read(8)
        if len(raw) != 8:
            raise ParseError("checkpoint truncated in length header")
        (size,) = struct.unpack("<Q", raw)
        body = f.read(8 * size)
        if len(body) != 8 * size:
            raise ParseError(f"checkpoint truncated: expected {8 * size} value bytes")
        tail = f.read(8)
        if len(tail) != 8:
            raise ParseError("checkpoint truncated in iteration trailer")
        if f.read(1):
            raise ParseError("checkpoint has trailing bytes")
    params = np.frombuffer(body, dtype="<f8").astype(np.float64)
    (iteration,) = struct.unpack("<q", tail)
    return params, iteration
