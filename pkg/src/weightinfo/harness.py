"""Experiment harness: configuration, dataset sources, run/sweep drivers,
and artifact persistence.

Every artifact except timing.json is a pure function of (config, seed); rerun
the same cell and the bytes match.  Sweeps reuse the single-run driver with
one field substituted, so a sweep cell and the equivalent single run produce
identical artifacts.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import convex, nets
from .data import Dataset, corrupt_labels, load_idx, poisson_weights, subsample, synthetic_blobs
from .errors import ConfigError, ConvergenceError, DivergenceError, ParseError
from .fisher import (
    GradientBuffer,
    bootstrap_covariance_oracle,
    empirical_fim_dense,
    hessian_fisher_gap,
    log_det_prior_cov,
    prior_cov_fisher,
)
from .iiw import GaussianSpec, TrackConfig, estimate_iiw, gaussian_kl, track_iiw_during_training
from .metrics import MetricsRecord, read_metrics_csv, write_metrics_csv
from .sgld import SgldConfig, build_prior, posterior_predict, run_pib_training, save_checkpoint

EXPERIMENTS = (
    "track",
    "pib_train",
    "oracle_validate",
    "sweep_activation",
    "sweep_depth",
    "sweep_width",
    "sweep_batch",
    "sweep_noise",
    "compare_regularizers",
)
DATASETS = ("blobs", "digits", "mnist")
METHODS = ("vanilla", "l2", "dropout", "pib")


def _positive(kind):
    def parse(v):
        v = kind(v)
        if v <= 0:
            raise ValueError("must be positive")
        return v

    return parse


def _nonneg(kind):
    def parse(v):
        v = kind(v)
        if v < 0:
            raise ValueError("must be non-negative")
        return v

    return parse


def _choice(options):
    def parse(v):
        if v not in options:
            raise ValueError(f"must be one of {options}")
        return v

    return parse


def _int_list(v):
    out = [int(x) for x in v]
    if not out:
        raise ValueError("must be non-empty")
    return out


def _float_list(v):
    out = [float(x) for x in v]
    if not out:
        raise ValueError("must be non-empty")
    return out


def _str_list(options):
    def parse(v):
        out = [str(x) for x in v]
        if not out or any(x not in options for x in out):
            raise ValueError(f"entries must be among {options}")
        return out

    return parse


def _opt_float(v):
    return None if v is None else float(v)


def _opt_str(v):
    return None if v is None else str(v)


# key -> (default, parser).  Unknown keys in a config file are hard errors.
CONFIG_SCHEMA = {
    "experiment": (None, _opt_str),
    "seeds": ([0], _int_list),
    "out_dir": ("runs", str),
    "dataset": ("digits", _choice(DATASETS)),
    "train_size": (4096, _positive(int)),
    "test_size": (2048, _positive(int)),
    "noise_ratio": (0.0, _nonneg(float)),
    "augment": (True, bool),
    "augment_noise": (0.02, _nonneg(float)),
    "mnist_train_images": (None, _opt_str),
    "mnist_train_labels": (None, _opt_str),
    "mnist_test_images": (None, _opt_str),
    "mnist_test_labels": (None, _opt_str),
    "blob_dim": (2, _positive(int)),
    "blob_classes": (2, _positive(int)),
    "blob_separation": (6.0, _nonneg(float)),
    "layer_sizes": ([784, 64, 10], _int_list),
    "activation": ("relu", _choice(nets.ACTIVATIONS)),
    "optimizer": ("sgd", _choice(("sgd", "adam"))),
    "learning_rate": (0.1, _nonneg(float)),
    "batch_size": (64, _positive(int)),
    "epochs": (30, _nonneg(int)),
    "total_iters": (None, lambda v: None if v is None else _nonneg(int)(v)),
    "rho": (0.99, _nonneg(float)),
    "ma_window": (10, _positive(int)),
    "fim_grads": (512, _positive(int)),
    "grad_mode": ("minibatch", _choice(("minibatch", "per_sample"))),
    "log_points": (50, _positive(int)),
    "theta0_policy": ("warmup:epoch", str),
    "clip_loss": (None, _opt_float),
    "l2_weight": (0.0, _nonneg(float)),
    "dropout_rate": (0.0, _nonneg(float)),
    "activations": (list(nets.ACTIVATIONS), _str_list(nets.ACTIVATIONS)),
    "depths": ([1, 2, 3, 4], _int_list),
    "widths": ([8, 16, 32, 64, 128], _int_list),
    "batch_sizes": ([4, 16, 64, 256], _int_list),
    "noise_ratios": ([0.0, 0.4, 0.8], _float_list),
    "sgld_iters": (3000, _positive(int)),
    "sgld_step_size": (0.05, _positive(float)),
    # at tens of thousands of parameters the injected-noise norm grows like
    # sqrt(D); temperatures far below the objective scale keep chains trainable
    "sgld_temperature": (1e-7, _nonneg(float)),
    "sgld_step_decay": ("cosine", _choice(("cosine", "constant", "inverse_sqrt"))),
    "sgld_temp_decay": ("cosine", _choice(("cosine", "constant", "inverse_sqrt"))),
    "sgld_step_floor": (0.01, _nonneg(float)),
    "sgld_temp_floor": (1e-8, _nonneg(float)),
    "sgld_burn_in_frac": (0.5, _nonneg(float)),
    "sgld_sample_stride": (20, _positive(int)),
    "likelihood_scale": ("batch_over_n", _choice(("batch_over_n", "standard"))),
    "prior_warmup_epochs": (2, _nonneg(int)),
    "prior_fim_grads": (256, _positive(int)),
    "prior_damping": (None, _opt_float),
    "methods": (list(METHODS), _str_list(METHODS)),
    "oracle_resamples": (150, _positive(int)),
}


@dataclass
class ExperimentConfig:
    values: dict

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None

    def replaced(self, **updates) -> "ExperimentConfig":
        merged = dict(self.values)
        merged.update(updates)
        return ExperimentConfig(merged)

    def as_json(self) -> str:
        return json.dumps(self.values, sort_keys=True, indent=2)


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Parse a flat JSON config, applying defaults and rejecting unknown keys."""
    raw = {}
    if path is not None:
        try:
            with open(path) as f:
                raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    if overrides:
        raw = {**raw, **overrides}
    unknown = set(raw) - set(CONFIG_SCHEMA)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    values = {}
    for key, (default, parser) in CONFIG_SCHEMA.items():
        if key in raw:
            try:
                values[key] = parser(raw[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"config key {key!r}: {exc}") from exc
        else:
            values[key] = default
    if values["experiment"] is not None and values["experiment"] not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}")
    return ExperimentConfig(values)


# ---------------------------------------------------------------------------
# dataset sources

_DIGITS_CACHE = {}


def _upsampled_digit_pools():
    """Real 8x8 handwritten digits upsampled to 28x28, split into disjoint
    train/test source pools (stratified two-thirds / one-third)."""
    if "pools" in _DIGITS_CACHE:
        return _DIGITS_CACHE["pools"]
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    raw = load_digits()
    images = raw.images / 16.0
    labels = raw.target
    upsampled = np.stack([zoom(im, 3.5, order=1) for im in images])
    upsampled = np.clip(upsampled, 0.0, 1.0)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        cut = (2 * idx.size) // 3
        train_idx.extend(idx[:cut])
        test_idx.extend(idx[cut:])
    pools = (
        (upsampled[train_idx], labels[train_idx]),
        (upsampled[test_idx], labels[test_idx]),
    )
    _DIGITS_CACHE["pools"] = pools
    return pools


def _augment_digits(pool, count, rng, noise=0.02):
    """Draw `count` shifted, lightly noised 28x28 digits from a source pool.

    Pixel noise trades realism against fit difficulty: at 0 the sample is a
    crisp union of shift variants a small MLP can interpolate sharply.
    """
    images, labels = pool
    idx = rng.integers(0, len(images), size=count)
    canvas = np.zeros((count, 32, 32))
    canvas[:, 2:30, 2:30] = images[idx]
    out = np.empty((count, 28, 28))
    shifts = rng.integers(-2, 3, size=(count, 2))
    for i, (dy, dx) in enumerate(shifts):
        out[i] = canvas[i, 2 + dy : 30 + dy, 2 + dx : 30 + dx]
    if noise > 0:
        out += noise * rng.standard_normal(out.shape)
        np.clip(out, 0.0, 1.0, out=out)
    return Dataset(out.reshape(count, 784), labels[idx], 10)


def _distinct_digits(pool, count, rng):
    """Draw `count` distinct un-augmented digits; duplicates-free, so even
    randomized labels remain fittable."""
    images, labels = pool
    if count > len(images):
        raise ConfigError(
            f"augment=false supports at most {len(images)} samples from this pool, requested {count}"
        )
    idx = rng.choice(len(images), size=count, replace=False)
    return Dataset(images[idx].reshape(count, 784), labels[idx], 10)


def build_datasets(cfg: ExperimentConfig, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Train/test pair for the configured source; train labels corrupted by
    `noise_ratio`, test labels always clean."""
    if cfg.dataset == "blobs":
        train = synthetic_blobs(cfg.train_size, cfg.blob_dim, cfg.blob_classes, cfg.blob_separation, rng)
        test = synthetic_blobs(cfg.test_size, cfg.blob_dim, cfg.blob_classes, cfg.blob_separation, rng)
    elif cfg.dataset == "digits":
        train_pool, test_pool = _upsampled_digit_pools()
        if cfg.augment:
            train = _augment_digits(train_pool, cfg.train_size, rng, cfg.augment_noise)
            test = _augment_digits(test_pool, cfg.test_size, rng, cfg.augment_noise)
        else:
            train = _distinct_digits(train_pool, cfg.train_size, rng)
            test = _distinct_digits(test_pool, cfg.test_size, rng)
    else:
        paths = (cfg.mnist_train_images, cfg.mnist_train_labels, cfg.mnist_test_images, cfg.mnist_test_labels)
        if any(p is None for p in paths):
            raise ConfigError("dataset 'mnist' requires the four mnist_* path keys")
        train = load_idx(cfg.mnist_train_images, cfg.mnist_train_labels)
        test = load_idx(cfg.mnist_test_images, cfg.mnist_test_labels)
        if cfg.train_size < train.n:
            train = subsample(train, cfg.train_size, rng)
        if cfg.test_size < test.n:
            test = subsample(test, cfg.test_size, rng)
    if cfg.noise_ratio > 0:
        train = corrupt_labels(train, cfg.noise_ratio, rng)
    expected_dim = cfg.layer_sizes[0]
    if train.dim != expected_dim:
        raise ConfigError(f"dataset dimension {train.dim} != input layer size {expected_dim}")
    return train, test


# ---------------------------------------------------------------------------
# single-cell runs


def _track_config(cfg: ExperimentConfig, n: int) -> TrackConfig:
    batches = n // cfg.batch_size
    if batches < 1:
        raise ConfigError(f"batch size {cfg.batch_size} exceeds train size {n}")
    # total_iters pins the update count directly (batch sweeps hold it fixed);
    # otherwise it is epochs * batches-per-epoch
    total = cfg.total_iters if cfg.total_iters is not None else cfg.epochs * batches
    return TrackConfig(
        total_iters=total,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        optimizer=cfg.optimizer,
        rho=cfg.rho,
        window=cfg.ma_window,
        fim_grads=cfg.fim_grads,
        grad_mode=cfg.grad_mode,
        log_points=cfg.log_points,
        theta0_policy=cfg.theta0_policy,
        clip=cfg.clip_loss,
        l2_weight=cfg.l2_weight,
        dropout_rate=cfg.dropout_rate,
    )


def _summary_from_records(seed: int, records: list[MetricsRecord]) -> dict:
    if not records:
        return {
            "seed": seed,
            "final_train_acc": None,
            "final_test_acc": None,
            "gap": None,
            "final_iiw": None,
            "peak_iiw": None,
            "peak_iter": None,
            "no_compression": None,
            "logged_points": 0,
        }
    iiws = [r.iiw for r in records]
    peak_idx = int(np.argmax(iiws))
    last = records[-1]
    gap = None if last.test_acc is None else last.train_acc - last.test_acc
    return {
        "seed": seed,
        "final_train_acc": last.train_acc,
        "final_test_acc": last.test_acc,
        "gap": gap,
        "final_iiw": last.iiw,
        "peak_iiw": iiws[peak_idx],
        "peak_iter": records[peak_idx].iteration,
        "no_compression": peak_idx == len(records) - 1,
        "logged_points": len(records),
    }


def write_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def run_track_cell(cfg: ExperimentConfig, seed: int, cell_dir: Path) -> dict:
    """One tracked training run; writes metrics.csv, summary.json, timing.json."""
    cell_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    rng = np.random.default_rng(seed)
    train, test = build_datasets(cfg, rng)
    net = nets.NetworkSpec(tuple(cfg.layer_sizes), cfg.activation)
    result = track_iiw_during_training(net, train, _track_config(cfg, train.n), rng, test_ds=test)
    write_metrics_csv(cell_dir / "metrics.csv", result.metrics)
    summary = _summary_from_records(seed, result.metrics)
    write_json(cell_dir / "summary.json", summary)
    write_json(cell_dir / "timing.json", {"wall_seconds": time.perf_counter() - started})
    return summary


def run_pib_cell(cfg: ExperimentConfig, seed: int, cell_dir: Path) -> dict:
    """One SGLD run under the information-penalized objective.

    Warmup SGD fixes the prior mean; the gradient buffer is filled there and
    frozen; the chain then samples the Gibbs posterior.  Accuracy is reported
    for the posterior-averaged predictive distribution.
    """
    cell_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    rng = np.random.default_rng(seed)
    train, test = build_datasets(cfg, rng)
    net = nets.NetworkSpec(tuple(cfg.layer_sizes), cfg.activation)

    params = nets.init_params(net, rng)
    batches = train.n // cfg.batch_size
    warm_cfg = TrackConfig(
        total_iters=0,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        optimizer=cfg.optimizer,
        theta0_policy=f"warmup:{cfg.prior_warmup_epochs * batches}",
        clip=cfg.clip_loss,
        log_points=1,
        fim_grads=1,
    )
    warm = track_iiw_during_training(net, train, warm_cfg, rng, init=params)
    theta0 = warm.theta0

    damping = cfg.prior_damping
    prior = build_prior(net, theta0, train, cfg.batch_size, cfg.prior_fim_grads, 1.0, rng)
    if damping is None:
        g = prior.fim.as_matrix()
        damping = max(1e-8 * float(np.mean(g * g)), 1e-30)
    prior.damping = damping

    total = cfg.sgld_iters
    burn_in = min(int(cfg.sgld_burn_in_frac * total), total - 1)
    sgld_cfg = SgldConfig(
        total_iters=total,
        batch_size=cfg.batch_size,
        step_size=cfg.sgld_step_size,
        temperature=cfg.sgld_temperature,
        step_decay=cfg.sgld_step_decay,
        temp_decay=cfg.sgld_temp_decay,
        step_floor=cfg.sgld_step_floor,
        temp_floor=cfg.sgld_temp_floor,
        burn_in=burn_in,
        sample_stride=cfg.sgld_sample_stride,
        likelihood_scale=cfg.likelihood_scale,
        log_points=cfg.log_points,
        clip=cfg.clip_loss,
    )
    result = run_pib_training(net, train, prior, sgld_cfg, rng, init=theta0, test_ds=test)

    if result.samples:
        train_probs = posterior_predict(result.samples, net, train.inputs)
        test_probs = posterior_predict(result.samples, net, test.inputs)
        train_acc = float(np.mean(np.argmax(train_probs, axis=1) == train.labels))
        test_acc = float(np.mean(np.argmax(test_probs, axis=1) == test.labels))
    else:
        train_acc = nets.accuracy(net, result.final_params, train.inputs, train.labels)
        test_acc = nets.accuracy(net, result.final_params, test.inputs, test.labels)

    write_metrics_csv(cell_dir / "metrics.csv", result.metrics)
    save_checkpoint(cell_dir / "checkpoint.bin", result.final_params, sgld_cfg.total_iters)
    summary = _summary_from_records(seed, result.metrics)
    summary.update(
        {
            "posterior_train_acc": train_acc,
            "posterior_test_acc": test_acc,
            "gap": train_acc - test_acc,
            "final_train_acc": train_acc,
            "final_test_acc": test_acc,
            "num_samples": len(result.samples),
            "prior_damping": damping,
            "likelihood_scale": cfg.likelihood_scale,
        }
    )
    write_json(cell_dir / "summary.json", summary)
    write_json(cell_dir / "timing.json", {"wall_seconds": time.perf_counter() - started})
    return summary


# ---------------------------------------------------------------------------
# oracle validation battery


def _oracle_check(stage, metric, value, threshold, direction):
    ok = value <= threshold if direction == "max" else value >= threshold
    return {
        "pipeline_stage": stage,
        "metric": metric,
        "value": float(value),
        "threshold": float(threshold),
        "pass": bool(ok),
    }


def run_oracle_validation(cfg: ExperimentConfig, seed: int) -> list[dict]:
    """Small-scale battery checking each approximation against its brute-force
    counterpart; returns one record per check."""
    rng = np.random.default_rng(seed)
    checks = []

    # implicit quadratic form vs dense matrix
    dim, t, n_stand_in = 50, 200, 400
    grads = rng.standard_normal((t, dim))
    buf = GradientBuffer(t)
    buf.add_rows(grads)
    delta = rng.standard_normal(dim)
    fast = estimate_iiw(delta, buf, n_stand_in).value
    dense = float(n_stand_in * delta @ empirical_fim_dense(grads) @ delta)
    checks.append(
        _oracle_check("fim_quadratic_fast_path", "rel_error", abs(fast - dense) / abs(dense), 1e-10, "max")
    )

    # Gaussian KL closed form vs Monte Carlo
    kl_err = _kl_mc_relative_error(rng)
    checks.append(_oracle_check("gaussian_kl_mc", "rel_error", kl_err, 0.02, "max"))

    # Poisson bootstrap weights moments
    draws = poisson_weights(1_000_000, rng)
    checks.append(_oracle_check("poisson_moments", "abs_mean_error", abs(draws.mean() - 1.0), 0.01, "max"))
    checks.append(_oracle_check("poisson_moments", "abs_var_error", abs(draws.var() - 1.0), 0.01, "max"))

    # influence functions on a strongly convex model vs retraining
    r_diag, max_loo = _influence_battery(rng, num_resamples=cfg.oracle_resamples)
    checks.append(_oracle_check("influence_ridge_loo", "max_abs_error", max_loo, 1e-8, "max"))
    checks.append(_oracle_check("bootstrap_prior_cov", "diag_pearson_r", r_diag, 0.8, "min"))

    # Gram-path log-determinant vs dense eigendecomposition
    dim, t = 30, 50
    grads = rng.standard_normal((t, dim))
    buf = GradientBuffer(t)
    buf.add_rows(grads)
    eps, n = 1e-4, 500
    gram_val = log_det_prior_cov(buf, eps, n)
    f = empirical_fim_dense(grads)
    dense_val = float(np.sum(np.log(np.linalg.eigvalsh(prior_cov_fisher(f, n, eps)))))
    checks.append(
        _oracle_check("logdet_gram_vs_dense", "abs_error", abs(gram_val - dense_val), 1e-8, "max")
    )

    # Hessian vs Fisher at an interpolating softmax regression
    gap = _interpolating_softmax_gap(rng)
    checks.append(_oracle_check("hessian_fisher_gap", "rel_frobenius_gap", gap, 0.2, "max"))
    return checks


def _kl_mc_relative_error(rng, num_samples=1_000_000):
    dim = 3
    a = rng.standard_normal((dim, dim))
    post = GaussianSpec(rng.standard_normal(dim), a @ a.T + 0.5 * np.eye(dim))
    b = rng.standard_normal((dim, dim))
    prior = GaussianSpec(rng.standard_normal(dim), b @ b.T + 0.5 * np.eye(dim))
    closed = gaussian_kl(post, prior)
    chol = np.linalg.cholesky(post.cov)
    draws = post.mean + rng.standard_normal((num_samples, dim)) @ chol.T
    mc = float(np.mean(_log_density(draws, post) - _log_density(draws, prior)))
    return abs(closed - mc) / abs(closed)


def _log_density(x, spec: GaussianSpec):
    cov = spec.dense_cov()
    chol = np.linalg.cholesky(cov)
    centered = x - spec.mean
    y = np.linalg.solve(chol, centered.T)
    maha = np.sum(y * y, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (maha + logdet + spec.mean.size * np.log(2.0 * np.pi))


def bootstrap_fisher_diag_correlation(rng, num_resamples, n=200, features=9, l2=0.01):
    """Pearson r between the bootstrap-retraining covariance diagonal and the
    damped inverse-Fisher diagonal, on well-specified logistic data (D = 10)."""
    ds = convex.logistic_testbed(rng, n=n, features=features)
    trainer = convex.make_logistic_trainer(l2)
    theta_hat = trainer(ds, None)
    grads = convex.logistic_per_sample_grads(theta_hat, ds.inputs, ds.labels, l2)
    f = empirical_fim_dense(grads)
    eps = 1e-8 * float(np.mean(np.diag(f)))
    fisher_cov = prior_cov_fisher(f, ds.n, eps)
    boot = bootstrap_covariance_oracle(ds, num_resamples, trainer, rng)
    return pearson(np.diag(boot), np.diag(fisher_cov))


def _influence_battery(rng, num_resamples):
    """LOO accuracy of influence on ridge plus the bootstrap-vs-Fisher check."""
    # ridge: closed forms make the leave-one-out oracle exact
    n, dim = 20_000, 5
    x = rng.standard_normal((n, dim))
    theta_true = rng.standard_normal(dim)
    y = x @ theta_true + 0.1 * rng.standard_normal(n)
    lam = 1.0
    max_loo = ridge_loo_max_error(x, y, lam, rng, probes=10)
    r = bootstrap_fisher_diag_correlation(rng, num_resamples)
    return r, max_loo


def ridge_loo_max_error(x, y, lam, rng, probes=10):
    """Max |influence-predicted minus closed-form| LOO change over random probes.

    Objective (1/n) sum_i [ (x_i.theta - y_i)^2 / 2 + lam/2 ||theta||^2 ]:
    dropping sample j rescales nothing else, so the exact LOO minimizer is a
    direct linear solve.
    """
    n, dim = x.shape
    h = x.T @ x / n + lam * np.eye(dim)
    theta = np.linalg.solve(h, x.T @ y / n)
    worst = 0.0
    for j in rng.choice(n, size=probes, replace=False):
        grad_j = (x[j] @ theta - y[j]) * x[j] + lam * theta
        psi = -np.linalg.solve(h, grad_j)
        predicted = -psi / n
        h_loo = h - (np.outer(x[j], x[j]) + lam * np.eye(dim)) / n
        rhs = x.T @ y / n - y[j] * x[j] / n
        actual = np.linalg.solve(h_loo, rhs) - theta
        worst = max(worst, float(np.max(np.abs(predicted - actual))))
    return worst


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a - a.mean()
    b = b - b.mean()
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0:
        return 0.0
    return float(a @ b / denom)


def train_to_interpolation(net, ds, loss_target, max_iters=100_000):
    """Drive plain CE below `loss_target` with backtracking gradient descent.

    Separable data has no finite minimizer, so the stop criterion is the loss
    value, not the gradient norm.
    """
    params = np.zeros(net.num_params)
    loss, g = nets.loss_and_grad(net, params, ds.inputs, ds.labels)
    step = 1.0
    for _ in range(max_iters):
        if loss < loss_target:
            return params, loss
        step = min(step * 2.0, 1e4)
        while True:
            cand = params - step * g
            cand_loss, cand_g = nets.loss_and_grad(net, cand, ds.inputs, ds.labels)
            if cand_loss <= loss - 1e-4 * step * float(g @ g):
                break
            step *= 0.5
            if step < 1e-18:
                raise ConvergenceError("interpolation line search stalled")
        params, loss, g = cand, cand_loss, cand_g
    raise ConvergenceError(f"loss {loss:.3e} still above {loss_target} after {max_iters} iterations")


def _interpolating_softmax_gap(rng):
    ds = synthetic_blobs(60, 4, 3, 8.0, rng)
    net = nets.NetworkSpec((4, 3), "linear")
    params, _ = train_to_interpolation(net, ds, 5e-4)
    return hessian_fisher_gap(net, params, ds)


# ---------------------------------------------------------------------------
# sweeps and comparisons


def _sweep_axis(cfg: ExperimentConfig):
    kind = cfg.experiment
    if kind == "sweep_activation":
        return "activation", cfg.activations, lambda c, v: c.replaced(activation=v)
    if kind == "sweep_noise":
        return "noise_ratio", cfg.noise_ratios, lambda c, v: c.replaced(noise_ratio=v)
    if kind == "sweep_batch":
        return "batch_size", cfg.batch_sizes, lambda c, v: c.replaced(batch_size=v)
    if kind == "sweep_width":
        sizes = cfg.layer_sizes
        return (
            "width",
            cfg.widths,
            lambda c, v: c.replaced(layer_sizes=[sizes[0], int(v), sizes[-1]]),
        )
    if kind == "sweep_depth":
        sizes = cfg.layer_sizes
        hidden_ladder = [64, 32, 16]

        def set_depth(c, depth):
            if not 1 <= depth <= len(hidden_ladder) + 1:
                raise ConfigError(f"depth must be in [1, {len(hidden_ladder) + 1}]")
            layers = [sizes[0]] + hidden_ladder[: depth - 1] + [sizes[-1]]
            return c.replaced(layer_sizes=layers)

        return "depth", cfg.depths, set_depth
    raise ConfigError(f"{kind} is not a sweep experiment")


def _cell_label(axis, value) -> str:
    text = f"{value:g}" if isinstance(value, float) else str(value)
    return f"{axis}-{text}".replace(".", "p")


def run_sweep(cfg: ExperimentConfig, out_dir: Path) -> dict:
    axis, values, apply_value = _sweep_axis(cfg)
    cells = {}
    for value in values:
        cell_cfg = apply_value(cfg, value).replaced(experiment="track")
        per_seed = []
        for seed in cfg.seeds:
            cell_dir = out_dir / _cell_label(axis, value) / f"seed-{seed}"
            per_seed.append(run_track_cell(cell_cfg, seed, cell_dir))
        cells[str(value)] = per_seed

    aggregate = {"experiment": cfg.experiment, "axis": axis, "values": [str(v) for v in values], "cells": cells}
    if cfg.experiment == "sweep_noise":
        wins = []
        for i, seed in enumerate(cfg.seeds):
            finals = [cells[str(v)][i]["final_iiw"] for v in values]
            wins.append(all(b > a for a, b in zip(finals, finals[1:])))
        aggregate["iiw_strictly_increasing_per_seed"] = wins
        aggregate["majority_increasing"] = sum(wins) * 2 > len(wins)
    if cfg.experiment == "sweep_batch":
        interior = []
        for i, seed in enumerate(cfg.seeds):
            finals = [cells[str(v)][i]["final_iiw"] for v in values]
            argmin = int(np.argmin(finals))
            interior.append(0 < argmin < len(values) - 1)
        aggregate["argmin_interior_per_seed"] = interior
        aggregate["majority_interior"] = sum(interior) * 2 > len(interior)
    write_json(out_dir / "aggregate.json", aggregate)
    return aggregate


def _confidence_interval(values):
    values = np.asarray(values, dtype=np.float64)
    mean = float(values.mean())
    if values.size < 2:
        return mean, None
    stderr = float(values.std(ddof=1) / np.sqrt(values.size))
    return mean, 1.96 * stderr


def compare_regularizers(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """Test-accuracy comparison of vanilla / l2 / dropout training and the
    SGLD information-penalized method, with a 95% normal-approximation CI."""
    if len(cfg.methods) < 2:
        raise ConfigError("compare_regularizers needs at least 2 methods")
    per_method: dict[str, list[dict]] = {}
    for method in cfg.methods:
        summaries = []
        for seed in cfg.seeds:
            cell_dir = out_dir / method / f"seed-{seed}"
            if method == "vanilla":
                summaries.append(run_track_cell(cfg, seed, cell_dir))
            elif method == "l2":
                summaries.append(run_track_cell(cfg.replaced(l2_weight=max(cfg.l2_weight, 1e-4)), seed, cell_dir))
            elif method == "dropout":
                summaries.append(
                    run_track_cell(cfg.replaced(dropout_rate=cfg.dropout_rate or 0.1), seed, cell_dir)
                )
            else:
                summaries.append(run_pib_cell(cfg, seed, cell_dir))
        per_method[method] = summaries

    aggregate = {"experiment": "compare_regularizers", "methods": {}}
    for method, summaries in per_method.items():
        accs = [s["final_test_acc"] for s in summaries]
        mean, ci = _confidence_interval(accs)
        aggregate["methods"][method] = {
            "test_acc_per_seed": accs,
            "mean_test_acc": mean,
            "ci95_halfwidth": ci,
        }
    if "pib" in per_method and "vanilla" in per_method:
        pib = [s["final_test_acc"] for s in per_method["pib"]]
        vanilla = [s["final_test_acc"] for s in per_method["vanilla"]]
        wins = [int(p >= v) for p, v in zip(pib, vanilla)]
        aggregate["pib_vs_vanilla_wins"] = wins
        aggregate["pib_majority_wins"] = sum(wins) * 2 > len(wins)
    write_json(out_dir / "aggregate.json", aggregate)
    return aggregate


# ---------------------------------------------------------------------------
# plot data


def emit_plot_data(csv_paths, out_path) -> int:
    """Flatten metrics CSVs into long-format rows (series, x, y).

    Every metric column of every input becomes one series named
    '<path stem>:<column>'; returns the number of data rows written.
    """
    rows = []
    for path in csv_paths:
        header, records = read_metrics_csv(path)
        label = str(path).rsplit(".", 1)[0].replace("\\", "/")
        metric_cols = [c for c in header if c != "iter"]
        for record in records:
            for col in metric_cols:
                value = record[col]
                rows.append((f"{label}:{col}", record["iter"], value))
    with open(out_path, "w", newline="") as f:
        f.write("series,x,y\n")
        for series, x, y in rows:
            y_text = "" if y is None else repr(float(y))
            f.write(f"{series},{int(x)},{y_text}\n")
    return len(rows)


# ---------------------------------------------------------------------------
# top-level dispatch


def run(cfg: ExperimentConfig, out_dir=None) -> int:
    """Execute the configured experiment; returns the process exit code."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kind = cfg.experiment
    if kind is None:
        raise ConfigError("config must set 'experiment'")
    try:
        if kind == "track":
            summaries = [run_track_cell(cfg, seed, out / f"seed-{seed}") for seed in cfg.seeds]
            write_json(out / "aggregate.json", {"experiment": "track", "runs": summaries})
        elif kind == "pib_train":
            summaries = [run_pib_cell(cfg, seed, out / f"seed-{seed}") for seed in cfg.seeds]
            write_json(out / "aggregate.json", {"experiment": "pib_train", "runs": summaries})
        elif kind == "oracle_validate":
            checks = run_oracle_validation(cfg, cfg.seeds[0])
            write_json(out / "report.json", checks)
            return 0 if all(c["pass"] for c in checks) else 1
        elif kind == "compare_regularizers":
            compare_regularizers(cfg, out)
        elif kind.startswith("sweep_"):
            run_sweep(cfg, out)
        else:
            raise ConfigError(f"unknown experiment {kind!r}")
    except DivergenceError as exc:
        # keep whatever was logged before the abort
        write_metrics_csv(out / "diverged-metrics.csv", exc.metrics)
        write_json(out / "diverged.json", {"error": str(exc), "iteration": exc.iteration})
        return 3
    return 0
