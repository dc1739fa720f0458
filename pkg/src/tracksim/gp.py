"""Gaussian-process regression of the vehicle's inverse command model.

Each training sample pairs a six-dimensional context
(next realized offset delta, current offset delta, heading) with the
two-dimensional track command that produced it. The two command outputs
are modeled by two independent zero-mean GPs over the shared inputs
(conditional independence given the context), each with its own
squared-exponential ARD kernel and noise level.

Hyperparameters live in log space and are chosen by maximizing the exact
log marginal likelihood with analytic gradients under a bounded
quasi-Newton optimizer, from a data-scaled start plus seeded random
restarts. Inputs and targets are standardized internally; the stored
transform is inverted at prediction time.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.linalg.lapack import dpotri
from scipy.optimize import minimize

KERNEL_KIND = "squared_exponential_ard"
MODEL_FORMAT = "tracksim-gp"
MODEL_FORMAT_VERSION = 1

# jitter added to the noisy kernel matrix before factorization, relative
# to its mean diagonal; escalates by 10x on failure up to the max
JITTER_REL_INIT = 1e-10
JITTER_REL_MAX = 1e-4

# log-space optimizer bounds (standardized data): lengthscales, signal
# variance, noise variance
BOUND_LOG_LENGTHSCALE = (math.log(1e-3), math.log(1e4))
BOUND_LOG_SIGNAL_VAR = (math.log(1e-6), math.log(1e6))
BOUND_LOG_NOISE_VAR = (math.log(1e-12), math.log(1e3))


class ConditioningError(RuntimeError):
    """Kernel matrix could not be factorized even at maximum jitter."""


@dataclass(frozen=True)
class Kernel:
    """Squared-exponential ARD kernel, log-space hyperparameters."""

    log_lengthscales: np.ndarray
    log_signal_variance: float

    def __post_init__(self) -> None:
        lls = np.asarray(self.log_lengthscales, dtype=float)
        if lls.ndim != 1 or not np.all(np.isfinite(lls)):
            raise ValueError("log_lengthscales must be a finite 1-D array")
        if not math.isfinite(self.log_signal_variance):
            raise ValueError("log_signal_variance must be finite")
        object.__setattr__(self, "log_lengthscales", lls)

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)

    @property
    def signal_variance(self) -> float:
        return math.exp(self.log_signal_variance)


def kernel_matrix(kernel: Kernel, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross-covariance matrix between two input sets (M,D) x (P,D)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    d = kernel.log_lengthscales.shape[0]
    if a.shape[1] != d or b.shape[1] != d:
        raise ValueError(
            f"inputs must have {d} columns, got {a.shape[1]} and {b.shape[1]}"
        )
    ua = a / kernel.lengthscales
    ub = ua if b is a else b / kernel.lengthscales
    sq = -2.0 * (ua @ ub.T)
    sq += np.sum(ua**2, axis=1)[:, None]
    sq += np.sum(ub**2, axis=1)[None, :]
    np.maximum(sq, 0.0, out=sq)
    sq *= -0.5
    np.exp(sq, out=sq)
    sq *= kernel.signal_variance
    return sq


@dataclass(frozen=True)
class Dataset:
    """Paired regression data: inputs (N, 6), targets (N, 2)."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.inputs, dtype=float)
        z = np.asarray(self.targets, dtype=float)
        if w.ndim != 2 or z.ndim != 2:
            raise ValueError("inputs and targets must be 2-D arrays")
        if w.shape[0] != z.shape[0]:
            raise ValueError(
                f"row mismatch: {w.shape[0]} inputs vs {z.shape[0]} targets"
            )
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(z))):
            raise ValueError("dataset contains non-finite values")
        object.__setattr__(self, "inputs", w)
        object.__setattr__(self, "targets", z)

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class FitConfig:
    """Hyperparameter-optimization settings."""

    max_iter: int = 200
    grad_tol: float = 1e-6
    restarts: int = 3
    restart_spread: float = 0.5
    seed: int = 0
    max_train: int = 5000

    def __post_init__(self) -> None:
        if self.max_iter < 1 or self.restarts < 0 or self.max_train < 1:
            raise ValueError(f"invalid fit configuration: {self}")


def _chol_with_jitter(k_noisy: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor with escalating diagonal jitter.

    Returns (L, jitter). Raises ConditioningError when even the maximum
    jitter cannot rescue the factorization.
    """
    n = k_noisy.shape[0]
    mean_diag = float(np.trace(k_noisy)) / n
    work = k_noisy.copy()
    applied = 0.0
    rel = JITTER_REL_INIT
    while True:
        jitter = rel * mean_diag
        work.flat[:: n + 1] += jitter - applied
        applied = jitter
        try:
            return cholesky(work, lower=True), jitter
        except np.linalg.LinAlgError:
            pass
        if rel >= JITTER_REL_MAX:
            raise ConditioningError(
                f"Cholesky failed at maximum jitter {jitter:.3e} "
                f"(relative level {rel:.0e})"
            )
        rel *= 10.0


def _spd_inverse_from_cholesky(l: np.ndarray) -> np.ndarray:
    """Full inverse of L L' from its lower factor (LAPACK dpotri)."""
    tri, info = dpotri(l, lower=1)
    if info != 0:
        return cho_solve((l, True), np.eye(l.shape[0]))
    return np.tril(tri) + np.tril(tri, -1).T


def nll_and_grad(
    theta: np.ndarray, inputs: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """Negative log marginal likelihood of one output, with gradient.

    theta = [log lengthscales (D), log signal variance, log noise
    variance]. The gradient is exact up to the (tiny, constant-level)
    factorization jitter.
    """
    n, d = inputs.shape
    kern = Kernel(theta[:d], float(theta[d]))
    noise_var = math.exp(theta[d + 1])
    k = kernel_matrix(kern, inputs, inputs)
    k_noisy = k.copy()
    k_noisy.flat[:: n + 1] += noise_var
    l, _ = _chol_with_jitter(k_noisy)
    alpha = cho_solve((l, True), targets)
    nll = (
        0.5 * float(targets @ alpha)
        + float(np.sum(np.log(np.diag(l))))
        + 0.5 * n * math.log(2.0 * math.pi)
    )
    k_inv = _spd_inverse_from_cholesky(l)
    trace_m = float(alpha @ alpha) - float(np.trace(k_inv))
    m = np.outer(alpha, alpha)
    m -= k_inv
    m *= k  # now holds P = (alpha alpha' - K_y^-1) o K
    p = m
    grad = np.empty(d + 2)
    scaled = inputs / kern.lengthscales
    row_sums = p.sum(axis=1)
    p_scaled = p @ scaled
    # d/d(log l_d) of -log p: -(sum_i u_id^2 s_i - u_d' P u_d)
    grad[:d] = -(
        np.einsum("nd,n->d", scaled**2, row_sums)
        - np.einsum("nd,nd->d", scaled, p_scaled)
    )
    grad[d] = -0.5 * float(row_sums.sum())
    grad[d + 1] = -0.5 * noise_var * trace_m
    return nll, grad


@dataclass
class OutputModel:
    """Per-output hyperparameters plus factorization cache."""

    kernel: Kernel
    log_noise_variance: float
    chol: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None
    jitter: float = 0.0

    @property
    def noise_variance(self) -> float:
        return math.exp(self.log_noise_variance)


@dataclass
class GpModel:
    """Two independent GPs over shared inputs, with standardization."""

    inputs: np.ndarray  # raw training inputs (N, 6)
    targets: np.ndarray  # raw training targets (N, 2)
    input_mean: np.ndarray
    input_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray
    outputs: list[OutputModel] = field(default_factory=list)
    report: dict = field(default_factory=dict)

    def standardized_inputs(self) -> np.ndarray:
        return (self.inputs - self.input_mean) / self.input_std


def _safe_std(x: np.ndarray) -> np.ndarray:
    std = x.std(axis=0)
    return np.where(std > 0.0, std, 1.0)


def _refresh_caches(model: GpModel) -> None:
    """(Re)build each output's Cholesky factor and weight vector."""
    xs = model.standardized_inputs()
    zs = (model.targets - model.target_mean) / model.target_std
    n = xs.shape[0]
    for j, out in enumerate(model.outputs):
        k_noisy = kernel_matrix(out.kernel, xs, xs)
        k_noisy.flat[:: n + 1] += out.noise_variance
        out.chol, out.jitter = _chol_with_jitter(k_noisy)
        out.alpha = cho_solve((out.chol, True), zs[:, j])


def _optimize_output(
    xs: np.ndarray, zs_col: np.ndarray, config: FitConfig, seed_key: list
) -> tuple[np.ndarray, float, dict]:
    """Maximize one output's marginal likelihood; returns (theta, nll, info)."""
    n, d = xs.shape
    rng = np.random.default_rng(seed_key)
    base = np.concatenate([np.zeros(d), [0.0], [math.log(0.01)]])
    # standardized data: unit input scales and unit target variance
    base[:d] = np.log(_safe_std(xs))
    var_z = float(zs_col.var())
    if var_z > 0.0:
        base[d] = math.log(var_z)
        base[d + 1] = math.log(0.01 * var_z)
    bounds = (
        [BOUND_LOG_LENGTHSCALE] * d + [BOUND_LOG_SIGNAL_VAR] + [BOUND_LOG_NOISE_VAR]
    )
    starts = [base]
    for _ in range(config.restarts):
        starts.append(base + rng.normal(0.0, config.restart_spread, size=d + 2))
    starts = [np.clip(s, [b[0] for b in bounds], [b[1] for b in bounds]) for s in starts]

    def objective(theta):
        try:
            return nll_and_grad(theta, xs, zs_col)
        except ConditioningError:
            # unfactorizable probe: send the line search back
            return 1e25, np.zeros_like(theta)

    best = None
    infos = []
    for idx, start in enumerate(starts):
        trace: list[float] = []
        last: dict = {}

        def tracked(theta):
            value, grad = objective(theta)
            last["x"] = np.array(theta)
            last["f"] = value
            return value, grad

        def callback(xk):
            # record the objective at each accepted iterate
            if "x" in last and np.array_equal(last["x"], xk):
                trace.append(last["f"])
            else:
                trace.append(float(objective(xk)[0]))

        result = minimize(
            tracked,
            start,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            callback=callback,
            options={"maxiter": config.max_iter, "gtol": config.grad_tol},
        )
        infos.append(
            {
                "start": idx,
                "nll": float(result.fun),
                "iterations": int(result.nit),
                "objective_trace": trace,
            }
        )
        if np.isfinite(result.fun) and (best is None or result.fun < best[1]):
            best = (np.array(result.x), float(result.fun), idx)
    if best is None:
        raise ConditioningError("every optimizer start ended non-finite")
    info = {
        "chosen_start": best[2],
        "final_nll": best[1],
        "starts": infos,
    }
    return best[0], best[1], info


def fit(inputs: np.ndarray, targets: np.ndarray, config: FitConfig = FitConfig()) -> GpModel:
    """Fit both command outputs independently over the shared inputs.

    Training sets larger than config.max_train are subsampled uniformly
    (seeded) before standardization. Each output gets its own RNG stream
    derived from (seed, output index), so one output's data can never
    influence the other's optimization path.
    """
    data = Dataset(inputs, targets)
    w, z = data.inputs, data.targets
    if len(data) > config.max_train:
        pick_rng = np.random.default_rng([config.seed, 2])
        idx = np.sort(
            pick_rng.choice(len(data), size=config.max_train, replace=False)
        )
        w, z = w[idx], z[idx]
    input_mean = w.mean(axis=0)
    input_std = _safe_std(w)
    target_mean = z.mean(axis=0)
    target_std = _safe_std(z)
    model = GpModel(
        inputs=w,
        targets=z,
        input_mean=input_mean,
        input_std=input_std,
        target_mean=target_mean,
        target_std=target_std,
    )
    xs = model.standardized_inputs()
    zs = (z - target_mean) / target_std
    d = w.shape[1]
    per_output = []
    for j in range(zs.shape[1]):
        theta, _, info = _optimize_output(xs, zs[:, j], config, [config.seed, j])
        per_output.append(info)
        model.outputs.append(
            OutputModel(
                kernel=Kernel(theta[:d], float(theta[d])),
                log_noise_variance=float(theta[d + 1]),
            )
        )
    model.report = {
        "n_train": int(w.shape[0]),
        "restarts": config.restarts,
        "max_iter": config.max_iter,
        "outputs": per_output,
    }
    _refresh_caches(model)
    return model


def predict(model: GpModel, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and observation variance of the command at w.

    Accepts a single 6-vector or an (M, 6) batch; returns arrays shaped
    (2,)/(M, 2). Variance includes the fitted noise level.
    """
    w = np.asarray(w, dtype=float)
    single = w.ndim == 1
    w2 = np.atleast_2d(w)
    if w2.shape[1] != model.inputs.shape[1]:
        raise ValueError(
            f"query must have {model.inputs.shape[1]} columns, got {w2.shape[1]}"
        )
    if not np.all(np.isfinite(w2)):
        raise ValueError("prediction query contains non-finite values")
    xs = model.standardized_inputs()
    ws = (w2 - model.input_mean) / model.input_std
    means = np.empty((w2.shape[0], len(model.outputs)))
    variances = np.empty_like(means)
    for j, out in enumerate(model.outputs):
        if out.chol is None or out.alpha is None:
            raise RuntimeError("model caches missing; fit or load the model first")
        ks = kernel_matrix(out.kernel, ws, xs)
        mean_s = ks @ out.alpha
        v = solve_triangular(out.chol, ks.T, lower=True)
        latent = np.maximum(out.kernel.signal_variance - np.sum(v**2, axis=0), 0.0)
        var_s = latent + out.noise_variance
        means[:, j] = mean_s * model.target_std[j] + model.target_mean[j]
        variances[:, j] = var_s * model.target_std[j] ** 2
    if single:
        return means[0], variances[0]
    return means, variances


def held_out_error(model: GpModel, inputs: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-point Euclidean command errors on a held-out set, plus mean."""
    data = Dataset(inputs, targets)
    if len(data) == 0:
        raise ValueError("held-out set is empty")
    mean, _ = predict(model, data.inputs)
    errors = np.linalg.norm(mean - data.targets, axis=1)
    return errors, float(errors.mean())


# ---------------------------------------------------------------------------
# persistence


def model_to_dict(model: GpModel) -> dict:
    n, d = model.inputs.shape
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_FORMAT_VERSION,
        "kernel_kind": KERNEL_KIND,
        "n_train": n,
        "input_dim": d,
        "output_dim": len(model.outputs),
        "inputs": model.inputs.tolist(),
        "targets": model.targets.tolist(),
        "standardization": {
            "input_mean": model.input_mean.tolist(),
            "input_std": model.input_std.tolist(),
            "target_mean": model.target_mean.tolist(),
            "target_std": model.target_std.tolist(),
        },
        "outputs": [
            {
                "log_lengthscales": out.kernel.log_lengthscales.tolist(),
                "log_signal_variance": out.kernel.log_signal_variance,
                "log_noise_variance": out.log_noise_variance,
            }
            for out in model.outputs
        ],
        "report": model.report,
    }


def model_from_dict(payload: dict) -> GpModel:
    for key in ("format", "kernel_kind", "inputs", "targets", "standardization", "outputs"):
        if key not in payload:
            raise ValueError(f"model file missing field {key!r}")
    if payload["format"] != MODEL_FORMAT:
        raise ValueError(f"unrecognized model format {payload['format']!r}")
    if payload["kernel_kind"] != KERNEL_KIND:
        raise ValueError(f"unsupported kernel kind {payload['kernel_kind']!r}")
    inputs = np.asarray(payload["inputs"], dtype=float)
    targets = np.asarray(payload["targets"], dtype=float)
    if inputs.ndim != 2 or targets.ndim != 2 or inputs.shape[0] != targets.shape[0]:
        raise ValueError("model training arrays are inconsistent")
    if inputs.shape != (payload["n_train"], payload["input_dim"]):
        raise ValueError(
            f"declared dims {(payload['n_train'], payload['input_dim'])} do not "
            f"match stored inputs {inputs.shape}"
        )
    std = payload["standardization"]
    model = GpModel(
        inputs=inputs,
        targets=targets,
        input_mean=np.asarray(std["input_mean"], dtype=float),
        input_std=np.asarray(std["input_std"], dtype=float),
        target_mean=np.asarray(std["target_mean"], dtype=float),
        target_std=np.asarray(std["target_std"], dtype=float),
        report=payload.get("report", {}),
    )
    if model.input_mean.shape != (inputs.shape[1],):
        raise ValueError("standardization constants do not match input dim")
    for out in payload["outputs"]:
        model.outputs.append(
            OutputModel(
                kernel=Kernel(
                    np.asarray(out["log_lengthscales"], dtype=float),
                    float(out["log_signal_variance"]),
                ),
                log_noise_variance=float(out["log_noise_variance"]),
            )
        )
    if len(model.outputs) != targets.shape[1]:
        raise ValueError("output blocks do not match target dim")
    _refresh_caches(model)
    return model


def save_model(model: GpModel, path: str) -> None:
    """Serialize to JSON atomically (temp file + rename)."""
    payload = json.dumps(model_to_dict(model), indent=1, sort_keys=True)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path: str) -> GpModel:
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"model file {path} is not valid JSON: {exc}") from exc
    return model_from_dict(payload)
