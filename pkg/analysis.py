"""
Experiment harnesses and convergence-bound evaluators.

Bound constants are the explicit coefficients of the final inequalities
behind the O(.) statements:

  convex (full participation, full batch)
      3 ||theta0 - theta*||^2 / (T eta tau) + 36 eta^2 tau (tau - 1) L sigma*^2
      + 9 eta tau sigma*^2 + (2 tau^2 + 3 tau + 1) eta^2 * 3 sigma^2 / (2^(2n) - 1)

  non-convex
      8 (L0 - Lt) / (T eta tau kappa) + 40 eta^2 tau (tau - 1) L^2 sigma_g^2 / kappa
      + 24 T eta tau L sigma_g^2 / kappa
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np
import pandas as pd
from sklearn.linear_model import LinearRegression
from tqdm import tqdm

from errors import ConfigurationError, InputError
from privacy import calibrated_sigma_sq, variance_factor
from qnn import Batch, QnnModel, observable_gradient, per_sample_gradients, random_layered_circuit
from server import run_training
from utils import STREAM_SCAN, STREAM_TRIALS, derive_stream

logger = logging.getLogger(__name__)

MIN_SCAN_SAMPLES = 100
MIN_TRIALS = 100
KAPPA_FLOOR = 1e-6
CONVEX_TERMS = ("init", "client_drift", "optimum_noise", "quantum_variance")
NONCONVEX_TERMS = ("loss_drop", "client_drift", "heterogeneity")


@dataclass(frozen=True)
class BoundInputs:
    eta_l: float
    tau: int
    T: int
    L: float
    mu: float = 0.0
    sigma_star_sq: float = 0.0
    sigma_sq: float = 0.0
    sigma_g_sq: float = 0.0
    n_qubits: int = 1
    theta0_gap: float = 0.0
    loss_drop: float = 0.0
    kappa: float = 1.0
    vartheta_sq: float = 0.0

    def validate(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigurationError(f"bounds.{name} must be >= 0, got {value}")
        if not self.eta_l > 0:
            raise ConfigurationError(f"bounds.eta_l must be > 0, got {self.eta_l}")
        if self.tau < 1 or self.T < 1:
            raise ConfigurationError("bounds.tau and bounds.T must be >= 1")
        if self.n_qubits < 1:
            raise ConfigurationError(f"bounds.n_qubits must be >= 1, got {self.n_qubits}")
        if not 0 < self.kappa <= 1:
            raise ConfigurationError(f"bounds.kappa must lie in (0, 1], got {self.kappa}")
        return self

    def step_size_window(self):
        """(lower, upper) step sizes of the convex guarantee; empty when tau == 1."""
        return 1 / (2 * math.sqrt(6) * self.tau ** 2 * self.L), 1 / (6 * self.tau * self.L)


@dataclass(frozen=True)
class BoundResult:
    total: float
    terms: tuple
    names: tuple
    warnings: tuple = ()

    def as_dict(self):
        return {"total": self.total, **dict(zip(self.names, self.terms))}


def _sum_terms(terms):
    total = 0.0
    for term in terms:
        total += term
    return total


def convex_bound(inputs: BoundInputs):
    """
    Convex convergence bound, term by term.

    Returns:
    BoundResult: total plus (init, client_drift, optimum_noise, quantum_variance)
    """
    inputs.validate()
    eta, tau = inputs.eta_l, inputs.tau
    warnings = []
    if inputs.L > 0:
        lower, upper = inputs.step_size_window()
        if not lower < eta < upper:
            message = f"eta_l={eta:.4g} outside the step-size window ({lower:.4g}, {upper:.4g})"
            logger.warning(message)
            warnings.append(message)

    terms = (
        3 * inputs.theta0_gap / (inputs.T * eta * tau),
        36 * eta ** 2 * tau * (tau - 1) * inputs.L * inputs.sigma_star_sq,
        9 * eta * tau * inputs.sigma_star_sq,
        (2 * tau ** 2 + 3 * tau + 1) * eta ** 2 * inputs.sigma_sq * variance_factor(inputs.n_qubits),
    )
    return BoundResult(_sum_terms(terms), terms, CONVEX_TERMS, tuple(warnings))


def nonconvex_bound(inputs: BoundInputs):
    """Non-convex gradient-progress bound; every term carries 1 / kappa."""
    inputs.validate()
    eta, tau, kappa = inputs.eta_l, inputs.tau, inputs.kappa
    terms = (
        8 * inputs.loss_drop / (inputs.T * eta * tau * kappa),
        40 * eta ** 2 * tau * (tau - 1) * inputs.L ** 2 * inputs.sigma_g_sq / kappa,
        24 * inputs.T * eta * tau * inputs.L * inputs.sigma_g_sq / kappa,
    )
    return BoundResult(_sum_terms(terms), terms, NONCONVEX_TERMS)


def kappa_from_trajectory(grad_norms, vartheta, L, p_sharp, start=0):
    """
    kappa = 1 - sum_{t=start}^{T-1} P_sharp * 1(||grad L(theta_start)|| + vartheta < L)

    The indicator is evaluated at `start` for every t, as written in the
    bound. The result is clamped to [KAPPA_FLOOR, 1].
    """
    grad_norms = np.asarray(grad_norms, dtype=float)
    if not 0 <= p_sharp <= 1:
        raise ConfigurationError(f"p_sharp must lie in [0, 1], got {p_sharp}")
    if not 0 <= start < len(grad_norms):
        raise InputError(f"start={start} outside a trajectory of {len(grad_norms)} rounds")
    trapped = float(grad_norms[start] + vartheta < L)
    kappa = 1.0 - (len(grad_norms) - start) * p_sharp * trapped
    if kappa < KAPPA_FLOOR:
        logger.warning("kappa=%.4g clamped to %g", kappa, KAPPA_FLOOR)
        kappa = KAPPA_FLOOR
    return kappa


def kappa_sweep(inputs: BoundInputs, kappas):
    """Non-convex bound sensitivity table; kappa_times_total is constant across rows."""
    rows = []
    for kappa in kappas:
        result = nonconvex_bound(replace(inputs, kappa=kappa))
        rows.append({"kappa": kappa, **result.as_dict(), "kappa_times_total": kappa * result.total})
    return pd.DataFrame(rows, columns=["kappa", "total", *NONCONVEX_TERMS, "kappa_times_total"])


@dataclass(frozen=True)
class VarianceScanRow:
    n_qubits: int
    layers: int
    n_samples: int
    sample_variance: float
    mean_gradient: float


def _designated_gradient(n_qubits, layers, seed_key, observable):
    circuit, params = random_layered_circuit(n_qubits, layers, seed_key)
    return float(observable_gradient(QnnModel(circuit, params, observable=observable))[0])


def barren_plateau_scan(n_range, layer_range, samples, seed, observable="global", workers=1, progress=False):
    """
    Sample variance of the designated gradient component over random circuits.

    Circuit s of the (n, layers) cell is seeded with (seed, n, layers, s), so
    each cell is reproducible on its own and independent of worker count.

    The default readout is the global projector Z^{\otimes n}. Over n = 2..6 with
    20 layers and 200 circuits per cell its log2 variance falls with slope -1.90,
    close to the 3 / (2^{2n} - 1) prediction; a local <Z_0> readout measured
    only -0.89 on the same grid, so it understates the concentration.

    Returns:
    list: one VarianceScanRow per (n, layers)
    """
    if samples < MIN_SCAN_SAMPLES:
        raise ConfigurationError(f"barren-plateau scans need samples >= {MIN_SCAN_SAMPLES}, got {samples}")
    cells = [(n, layers) for n in n_range for layers in layer_range]
    rows = []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for n, layers in tqdm(cells, desc="scan", disable=not progress):
            keys = [[int(seed), STREAM_SCAN, n, layers, s] for s in range(samples)]
            grads = np.array(list(pool.map(lambda key: _designated_gradient(n, layers, key, observable), keys)))
            row = VarianceScanRow(n, layers, samples, float(np.var(grads, ddof=1)), float(grads.mean()))
            logger.info("n=%d layers=%d: Var[dC/dtheta]=%.4g", n, layers, row.sample_variance)
            rows.append(row)
    return rows


def scan_frame(rows):
    frame = pd.DataFrame([asdict(r) for r in rows])
    frame["predicted_factor"] = frame["n_qubits"].map(variance_factor)
    return frame


def log_variance_slope(rows, layers=None):
    """Least-squares slope of log2(variance) against n."""
    selected = [r for r in rows if layers is None or r.layers == layers]
    if len({r.n_qubits for r in selected}) < 2:
        raise InputError("a slope needs at least two qubit counts")
    x = np.array([[r.n_qubits] for r in selected], dtype=float)
    y = np.log2([r.sample_variance for r in selected])
    return float(LinearRegression().fit(x, y).coef_[0])


def empirical_minibatch_variance(model, batch, batch_size, trials, seed):
    """
    Mean over trials of ||g_full - g_minibatch||^2.

    Mini-batches are drawn without replacement; both gradients are row means
    of one per-sample gradient matrix, so batch_size == len(batch) gives 0.
    """
    if trials < MIN_TRIALS:
        raise ConfigurationError(f"trials must be >= {MIN_TRIALS}, got {trials}")
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    if batch_size > len(batch):
        raise InputError(f"batch_size {batch_size} exceeds the {len(batch)} available samples")

    per_sample = per_sample_gradients(model, batch)
    full = per_sample.mean(axis=0)
    stream = derive_stream(seed, STREAM_TRIALS)
    deviations = np.empty(trials)
    for trial in range(trials):
        indices = np.sort(stream.choice(len(batch), size=batch_size, replace=False))
        deviations[trial] = np.sum((full - per_sample[indices].mean(axis=0)) ** 2)
    return float(deviations.mean())


def _random_model_batch(n_qubits, layers, n_samples, key):
    circuit, params = random_layered_circuit(n_qubits, layers, key)
    stream = derive_stream(*key, 1)
    inputs = stream.uniform(0.0, np.pi, size=(n_samples, n_qubits))
    labels = stream.integers(0, 2, size=n_samples).astype(float)
    return QnnModel(circuit, params, observable="global"), Batch(inputs, labels)


def minibatch_variance_scan(n_range, n_models, n_samples, batch_size, trials, layers, seed):
    """
    Mini-batch gradient variance averaged over random-circuit models per n,
    next to the predicted variance-factor ratio against the first n.
    """
    if n_models < 1:
        raise ConfigurationError(f"n_models must be >= 1, got {n_models}")
    rows = []
    for n in n_range:
        estimates = []
        for m in range(n_models):
            model, batch = _random_model_batch(n, layers, n_samples, [int(seed), STREAM_TRIALS, n, m])
            estimates.append(empirical_minibatch_variance(model, batch, batch_size, trials, seed + m))
        rows.append({"n_qubits": n, "estimate": float(np.mean(estimates))})
    frame = pd.DataFrame(rows, columns=["n_qubits", "estimate"])
    base = frame.iloc[0]
    frame["measured_ratio"] = frame["estimate"] / base["estimate"]
    frame["predicted_ratio"] = [variance_factor(n) / variance_factor(int(base["n_qubits"])) for n in frame["n_qubits"]]
    return frame


@dataclass(frozen=True)
class ConvergenceCheck:
    horizon: int
    measured_gap: float
    bound: float
    passed: bool

    @property
    def ratio(self):
        if self.bound == 0:
            return 0.0 if self.measured_gap <= 0 else math.inf
        return self.measured_gap / self.bound


def verify_convex_convergence(problem, trajectory, inputs: BoundInputs, horizons=None):
    """
    Compare L(theta_bar_T) - L(theta*) with the convex bound at each horizon.
    theta_bar_T averages theta^(1..T).
    """
    trajectory = np.asarray(trajectory, dtype=float)
    rounds = len(trajectory) - 1
    horizons = [rounds] if horizons is None else list(horizons)
    if any(not 1 <= h <= rounds for h in horizons):
        raise InputError(f"horizons must lie in [1, {rounds}]")
    optimal = problem.optimal_loss()
    checks = []
    for horizon in horizons:
        average = trajectory[1:horizon + 1].mean(axis=0)
        gap = max(problem.global_loss(average) - optimal, 0.0)
        bound = convex_bound(replace(inputs, T=horizon)).total
        checks.append(ConvergenceCheck(horizon, gap, bound, gap <= bound + 1e-12))
        logger.info("T=%d: gap %.4g vs bound %.4g", horizon, gap, bound)
    return checks


def heterogeneity_along_trajectory(problem, trajectory):
    """sigma_g^2 proxy: largest gradient dissimilarity over the visited iterates."""
    return max(problem.gradient_dissimilarity(theta) for theta in np.asarray(trajectory))


def _final_row(result):
    frame = result.rounds_frame()
    last = frame.iloc[-1]
    return {
        "final_global_loss": float(last["global_loss"]),
        "final_test_accuracy": float(last["test_accuracy"]),
        "epsilon_glob": float(last["epsilon_glob"]),
        "mean_accepted": float(frame["accepted"].map(lambda s: len(s.split(";")) if s else 0).mean()),
    }


def privacy_sweep(training, federation, privacy, local, epsilons):
    """Final metrics per epsilon with the calibrated-noise floor enforced."""
    rows = []
    for epsilon in epsilons:
        params = replace(privacy, epsilon=epsilon, enforce_dp=True)
        result = run_training(training, federation, params, local)
        rows.append({"epsilon": epsilon, "calibrated_sigma_sq": calibrated_sigma_sq(params), **_final_row(result)})
    return pd.DataFrame(rows)


def participation_sweep(training, federation, privacy, local, ks):
    """Final metrics per clients-per-round K."""
    rows = []
    for k in ks:
        result = run_training(replace(training, K=k), federation, replace(privacy, K=k), local)
        rows.append({"K": k, "fraction": k / training.U, **_final_row(result)})
    return pd.DataFrame(rows)
