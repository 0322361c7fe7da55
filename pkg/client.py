"""
Local training for one federated client.

Per round a selected client receives the global parameters theta and runs
tau iterations of the noisy meta update

    theta~ = theta - eta * clip(grad L(theta; support))
    phi    = theta - beta * [I - eta * H(theta~; support)] (clip(grad L(theta~; query)) + G_t)

then uploads a sparsified estimate phi_hat. The acceptance filter compares
phi_hat with the noise-free meta update, so clients whose injected noise moved
them further than b / lambda are excluded from aggregation.
"""
from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace

import numpy as np

from errors import ConfigurationError, InputError, NumericalError, StructuralError
from privacy import gaussian_noise
from qnn import Batch, batch_loss, grad_parameter_shift, per_sample_gradients
from utils import STREAM_CLIENT, clip_by_norm, derive_stream, l2_norm

logger = logging.getLogger(__name__)

HESSIAN_MODES = ("exact_hvp", "first_order")
OPTIMIZERS = ("sgd", "adam")
ALGORITHMS = ("adp_qfl", "fedavg")
HVP_STEP = 1e-4
_SPLIT_KEY = 0
_NOISE_KEY = 1


class LocalObjective(ABC):
    """A client's local loss L(theta; subset) and its gradients."""

    sample_based = True

    @property
    @abstractmethod
    def dim(self):
        ...

    @abstractmethod
    def __len__(self):
        ...

    @abstractmethod
    def loss(self, theta, indices=None):
        ...

    @abstractmethod
    def gradient(self, theta, indices=None):
        ...

    @abstractmethod
    def per_sample_gradients(self, theta, indices=None):
        ...


class QnnObjective(LocalObjective):
    """Mean MSE of a QNN over the client's local dataset."""

    def __init__(self, model, dataset):
        self.model = model
        self.batch = Batch(dataset.features, dataset.labels.astype(float))

    @property
    def dim(self):
        return len(self.model.params)

    def __len__(self):
        return len(self.batch)

    def _batch(self, indices):
        return self.batch if indices is None else self.batch.subset(indices)

    def loss(self, theta, indices=None):
        return batch_loss(self.model.with_params(theta), self._batch(indices))

    def gradient(self, theta, indices=None):
        return grad_parameter_shift(self.model.with_params(theta), self._batch(indices))

    def per_sample_gradients(self, theta, indices=None):
        return per_sample_gradients(self.model.with_params(theta), self._batch(indices))


class QuadraticObjective(LocalObjective):
    """f(theta) = a / 2 * ||theta - c||^2; support and query both see the full objective."""

    sample_based = False

    def __init__(self, curvature, optimum):
        self.curvature = float(curvature)
        self.optimum = np.array(optimum, dtype=float)

    @property
    def dim(self):
        return len(self.optimum)

    def __len__(self):
        return 1

    def loss(self, theta, indices=None):
        return 0.5 * self.curvature * float(np.sum((np.asarray(theta) - self.optimum) ** 2))

    def gradient(self, theta, indices=None):
        return self.curvature * (np.asarray(theta, dtype=float) - self.optimum)

    def per_sample_gradients(self, theta, indices=None):
        return self.gradient(theta)[None, :]


@dataclass(frozen=True)
class LocalConfig:
    eta: float
    beta: float
    tau: int = 1
    support_fraction: float = 0.5
    hessian_mode: str = "first_order"
    clip_norm: float = math.inf
    optimizer: str = "sgd"
    batch_size: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self):
        if not self.eta > 0:
            raise ConfigurationError(f"local.eta must be > 0, got {self.eta}")
        if not self.beta >= 0:
            raise ConfigurationError(f"local.beta must be >= 0, got {self.beta}")
        if self.tau < 1:
            raise ConfigurationError(f"local.tau must be >= 1, got {self.tau}")
        if not 0 < self.support_fraction < 1:
            raise ConfigurationError(f"local.support_fraction must lie in (0, 1), got {self.support_fraction}")
        if self.hessian_mode not in HESSIAN_MODES:
            raise ConfigurationError(f"local.hessian_mode must be one of {HESSIAN_MODES}, got {self.hessian_mode!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"local.optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not self.clip_norm > 0:
            raise ConfigurationError(f"local.clip_norm must be > 0, got {self.clip_norm}")
        if self.batch_size < 0:
            raise ConfigurationError(f"local.batch_size must be >= 0, got {self.batch_size}")
        return self


@dataclass
class ClientState:
    id: int
    objective: LocalObjective
    theta: np.ndarray
    phi: np.ndarray | None = None
    phi_hat: np.ndarray | None = None
    fim_trace: float = 0.0


@dataclass
class AdamMoments:
    """Adam moment estimates for the inner step; reset every round."""
    beta1: float
    beta2: float
    eps: float
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, dim, cfg):
        return cls(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, np.zeros(dim), np.zeros(dim))

    def direction(self, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad ** 2
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return m_hat / (np.sqrt(v_hat) + self.eps)


def _split_indices(n_samples, support_fraction, stream):
    if n_samples < 2:
        raise InputError(f"cannot split {n_samples} sample(s) into support and query sets")
    n_support = min(max(math.floor(support_fraction * n_samples), 1), n_samples - 1)
    order = stream.permutation(n_samples)
    return np.sort(order[:n_support]), np.sort(order[n_support:])


def split_support_query(dataset, support_fraction, stream):
    """
    Disjoint support/query split; the support size is floor(fraction * n).

    Returns:
    tuple: (support subset, query subset)
    """
    support, query = _split_indices(len(dataset), support_fraction, stream)
    return dataset.subset(support), dataset.subset(query)


def _draw_sets(objective, cfg, stream):
    if not objective.sample_based:
        return None, None
    pool = np.arange(len(objective))
    if cfg.batch_size and cfg.batch_size < len(pool):
        pool = np.sort(stream.choice(pool, size=cfg.batch_size, replace=False))
    support, query = _split_indices(len(pool), cfg.support_fraction, stream)
    return pool[support], pool[query]


def hessian_vector_product(objective, theta, indices, vector):
    """Central finite difference of the gradient along `vector`, step 1e-4 * (1 + ||theta||)."""
    norm = l2_norm(vector)
    if norm == 0:
        return np.zeros_like(vector)
    h = HVP_STEP * (1 + l2_norm(theta))
    direction = vector / norm
    plus = objective.gradient(theta + h * direction, indices)
    minus = objective.gradient(theta - h * direction, indices)
    return norm * (plus - minus) / (2 * h)


def _check_finite(values, what, client_id):
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"client {client_id}: non-finite {what}")


def _check_clipped(values, bound, what, client_id):
    _check_finite(values, what, client_id)
    norm = l2_norm(values)
    if norm > bound * (1 + 1e-12):
        raise NumericalError(f"client {client_id}: clipped {what} has norm {norm:.6g} > clip_norm {bound:.6g}")


def local_meta_update(state: ClientState, cfg: LocalConfig, sigma_t_sq, stream, noise_stream=None):
    """
    Run tau noisy meta-update iterations from state.theta.

    Parameters:
    state (ClientState): Client-owned state; theta is the broadcast model
    cfg (LocalConfig): Local hyperparameters
    sigma_t_sq (float): Variance of the Gaussian noise added to the query gradient
    stream (numpy.random.Generator): Mini-batch and support/query draws
    noise_stream (numpy.random.Generator, optional): Noise draws, defaults to `stream`

    Returns:
    numpy.ndarray: phi after tau iterations (also stored on the state)
    """
    noise_stream = stream if noise_stream is None else noise_stream
    objective = state.objective
    theta = np.array(state.theta, dtype=float)
    moments = AdamMoments.zeros(len(theta), cfg) if cfg.optimizer == "adam" else None

    for _ in range(cfg.tau):
        support, query = _draw_sets(objective, cfg, stream)

        grad_support, _ = clip_by_norm(objective.gradient(theta, support), cfg.clip_norm)
        _check_clipped(grad_support, cfg.clip_norm, "support gradient", state.id)
        step = moments.direction(grad_support) if moments is not None else grad_support
        theta_tilde = theta - cfg.eta * step

        grad_query, raw_norm = clip_by_norm(objective.gradient(theta_tilde, query), cfg.clip_norm)
        _check_clipped(grad_query, cfg.clip_norm, "query gradient", state.id)
        direction = grad_query + gaussian_noise(len(theta), sigma_t_sq, noise_stream)
        if cfg.hessian_mode == "exact_hvp":
            direction = direction - cfg.eta * hessian_vector_product(objective, theta_tilde, support, direction)

        phi = theta - cfg.beta * direction
        _check_finite(phi, "meta update", state.id)
        logger.debug("client %d: query grad norm %.4g (clipped to %.4g)", state.id, raw_norm, l2_norm(grad_query))
        theta = phi

    state.phi = theta
    return theta


def local_sgd(state: ClientState, cfg: LocalConfig, stream):
    """FedAvg local update: tau clipped gradient steps of size eta."""
    theta = np.array(state.theta, dtype=float)
    for _ in range(cfg.tau):
        if state.objective.sample_based and cfg.batch_size and cfg.batch_size < len(state.objective):
            indices = np.sort(stream.choice(len(state.objective), size=cfg.batch_size, replace=False))
        else:
            indices = None
        grad, _ = clip_by_norm(state.objective.gradient(theta, indices), cfg.clip_norm)
        _check_clipped(grad, cfg.clip_norm, "local gradient", state.id)
        theta = theta - cfg.eta * grad
        _check_finite(theta, "local step", state.id)
    state.phi = theta
    return theta


@dataclass(frozen=True)
class SparseUpdate:
    """phi_hat as (index, value) pairs; dropped coordinates stay at the reference model."""
    indices: np.ndarray
    values: np.ndarray
    reference: np.ndarray
    deviation: float
    global_distance: float

    @property
    def dim(self):
        return len(self.reference)

    @property
    def nonzero(self):
        return int(np.count_nonzero(self.values))

    @property
    def dropped(self):
        return self.dim - len(self.indices)

    def dense(self):
        return self.densify(self.reference)

    def densify(self, base):
        """Kept coordinates over `base`; dropped ones inherit it."""
        out = np.array(base, dtype=float)
        if out.shape != (self.dim,):
            raise StructuralError(f"cannot densify a {self.dim}-dim update over shape {out.shape}")
        out[self.indices] = self.values
        return out


def _sparsify_within(phi, theta_ref, radius):
    phi = np.asarray(phi, dtype=float)
    theta_ref = np.asarray(theta_ref, dtype=float)
    if theta_ref.shape != phi.shape:
        raise StructuralError(f"reference shape {theta_ref.shape} does not match phi shape {phi.shape}")
    dim = len(phi)
    delta = phi - theta_ref
    # smallest change from the reference first, ties broken by lowest index
    order = np.lexsort((np.arange(dim), np.abs(delta)))
    budget = np.sqrt(np.cumsum(delta[order] ** 2))
    n_drop = int(np.searchsorted(budget, radius, side="right")) if radius > 0 else 0

    while True:
        keep = np.sort(order[n_drop:])
        phi_hat = theta_ref.copy()
        phi_hat[keep] = phi[keep]
        deviation = l2_norm(phi_hat - phi)
        if deviation <= radius or n_drop == 0:
            break
        n_drop -= 1

    return SparseUpdate(
        indices=keep,
        values=phi[keep],
        reference=theta_ref.copy(),
        deviation=deviation,
        global_distance=l2_norm(delta),
    )


def sparsify(phi, theta_ref, b, lam):
    """
    Reset as many coordinates of phi to theta_ref as possible, smallest
    |phi_i - theta_ref_i| first, while keeping ||phi_hat - phi||_2 <= b / lam.
    Only the kept coordinates travel; the server fills the rest from the
    global model it broadcast.

    Parameters:
    phi (numpy.ndarray): Meta-updated parameters
    theta_ref (numpy.ndarray): Broadcast global model
    b (float): Estimation error bound
    lam (float): Regularization parameter

    Returns:
    SparseUpdate: kept (index, value) pairs and the achieved deviation
    """
    if b < 0 or not lam > 0:
        raise ConfigurationError(f"need b >= 0 and lambda > 0, got b={b}, lambda={lam}")
    return _sparsify_within(phi, theta_ref, b / lam)


def accept_for_aggregation(phi_hat, phi, b, lam):
    phi_hat = np.asarray(phi_hat, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if phi_hat.shape != phi.shape:
        raise StructuralError(f"phi_hat shape {phi_hat.shape} does not match phi shape {phi.shape}")
    return l2_norm(phi_hat - phi) <= b / lam


def trace_from_gradients(per_sample):
    per_sample = np.atleast_2d(per_sample)
    if per_sample.shape[0] == 0:
        raise InputError("cannot estimate a Fisher trace from zero samples")
    return float(np.mean(np.sum(per_sample ** 2, axis=1)))


def fim_trace(objective: LocalObjective, theta):
    """Empirical Fisher trace: mean squared norm of per-sample loss gradients."""
    if len(objective) == 0:
        raise InputError("cannot estimate a Fisher trace on an empty dataset")
    return trace_from_gradients(objective.per_sample_gradients(theta))


@dataclass(frozen=True)
class ClientUpdate:
    client: int
    phi: np.ndarray | None = None
    sparse: SparseUpdate | None = None
    accepted: bool = False
    reference_deviation: float = 0.0
    failed: bool = False
    reason: str = ""


def run_client_round(
    client_id,
    objective,
    theta_global,
    cfg: LocalConfig,
    b,
    lam,
    sigma_t_sq,
    seed,
    round_index,
    algorithm="adp_qfl",
    apply_filter=True,
):
    """
    One selected client's full round. Never raises NumericalError: a client
    whose update diverges is reported as failed instead.

    Streams are derived from (seed, round, client), so the result does not
    depend on which worker runs it.
    """
    split_stream = derive_stream(seed, STREAM_CLIENT, round_index, client_id, _SPLIT_KEY)
    noise_stream = derive_stream(seed, STREAM_CLIENT, round_index, client_id, _NOISE_KEY)
    state = ClientState(client_id, objective, np.array(theta_global, dtype=float))

    try:
        if algorithm == "fedavg":
            phi = local_sgd(state, cfg, split_stream)
            sparse = _sparsify_within(phi, theta_global, 0.0)
            state.phi_hat = sparse.dense()
            return ClientUpdate(client_id, phi, sparse, accepted=True)

        phi = local_meta_update(state, cfg, sigma_t_sq, split_stream, noise_stream)
        if sigma_t_sq > 0:
            clean_state = replace(state, theta=np.array(theta_global, dtype=float))
            clean_stream = derive_stream(seed, STREAM_CLIENT, round_index, client_id, _SPLIT_KEY)
            reference = local_meta_update(clean_state, cfg, 0.0, clean_stream)
        else:
            reference = phi
    except NumericalError as exc:
        logger.warning("round %d: client %d failed: %s", round_index, client_id, exc)
        return ClientUpdate(client_id, failed=True, reason=str(exc))

    radius = b / lam
    noise_deviation = l2_norm(phi - reference)
    sparse = _sparsify_within(phi, theta_global, max(radius - noise_deviation, 0.0))
    state.phi_hat = sparse.dense()
    reference_deviation = l2_norm(state.phi_hat - reference)
    accepted = accept_for_aggregation(state.phi_hat, reference, b, lam) if apply_filter else True
    logger.debug(
        "round %d client %d: dropped %d/%d, deviation %.4g (radius %.4g), accepted=%s",
        round_index, client_id, sparse.dropped, sparse.dim, reference_deviation, radius, accepted,
    )
    return ClientUpdate(client_id, phi, sparse, accepted, reference_deviation)
