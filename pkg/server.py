"""
Synchronous federated rounds.

Each round: sample K of U clients (uniformly or by Fisher trace), fan the
broadcast model out to a worker pool, keep the clients that pass the
acceptance filter, average them into the next global model, charge every
uploading client epsilon / T, and evaluate on held-out data.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.metrics import accuracy_score
from tqdm import tqdm

from client import (
    ALGORITHMS,
    LocalConfig,
    QnnObjective,
    QuadraticObjective,
    SparseUpdate,
    fim_trace,
    run_client_round,
)
from errors import ConfigurationError, InputError, NumericalError, QflError, StructuralError
from privacy import BudgetLedger, PrivacyParams, per_round_epsilon, record_and_total, round_noise_variance
from qnn import Batch, batch_loss, grad_parameter_shift, predict_batch
from utils import STREAM_SAMPLING, derive_stream, l2_norm

logger = logging.getLogger(__name__)

SAMPLING_MODES = ("uniform", "fim")
ROUND_COLUMNS = ["round", "sigma_t_sq", "selected", "accepted", "global_loss", "test_accuracy", "epsilon_glob"]
DIAGNOSTIC_COLUMNS = ["round", "grad_norm_sq", "dropped_fraction", "max_deviation", "mean_global_distance", "failed"]


@dataclass(frozen=True)
class TrainingConfig:
    U: int
    K: int
    T: int
    eta_g: float = 1.0
    sampling: str = "uniform"
    algorithm: str = "adp_qfl"
    filter_enabled: bool = True
    track_gradient_norm: bool = False
    workers: int = 1
    seed: int = 0

    def validate(self):
        if self.U < 1:
            raise ConfigurationError(f"training.U must be >= 1, got {self.U}")
        if not 1 <= self.K <= self.U:
            raise ConfigurationError(f"training.K must lie in [1, U={self.U}], got {self.K}")
        if self.T < 1:
            raise ConfigurationError(f"training.T must be >= 1, got {self.T}")
        if self.eta_g < 0:
            raise ConfigurationError(f"training.eta_g must be >= 0, got {self.eta_g}")
        if self.sampling not in SAMPLING_MODES:
            raise ConfigurationError(f"training.sampling must be one of {SAMPLING_MODES}, got {self.sampling!r}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"training.algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {self.workers}")
        return self


@dataclass(frozen=True)
class GlobalModel:
    params: np.ndarray
    round: int = 0

    def __post_init__(self):
        params = np.array(self.params, dtype=float)
        if not np.all(np.isfinite(params)):
            raise NumericalError(f"global model at round {self.round} has non-finite entries")
        params.setflags(write=False)
        object.__setattr__(self, "params", params)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    sigma_t_sq: float
    selected: tuple
    accepted: tuple
    global_loss: float
    test_accuracy: float
    epsilon_glob: float


@dataclass(frozen=True)
class RoundDiagnostics:
    round: int
    grad_norm_sq: float
    dropped_fraction: float
    max_deviation: float
    mean_global_distance: float
    failed: tuple


def _join_ids(ids):
    return ";".join(str(i) for i in ids)


@dataclass
class TrainingResult:
    records: list
    diagnostics: list
    ledger: BudgetLedger
    trajectory: np.ndarray

    @property
    def final_params(self):
        return self.trajectory[-1]

    def rounds_frame(self):
        rows = [
            (r.round, r.sigma_t_sq, _join_ids(r.selected), _join_ids(r.accepted),
             r.global_loss, r.test_accuracy, r.epsilon_glob)
            for r in self.records
        ]
        return pd.DataFrame(rows, columns=ROUND_COLUMNS)

    def diagnostics_frame(self):
        rows = [
            (d.round, d.grad_norm_sq, d.dropped_fraction, d.max_deviation,
             d.mean_global_distance, _join_ids(d.failed))
            for d in self.diagnostics
        ]
        return pd.DataFrame(rows, columns=DIAGNOSTIC_COLUMNS)


@dataclass
class Federation:
    """Client objectives plus how to evaluate a global model."""
    objectives: list
    theta0: np.ndarray
    evaluate: object
    global_gradient: object = None
    problem: object = None
    meta: dict = field(default_factory=dict)

    @property
    def n_clients(self):
        return len(self.objectives)

    @classmethod
    def from_quadratic(cls, problem, theta0=None):
        objectives = [QuadraticObjective(a, c) for a, c in zip(problem.curvatures, problem.optima)]
        theta0 = np.zeros(problem.dim) if theta0 is None else np.asarray(theta0, dtype=float)

        def evaluate(theta):
            return problem.global_loss(theta), float("nan")

        return cls(objectives, theta0, evaluate, problem.global_gradient, problem)

    @classmethod
    def from_datasets(cls, model, partitions, test, train=None):
        """
        QNN federation: one client per partition, held-out evaluation on `test`.
        `train` (default: the union of partitions) backs the gradient-norm tracking.
        """
        if any(len(part) == 0 for part in partitions):
            raise InputError("every client partition must hold at least one sample")
        objectives = [QnnObjective(model, part) for part in partitions]
        test_batch = Batch(test.features, test.labels.astype(float))
        if train is None:
            features = np.concatenate([part.features for part in partitions])
            labels = np.concatenate([part.labels for part in partitions])
            train_batch = Batch(features, labels.astype(float))
        else:
            train_batch = Batch(train.features, train.labels.astype(float))

        def evaluate(theta):
            current = model.with_params(theta)
            preds = predict_batch(current, test_batch.inputs)
            accuracy = accuracy_score(test_batch.labels.astype(int), (preds >= 0.5).astype(int))
            return batch_loss(current, test_batch), float(accuracy)

        def global_gradient(theta):
            return grad_parameter_shift(model.with_params(theta), train_batch)

        return cls(objectives, np.array(model.params, dtype=float), evaluate, global_gradient)


def sample_clients(config: TrainingConfig, fim_traces, stream):
    """
    Choose K distinct client ids.

    Uniform mode draws a uniform K-subset. FIM mode draws sequentially without
    replacement with probability proportional to each remaining client's trace,
    falling back to uniform draws once the remaining traces are all zero.

    Returns:
    tuple: sorted client ids
    """
    if not 1 <= config.K <= config.U:
        raise ConfigurationError(f"cannot sample K={config.K} of U={config.U} clients")
    if config.sampling == "uniform":
        return tuple(sorted(int(u) for u in stream.choice(config.U, size=config.K, replace=False)))

    if fim_traces is None:
        raise ConfigurationError("fim sampling needs per-client Fisher traces")
    weights = np.asarray(fim_traces, dtype=float)
    if weights.shape != (config.U,):
        raise StructuralError(f"expected {config.U} Fisher traces, got {weights.shape}")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise InputError("Fisher traces must be finite and >= 0")
    if weights.sum() == 0:
        logger.warning("all Fisher traces are zero, sampling uniformly")

    remaining = list(range(config.U))
    chosen = []
    for _ in range(config.K):
        w = weights[remaining]
        total = w.sum()
        pick = stream.choice(len(remaining), p=w / total) if total > 0 else stream.integers(len(remaining))
        chosen.append(remaining.pop(int(pick)))
    return tuple(sorted(chosen))


def aggregate(accepted, eta_g, prev: GlobalModel):
    """
    Average accepted client models into the next global model.

    Parameters:
    accepted (list): SparseUpdate or dense vectors; dropped coordinates inherit prev
    eta_g (float): Server learning rate
    prev (GlobalModel): theta^(t)

    Returns:
    GlobalModel: theta^(t+1) = theta^(t) + eta_g * (mean - theta^(t))
    """
    if not accepted:
        logger.warning("round %d: no accepted clients, global model unchanged", prev.round)
        return GlobalModel(prev.params, prev.round + 1)

    dense = []
    for update in accepted:
        vector = update.densify(prev.params) if isinstance(update, SparseUpdate) else np.asarray(update, dtype=float)
        if vector.shape != prev.params.shape:
            raise StructuralError(f"client model shape {vector.shape} does not match {prev.params.shape}")
        dense.append(vector)

    stacked = np.stack(dense)
    # offsets from the first model keep the mean of identical models exact
    mean = stacked[0] + np.mean(stacked - stacked[0], axis=0)
    params = mean if eta_g == 1 else prev.params + eta_g * (mean - prev.params)
    return GlobalModel(params, prev.round + 1)


def _round_diagnostics(t, updates, grad_norm_sq):
    uploaded = [u for u in updates if not u.failed]
    accepted = [u for u in uploaded if u.accepted]
    dims = sum(u.sparse.dim for u in uploaded)
    return RoundDiagnostics(
        round=t,
        grad_norm_sq=grad_norm_sq,
        dropped_fraction=sum(u.sparse.dropped for u in uploaded) / dims if dims else 0.0,
        max_deviation=max((u.reference_deviation for u in accepted), default=0.0),
        mean_global_distance=float(np.mean([u.sparse.global_distance for u in uploaded])) if uploaded else 0.0,
        failed=tuple(u.client for u in updates if u.failed),
    )


def _with_context(exc, t, client=None):
    where = f"round {t}" if client is None else f"round {t} client {client}"
    return type(exc)(f"{where}: {exc}")


def run_training(
    config: TrainingConfig,
    federation: Federation,
    privacy: PrivacyParams,
    local: LocalConfig,
    progress=False,
):
    """
    Run T synchronous rounds.

    Parameters:
    config (TrainingConfig): Round structure and server settings
    federation (Federation): Client objectives and the evaluation hooks
    privacy (PrivacyParams): Noise schedule, filter radius and accounting
    local (LocalConfig): Client hyperparameters
    progress (bool): Show a tqdm bar on stderr

    Returns:
    TrainingResult: one RoundRecord per round plus ledger and trajectory
    """
    config.validate()
    local.validate()
    privacy.validate()
    if federation.n_clients != config.U:
        raise ConfigurationError(f"training.U={config.U} but the federation has {federation.n_clients} clients")
    if (privacy.T, privacy.K) != (config.T, config.K):
        raise ConfigurationError("privacy.T and privacy.K must match training.T and training.K")
    if config.track_gradient_norm and federation.global_gradient is None:
        raise ConfigurationError("gradient-norm tracking needs a federation with a global gradient")

    adaptive = config.algorithm == "adp_qfl"
    epsilon_per_round = per_round_epsilon(privacy)
    model = GlobalModel(federation.theta0, 0)
    ledger = BudgetLedger()
    records, diagnostics, trajectory = [], [], [model.params]

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        for t in tqdm(range(config.T), desc="rounds", disable=not progress):
            theta = model.params
            sigma_t_sq = round_noise_variance(privacy, t) if adaptive else 0.0
            try:
                traces = None
                if config.sampling == "fim":
                    traces = list(pool.map(lambda obj: fim_trace(obj, theta), federation.objectives))
                selected = sample_clients(config, traces, derive_stream(config.seed, STREAM_SAMPLING, t))
                grad_norm_sq = (
                    l2_norm(federation.global_gradient(theta)) ** 2 if config.track_gradient_norm else float("nan")
                )
            except QflError as exc:
                raise _with_context(exc, t) from exc

            futures = [
                pool.submit(
                    run_client_round,
                    u,
                    federation.objectives[u],
                    theta,
                    local,
                    privacy.b,
                    privacy.lam,
                    sigma_t_sq,
                    config.seed,
                    t,
                    config.algorithm,
                    config.filter_enabled and adaptive,
                )
                for u in selected
            ]
            updates = []
            for u, future in zip(selected, futures):
                try:
                    updates.append(future.result())
                except QflError as exc:
                    raise _with_context(exc, t, u) from exc

            uploaded = [u for u in updates if not u.failed]
            accepted = [u for u in uploaded if u.accepted]
            try:
                model = aggregate([u.sparse for u in accepted], config.eta_g, model)
            except QflError as exc:
                raise _with_context(exc, t) from exc
            if adaptive:
                record_and_total(ledger, t, [(u.client, epsilon_per_round) for u in uploaded])

            loss, accuracy = federation.evaluate(model.params)
            record = RoundRecord(
                round=t,
                sigma_t_sq=sigma_t_sq,
                selected=selected,
                accepted=tuple(u.client for u in accepted),
                global_loss=float(loss),
                test_accuracy=float(accuracy),
                epsilon_glob=ledger.total,
            )
            records.append(record)
            diagnostics.append(_round_diagnostics(t, updates, grad_norm_sq))
            trajectory.append(model.params)
            logger.info(
                "round %d: sigma_t^2=%.4g selected=%d accepted=%d loss=%.6g",
                t, sigma_t_sq, len(selected), len(accepted), loss,
            )

    return TrainingResult(records, diagnostics, ledger, np.stack(trajectory))
