"""
Client-level differential privacy for federated rounds.

Noise calibration follows the Gaussian mechanism bound

    sigma^2 = 8 T (2L + b)^2 ln(1/delta) / (K^2 epsilon^2)

and the adaptive per-round schedule sigma_t^2 = sigma0^2 / (1 + alpha t).
With `enforce_dp` the injected variance never drops below the calibrated
variance spread over T rounds; without it the raw schedule is used.

Every uploading client is charged epsilon / T per round, so a client that
participates in all T rounds spends exactly its configured epsilon.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import pandas as pd

from errors import ConfigurationError, InputError
from utils import write_csv

logger = logging.getLogger(__name__)

LEDGER_COLUMNS = ["round", "client", "epsilon"]


@dataclass(frozen=True)
class PrivacyParams:
    epsilon: float
    delta: float
    L: float
    b: float
    lam: float
    sigma0_sq: float
    alpha: float
    T: int
    K: int
    enforce_dp: bool = False

    def validate(self):
        checks = [
            ("epsilon", self.epsilon, self.epsilon > 0, "must be > 0"),
            ("delta", self.delta, 0 < self.delta < 1, "must lie in (0, 1)"),
            ("L", self.L, self.L >= 0, "must be >= 0"),
            ("b", self.b, self.b > 0, "must be > 0"),
            ("lambda", self.lam, self.lam > 0, "must be > 0"),
            ("sigma0_sq", self.sigma0_sq, self.sigma0_sq >= 0, "must be >= 0"),
            ("alpha", self.alpha, self.alpha >= 0, "must be >= 0"),
            ("T", self.T, self.T >= 1, "must be >= 1"),
            ("K", self.K, self.K >= 1, "must be >= 1"),
        ]
        for name, value, ok, message in checks:
            if not ok:
                raise ConfigurationError(f"privacy.{name} {message}, got {value}")
        return self

    @property
    def deviation_radius(self):
        """b / lambda, the sparsification and acceptance threshold."""
        return self.b / self.lam


def calibrated_sigma_sq(p: PrivacyParams):
    """
    Calibrated Gaussian noise variance for (epsilon, delta) client-level DP.

    Parameters:
    p (PrivacyParams): Validated privacy parameters

    Returns:
    float: 8 T (2L + b)^2 ln(1/delta) / (K^2 epsilon^2)
    """
    p.validate()
    return 8 * p.T * (2 * p.L + p.b) ** 2 * -math.log(p.delta) / (p.K ** 2 * p.epsilon ** 2)


def adaptive_sigma_sq(sigma0_sq, alpha, t):
    if sigma0_sq < 0:
        raise ConfigurationError(f"sigma0_sq must be >= 0, got {sigma0_sq}")
    if alpha < 0:
        raise ConfigurationError(f"alpha must be >= 0, got {alpha}")
    if t < 0:
        raise ConfigurationError(f"round index must be >= 0, got {t}")
    return sigma0_sq / (1 + alpha * t)


def round_noise_variance(p: PrivacyParams, t):
    """Variance actually injected in round t under the configured policy."""
    scheduled = adaptive_sigma_sq(p.sigma0_sq, p.alpha, t)
    if not p.enforce_dp:
        return scheduled
    return max(scheduled, calibrated_sigma_sq(p) / p.T)


def gaussian_noise(dim, sigma_sq, stream):
    if dim < 1:
        raise ConfigurationError(f"noise dimension must be >= 1, got {dim}")
    if sigma_sq < 0:
        raise ConfigurationError(f"noise variance must be >= 0, got {sigma_sq}")
    if sigma_sq == 0:
        return np.zeros(dim)
    return stream.normal(0.0, math.sqrt(sigma_sq), size=dim)


def variance_factor(n_qubits):
    """Predicted gradient-variance factor 3 / (2^(2n) - 1); 1 for a single qubit."""
    if n_qubits < 1:
        raise ConfigurationError(f"n_qubits must be >= 1, got {n_qubits}")
    return float(Fraction(3, 4 ** n_qubits - 1))


def per_round_epsilon(p: PrivacyParams):
    return p.epsilon / p.T


def projected_epsilon_glob(p: PrivacyParams):
    """epsilon_glob if K clients upload in every one of the T rounds."""
    return p.K * p.epsilon


def schedule_frame(p: PrivacyParams):
    """One row per round: scheduled, floor and injected variance."""
    floor = calibrated_sigma_sq(p) / p.T
    rows = []
    for t in range(p.T):
        scheduled = adaptive_sigma_sq(p.sigma0_sq, p.alpha, t)
        rows.append({
            "round": t,
            "sigma_t_sq": scheduled,
            "calibrated_floor": floor,
            "injected": round_noise_variance(p, t),
        })
    return pd.DataFrame(rows, columns=["round", "sigma_t_sq", "calibrated_floor", "injected"])


@dataclass(frozen=True)
class LedgerEntry:
    round: int
    client: int
    epsilon: float


@dataclass
class BudgetLedger:
    """Append-only record of per-client privacy spend; the server is the only writer."""
    entries: list = field(default_factory=list)
    total: float = 0.0

    def record(self, t, client, epsilon):
        if not epsilon >= 0:
            raise InputError(f"round {t} client {client}: epsilon must be >= 0, got {epsilon}")
        self.entries.append(LedgerEntry(int(t), int(client), float(epsilon)))
        self.total += float(epsilon)
        return self.total

    def record_round(self, t, per_client):
        for client, epsilon in per_client:
            self.record(t, client, epsilon)
        return self.total

    def recompute_total(self):
        total = 0.0
        for entry in self.entries:
            total += entry.epsilon
        return total

    def __len__(self):
        return len(self.entries)

    def to_frame(self):
        return pd.DataFrame(
            [(e.round, e.client, e.epsilon) for e in self.entries], columns=LEDGER_COLUMNS
        )

    def to_csv(self, path):
        return write_csv(self.to_frame(), path)


def record_and_total(ledger: BudgetLedger, t, per_client):
    """
    Charge a round's (client, epsilon) pairs to the ledger.

    Returns:
    BudgetLedger: the same ledger; `ledger.total` is the double sum so far
    """
    negative = [(client, eps) for client, eps in per_client if not eps >= 0]
    if negative:
        raise InputError(f"round {t}: negative epsilon for client {negative[0][0]}")
    ledger.record_round(t, per_client)
    logger.debug("round %d charged %d clients, epsilon_glob=%.6g", t, len(per_client), ledger.total)
    return ledger
