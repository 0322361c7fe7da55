"""Tests for client sampling, aggregation and the round loop."""
import logging
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import chisquare

from client import LocalConfig, QuadraticObjective, sparsify
from data_loader import QuadraticProblem, make_quadratic_federation
from errors import ConfigurationError, StructuralError
from privacy import PrivacyParams
from server import (
    ROUND_COLUMNS,
    Federation,
    GlobalModel,
    TrainingConfig,
    aggregate,
    run_training,
    sample_clients,
)
from utils import write_csv


def privacy_for(config, b=1e-12, sigma0_sq=0.0, alpha=0.0, epsilon=1.0):
    return PrivacyParams(epsilon=epsilon, delta=1e-5, L=1.0, b=b, lam=1.0,
                         sigma0_sq=sigma0_sq, alpha=alpha, T=config.T, K=config.K)


@pytest.fixture
def problem():
    return make_quadratic_federation(6, 3, 0.5, 2.0, 1.0, np.random.default_rng(0))


class TestSampleClients:
    def test_fim_frequency(self):
        config = TrainingConfig(U=2, K=1, T=1, sampling="fim")
        stream = np.random.default_rng(0)
        picks = [sample_clients(config, [1.0, 3.0], stream)[0] for _ in range(100_000)]
        assert np.mean(picks) == pytest.approx(0.75, abs=0.01)

    def test_equal_traces_look_uniform(self):
        config = TrainingConfig(U=4, K=1, T=1, sampling="fim")
        stream = np.random.default_rng(1)
        picks = [sample_clients(config, [2.0] * 4, stream)[0] for _ in range(100_000)]
        _, p_value = chisquare(np.bincount(picks, minlength=4))
        assert p_value > 0.01

    def test_zero_traces_fall_back_to_uniform(self, caplog):
        config = TrainingConfig(U=5, K=3, T=1, sampling="fim")
        with caplog.at_level(logging.WARNING):
            chosen = sample_clients(config, [0.0] * 5, np.random.default_rng(2))
        assert len(set(chosen)) == 3 and all(0 <= u < 5 for u in chosen)
        assert "uniformly" in caplog.text

    def test_uniform_subset(self):
        config = TrainingConfig(U=10, K=4, T=1)
        chosen = sample_clients(config, None, np.random.default_rng(3))
        assert len(set(chosen)) == 4 and list(chosen) == sorted(chosen)

    def test_deterministic(self):
        config = TrainingConfig(U=10, K=4, T=1, sampling="fim")
        traces = np.arange(10.0)
        assert (sample_clients(config, traces, np.random.default_rng(4))
                == sample_clients(config, traces, np.random.default_rng(4)))

    def test_k_above_u(self):
        with pytest.raises(ConfigurationError):
            sample_clients(TrainingConfig(U=2, K=3, T=1), None, np.random.default_rng(0))

    def test_fim_needs_traces(self):
        with pytest.raises(ConfigurationError):
            sample_clients(TrainingConfig(U=2, K=1, T=1, sampling="fim"), None, np.random.default_rng(0))


class TestAggregate:
    def test_mean(self):
        out = aggregate([np.array([1.0, 0.0]), np.array([0.0, 1.0])], 1.0, GlobalModel(np.zeros(2)))
        np.testing.assert_array_equal(out.params, [0.5, 0.5])
        assert out.round == 1

    def test_identical_models(self):
        model = np.array([0.1, 0.7, -0.3])
        out = aggregate([model, model, model], 1.0, GlobalModel(np.zeros(3)))
        np.testing.assert_array_equal(out.params, model)

    def test_frozen_server(self):
        prev = GlobalModel(np.array([2.0, -1.0]))
        out = aggregate([np.array([5.0, 5.0])], 0.0, prev)
        np.testing.assert_array_equal(out.params, prev.params)

    def test_server_rate(self):
        prev = GlobalModel(np.array([0.0, 0.0]))
        out = aggregate([np.array([2.0, 4.0])], 0.5, prev)
        np.testing.assert_allclose(out.params, [1.0, 2.0])

    def test_empty_is_no_op(self, caplog):
        prev = GlobalModel(np.array([1.0, 2.0]), round=3)
        with caplog.at_level(logging.WARNING):
            out = aggregate([], 1.0, prev)
        np.testing.assert_array_equal(out.params, prev.params)
        assert "no accepted clients" in caplog.text

    def test_sparse_updates_inherit_previous_values(self):
        update = sparsify(np.array([3.0, 0.1, 0.1]), np.zeros(3), 0.2, 1.0)
        out = aggregate([update], 1.0, GlobalModel(np.array([1.0, 2.0, 3.0])))
        np.testing.assert_allclose(out.params, [3.0, 2.0, 3.0])

    def test_dimension_mismatch(self):
        with pytest.raises(StructuralError):
            aggregate([np.ones(2), np.ones(3)], 1.0, GlobalModel(np.zeros(2)))


class TestRunTraining:
    def test_record_structure(self, problem):
        config = TrainingConfig(U=6, K=3, T=5, seed=1)
        result = run_training(config, Federation.from_quadratic(problem), privacy_for(config, sigma0_sq=0.01, b=0.5),
                              LocalConfig(eta=0.05, beta=0.05))
        assert len(result.records) == 5
        for record in result.records:
            assert len(record.selected) == 3
            assert set(record.accepted) <= set(record.selected)
        assert result.trajectory.shape == (6, 3)

    def test_bit_identical_reruns(self, problem):
        config = TrainingConfig(U=6, K=3, T=4, seed=7)
        privacy = privacy_for(config, sigma0_sq=0.05, alpha=0.5, b=0.3)
        local = LocalConfig(eta=0.05, beta=0.05, tau=2)
        a = run_training(config, Federation.from_quadratic(problem), privacy, local)
        b = run_training(config, Federation.from_quadratic(problem), privacy, local)
        assert a.rounds_frame().equals(b.rounds_frame())
        np.testing.assert_array_equal(a.trajectory, b.trajectory)

    def test_worker_count_does_not_change_results(self, problem):
        config = TrainingConfig(U=6, K=4, T=4, seed=3, sampling="fim")
        privacy = privacy_for(config, sigma0_sq=0.05, b=0.3)
        local = LocalConfig(eta=0.05, beta=0.05)
        serial = run_training(config, Federation.from_quadratic(problem), privacy, local)
        parallel = run_training(replace(config, workers=4), Federation.from_quadratic(problem), privacy, local)
        assert serial.rounds_frame().equals(parallel.rounds_frame())
        np.testing.assert_array_equal(serial.trajectory, parallel.trajectory)

    def test_scalar_recursion(self):
        a, c, eta, beta, theta0 = 1.5, 2.0, 0.1, 0.2, -1.0
        problem = QuadraticProblem([a], [[c]], mu=a, L_bound=a)
        config = TrainingConfig(U=1, K=1, T=10)
        result = run_training(config, Federation.from_quadratic(problem, theta0=[theta0]),
                              privacy_for(config), LocalConfig(eta=eta, beta=beta))
        rate = 1 - beta * a * (1 - eta * a)
        for t, record in enumerate(result.records):
            gap = (theta0 - c) * rate ** (t + 1)
            assert record.global_loss == pytest.approx(0.5 * a * gap ** 2, abs=1e-8)

    def test_all_rejected_freezes_model(self, problem):
        config = TrainingConfig(U=6, K=3, T=5)
        result = run_training(config, Federation.from_quadratic(problem),
                              privacy_for(config, b=1e-12, sigma0_sq=1.0), LocalConfig(eta=0.05, beta=0.05))
        assert all(record.accepted == () for record in result.records)
        np.testing.assert_array_equal(result.trajectory, np.zeros((6, 3)))

    def test_monotone_loss_on_convex_federation(self):
        problem = make_quadratic_federation(5, 4, 2.0, 2.0, 3.0, np.random.default_rng(5))
        config = TrainingConfig(U=5, K=5, T=30)
        eta = 1 / (6 * 2.0)
        result = run_training(config, Federation.from_quadratic(problem, theta0=np.full(4, 5.0)),
                              privacy_for(config), LocalConfig(eta=eta, beta=eta))
        losses = [r.global_loss for r in result.records]
        assert all(later <= earlier + 1e-12 for earlier, later in zip(losses, losses[1:]))

    def test_compressed_federation_converges(self):
        problem = make_quadratic_federation(8, 4, 1.0, 2.0, 0.5, np.random.default_rng(0))
        theta0 = problem.optimum() + 10.0
        config = TrainingConfig(U=8, K=8, T=50)
        result = run_training(config, Federation.from_quadratic(problem, theta0=theta0),
                              privacy_for(config, b=0.5), LocalConfig(eta=0.1, beta=0.1, tau=4))
        start = np.linalg.norm(theta0 - problem.optimum())
        final = np.linalg.norm(result.trajectory[-1] - problem.optimum())
        assert final < 0.2 * start
        assert np.all(result.trajectory[-1] != theta0)
        frame = result.diagnostics_frame()
        assert frame["dropped_fraction"].max() > 0
        assert (frame["max_deviation"] <= 0.5).all()
        assert all(len(r.accepted) == 8 for r in result.records)

    def test_ledger_charges_uploaders(self, problem):
        config = TrainingConfig(U=6, K=2, T=4)
        privacy = privacy_for(config, epsilon=2.0, b=0.5)
        result = run_training(config, Federation.from_quadratic(problem), privacy, LocalConfig(eta=0.05, beta=0.05))
        assert len(result.ledger) == 8
        assert result.records[-1].epsilon_glob == pytest.approx(8 * 2.0 / 4)

    def test_fedavg_spends_no_budget(self, problem):
        config = TrainingConfig(U=6, K=2, T=3, algorithm="fedavg")
        result = run_training(config, Federation.from_quadratic(problem), privacy_for(config, sigma0_sq=1.0),
                              LocalConfig(eta=0.05, beta=0.05))
        assert result.records[-1].epsilon_glob == 0.0
        assert all(r.sigma_t_sq == 0.0 and len(r.accepted) == 2 for r in result.records)

    def test_gradient_norm_tracking(self, problem):
        config = TrainingConfig(U=6, K=6, T=2, track_gradient_norm=True)
        result = run_training(config, Federation.from_quadratic(problem), privacy_for(config),
                              LocalConfig(eta=0.05, beta=0.05))
        first = result.diagnostics_frame()["grad_norm_sq"].iloc[0]
        assert first == pytest.approx(np.sum(problem.global_gradient(np.zeros(3)) ** 2))

    def test_client_count_mismatch(self, problem):
        config = TrainingConfig(U=5, K=2, T=1)
        with pytest.raises(ConfigurationError):
            run_training(config, Federation.from_quadratic(problem), privacy_for(config),
                         LocalConfig(eta=0.1, beta=0.1))

    def test_privacy_rounds_must_match(self, problem):
        config = TrainingConfig(U=6, K=2, T=3)
        with pytest.raises(ConfigurationError):
            run_training(config, Federation.from_quadratic(problem), replace(privacy_for(config), T=4),
                         LocalConfig(eta=0.1, beta=0.1))

    def test_errors_carry_round_and_client(self, problem):
        class Broken(QuadraticObjective):
            def gradient(self, theta, indices=None):
                raise StructuralError("bad index")

        federation = Federation.from_quadratic(problem)
        federation.objectives = [Broken(1.0, np.zeros(3)) for _ in range(6)]
        config = TrainingConfig(U=6, K=6, T=1)
        with pytest.raises(StructuralError, match=r"round 0 client 0: bad index"):
            run_training(config, federation, privacy_for(config), LocalConfig(eta=0.1, beta=0.1))

    def test_rounds_csv_header(self, problem, tmp_path):
        config = TrainingConfig(U=6, K=2, T=2)
        result = run_training(config, Federation.from_quadratic(problem), privacy_for(config),
                              LocalConfig(eta=0.1, beta=0.1))
        path = write_csv(result.rounds_frame(), tmp_path / "rounds.csv")
        assert path.read_text(encoding="utf-8").splitlines()[0] == ",".join(ROUND_COLUMNS)
