import logging

import numpy as np

from analysis import participation_sweep, privacy_sweep
from data_loader import (
    QuadraticProblem,
    binary_task,
    load_mnist_idx,
    make_quadratic_federation,
    make_synthetic_binary,
    partition_label_skew,
    train_test_subsample,
)
from errors import ConfigurationError
from privacy import calibrated_sigma_sq
from qnn import QnnModel, init_params, qcnn_ansatz
from server import Federation, run_training
from utils import (
    STREAM_DATA,
    STREAM_INIT,
    STREAM_PARTITION,
    calculate_participation,
    derive_stream,
    format_percentage,
    output_path,
    summarize_rounds,
    write_csv,
    write_summary,
)

logger = logging.getLogger(__name__)


def _qnn_datasets(config):
    data = config.data
    if data.source == "mnist":
        full = load_mnist_idx(data.images, data.labels, block=(data.block_rows, data.block_cols))
        task = binary_task(full, tuple(data.digits))
        return train_test_subsample(task, data.n_train, data.n_test, config.seed)

    task = make_synthetic_binary(data.n_samples, data.n_features, derive_stream(config.seed, STREAM_DATA))
    n_test = max(int(round(data.test_fraction * len(task))), 1)
    return train_test_subsample(task, len(task) - n_test, n_test, config.seed)


def build_federation(config):
    """
    Build the client federation described by [data] (and [model] for QNN tasks).

    Returns:
    Federation: ready for run_training
    """
    config.require("training", "data")
    data, training = config.data, config.training

    if data.source == "quadratic":
        if data.problem_file:
            problem = QuadraticProblem.load(data.problem_file)
        else:
            problem = make_quadratic_federation(
                training.U, data.dim, data.mu, data.L_bound, data.heterogeneity,
                derive_stream(config.seed, STREAM_DATA),
            )
        if problem.n_clients != training.U:
            raise ConfigurationError(f"problem has {problem.n_clients} clients but training.U={training.U}")
        return Federation.from_quadratic(problem)

    config.require("model")
    train, test = _qnn_datasets(config)
    partitions = partition_label_skew(
        train, training.U, data.classes_per_client, derive_stream(config.seed, STREAM_PARTITION)
    )
    shape = config.model
    circuit = qcnn_ansatz(shape.n_qubits, shape.conv_pool_pairs, shape.total_params)
    params = init_params(circuit, derive_stream(config.seed, STREAM_INIT), shape.init_scale)
    model = QnnModel(circuit, params, observable=shape.observable)
    logger.info(
        "QNN federation: %d train / %d test samples, %d params, partitions %s",
        len(train), len(test), circuit.param_count, [len(p) for p in partitions],
    )
    return Federation.from_datasets(model, partitions, test, train)


def _write_sweep(config, name, frame):
    path = output_path(config.run.out_dir, f"sweep_{name}", config.seed, config.digest)
    write_csv(frame, path)
    print(frame.to_string(index=False))
    return 0


def run_fl_command(config, sweep=None, progress=False):
    """
    Execute federated training and write the round, ledger and diagnostics tables.
    """
    config.require("training", "local", "privacy", "data")
    federation = build_federation(config)

    if sweep == "epsilon":
        frame = privacy_sweep(config.training, federation, config.privacy, config.local, config.sweep.epsilons)
        return _write_sweep(config, "epsilon", frame)
    if sweep == "participation":
        frame = participation_sweep(
            config.training, federation, config.privacy, config.local, config.sweep.participation
        )
        return _write_sweep(config, "participation", frame)

    result = run_training(config.training, federation, config.privacy, config.local, progress=progress)

    out_dir, seed, digest = config.run.out_dir, config.seed, config.digest
    rounds = result.rounds_frame()
    write_csv(rounds, output_path(out_dir, "rounds", seed, digest))
    ledger = result.ledger.to_frame()
    participation = calculate_participation(ledger)
    write_csv(ledger, output_path(out_dir, "ledger", seed, digest))
    write_csv(participation, output_path(out_dir, "participation", seed, digest))
    write_csv(result.diagnostics_frame(), output_path(out_dir, "diagnostics", seed, digest))

    summary = summarize_rounds(rounds)
    summary["config_digest"] = digest
    summary["seed"] = seed
    summary["calibrated_sigma_sq"] = calibrated_sigma_sq(config.privacy)
    summary["clients_charged"] = int(len(participation))
    if federation.problem is not None:
        problem = federation.problem
        summary["optimal_loss"] = problem.optimal_loss()
        summary["sigma_star_sq"] = problem.sigma_star_sq()
        summary["final_gap"] = problem.global_loss(result.final_params) - problem.optimal_loss()
        summary["final_distance"] = float(np.linalg.norm(result.final_params - problem.optimum()))
    write_summary(summary, output_path(out_dir, "summary", seed, digest, suffix="json"))

    print(f"rounds: {summary['rounds']}")
    print(f"final global loss: {summary['final_global_loss']:.6g}")
    if summary["final_test_accuracy"] is not None:
        print(f"final test accuracy: {format_percentage(100 * summary['final_test_accuracy'])}")
    print(f"acceptance rate: {format_percentage(100 * summary['mean_acceptance_rate'])}")
    print(f"epsilon_glob: {summary['epsilon_glob']:.6g}")
    return 0
