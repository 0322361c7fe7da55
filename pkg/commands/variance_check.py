from analysis import minibatch_variance_scan
from utils import output_path, write_csv


def variance_check_command(config):
    """Mini-batch gradient variance per qubit count next to the predicted ratio."""
    config.require("variance_check")
    check = config.variance_check
    frame = minibatch_variance_scan(
        check.n_values, check.n_models, check.n_samples, check.batch_size,
        check.trials, check.layers, config.seed,
    )
    write_csv(frame, output_path(config.run.out_dir, "variance_check", config.seed, config.digest))
    print(frame.to_string(index=False))
    return 0
