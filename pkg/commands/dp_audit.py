from privacy import calibrated_sigma_sq, per_round_epsilon, projected_epsilon_glob, schedule_frame
from utils import output_path, write_csv


def dp_audit_command(config):
    """
    Print the calibrated noise variance, the per-round schedule and the
    projected global budget; the schedule is also written as CSV.
    """
    config.require("privacy")
    params = config.privacy
    schedule = schedule_frame(params)
    write_csv(schedule, output_path(config.run.out_dir, "dp_schedule", config.seed, config.digest))

    print(f"calibrated_sigma_sq = {calibrated_sigma_sq(params)!r}")
    print(f"per_round_epsilon = {per_round_epsilon(params)!r}")
    print(f"projected_epsilon_glob = {projected_epsilon_glob(params)!r}")
    print(f"enforce_dp = {params.enforce_dp}")
    print(schedule.to_string(index=False))
    return 0
