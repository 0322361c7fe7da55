import pandas as pd

from analysis import kappa_sweep, convex_bound, nonconvex_bound
from utils import output_path, write_csv


def bounds_command(config, kappa_sweep_requested=False):
    """Evaluate both convergence bounds on [bounds]; optionally sweep kappa."""
    config.require("bounds")
    inputs = config.bounds.inputs
    rows = []
    for name, result in (("convex", convex_bound(inputs)), ("nonconvex", nonconvex_bound(inputs))):
        for term, value in zip(result.names, result.terms):
            rows.append({"bound": name, "term": term, "value": value})
        rows.append({"bound": name, "term": "total", "value": result.total})
        for warning in result.warnings:
            print(f"warning: {warning}")
    frame = pd.DataFrame(rows, columns=["bound", "term", "value"])
    write_csv(frame, output_path(config.run.out_dir, "bounds", config.seed, config.digest))
    print(frame.to_string(index=False))

    if kappa_sweep_requested:
        sweep = kappa_sweep(inputs, config.bounds.kappa_values)
        write_csv(sweep, output_path(config.run.out_dir, "kappa_sweep", config.seed, config.digest))
        print(sweep.to_string(index=False))
    return 0
