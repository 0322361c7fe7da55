import logging

from analysis import barren_plateau_scan, log_variance_slope, scan_frame
from utils import output_path, write_csv, write_summary

logger = logging.getLogger(__name__)


def barren_plateau_command(config, progress=False):
    """Random-circuit gradient-variance scan over [scan] n_values x layers."""
    config.require("scan")
    scan = config.scan
    rows = barren_plateau_scan(
        scan.n_values, scan.layers, scan.samples, config.seed,
        observable=scan.observable, workers=config.run.workers, progress=progress,
    )
    frame = scan_frame(rows)
    write_csv(frame, output_path(config.run.out_dir, "barren_plateau", config.seed, config.digest))

    slopes = {}
    if len(set(scan.n_values)) > 1:
        slopes = {str(layers): log_variance_slope(rows, layers) for layers in scan.layers}
    write_summary(
        {"config_digest": config.digest, "seed": config.seed, "log2_variance_slope": slopes},
        output_path(config.run.out_dir, "summary", config.seed, config.digest, suffix="json"),
    )

    print(frame.to_string(index=False))
    for layers, slope in slopes.items():
        print(f"layers={layers}: log2 variance slope {slope:.3f} (law predicts -2)")
    return 0
