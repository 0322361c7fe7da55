import hashlib
import json
import logging
import math
from pathlib import Path

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

# Stream tags: every random draw is keyed by (seed, tag, ...) so results do
# not depend on worker scheduling.
STREAM_PARTITION = 1
STREAM_INIT = 2
STREAM_SAMPLING = 3
STREAM_CLIENT = 4
STREAM_SCAN = 5
STREAM_DATA = 6
STREAM_TRIALS = 7


def derive_stream(seed, *keys):
    """Independent numpy Generator for (seed, *keys) via SeedSequence entropy."""
    return np.random.default_rng([int(seed), *(int(k) for k in keys)])


def l2_norm(vector):
    return float(np.linalg.norm(vector))


def clip_by_norm(vector, bound):
    """
    Rescale a vector so its L2 norm is at most `bound`.

    Parameters:
    vector (numpy.ndarray): Gradient or update
    bound (float): Clip norm; math.inf disables clipping

    Returns:
    tuple: (clipped copy, norm before clipping)
    """
    vector = np.array(vector, dtype=float)
    norm = l2_norm(vector)
    if math.isinf(bound) or norm <= bound:
        return vector, norm
    return vector * (bound / norm), norm


def config_digest(raw):
    """First 8 hex characters of SHA-256 over the config file bytes."""
    return hashlib.sha256(raw).hexdigest()[:8]


def output_path(out_dir, table, seed, digest, suffix="csv"):
    return Path(out_dir) / f"{table}_s{seed}_{digest}.{suffix}"


def write_csv(frame, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    logger.info("Wrote %d rows to %s", len(frame), path)
    return path


def _jsonable(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def write_summary(summary, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(summary, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8"
    )
    return path


def calculate_participation(ledger_frame):
    """
    Per-client participation and privacy spend.

    Parameters:
    ledger_frame (pandas.DataFrame): Ledger rows (round, client, epsilon)

    Returns:
    pandas.DataFrame: client, rounds, epsilon, share of epsilon_glob in percent
    """
    if ledger_frame.empty:
        return pd.DataFrame(columns=["client", "rounds", "epsilon", "epsilon_share"])
    grouped = ledger_frame.groupby("client").agg(
        rounds=("round", "count"),
        epsilon=("epsilon", "sum"),
    ).reset_index()
    total = grouped["epsilon"].sum()
    grouped["epsilon_share"] = (grouped["epsilon"] / total * 100) if total > 0 else 0.0
    return grouped


def summarize_rounds(round_frame):
    """Headline numbers of a training run for the summary file."""
    if round_frame.empty:
        return {"rounds": 0}
    selected = round_frame["selected"].map(lambda ids: len(ids.split(";")) if ids else 0)
    accepted = round_frame["accepted"].map(lambda ids: len(ids.split(";")) if ids else 0)
    acceptance = (accepted / selected.where(selected > 0)).fillna(0.0)
    last = round_frame.iloc[-1]
    return {
        "rounds": int(len(round_frame)),
        "final_global_loss": float(last["global_loss"]),
        "best_global_loss": float(round_frame["global_loss"].min()),
        "final_test_accuracy": None if pd.isna(last["test_accuracy"]) else float(last["test_accuracy"]),
        "mean_acceptance_rate": float(acceptance.mean()),
        "epsilon_glob": float(last["epsilon_glob"]),
    }


def format_percentage(value):
    return f"{value:.2f}%"
