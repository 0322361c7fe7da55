"""End-to-end tests of the command-line entry point."""
import json
import logging

import pandas as pd
import pytest

from cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from server import ROUND_COLUMNS

QUADRATIC = """
[run]
seed = 1

[training]
U = 4
K = 2
T = 5

[local]
eta = 0.05
beta = 0.05
tau = 2

[privacy]
epsilon = 1.0
delta = 1e-5
L = 1.0
b = 0.5
lambda = 1.0
sigma0_sq = 0.01
alpha = 0.5

[data]
source = quadratic
dim = 3
mu = 0.5
L_bound = 2.0
heterogeneity = 1.0
"""

CALIBRATION_FIXTURE = """
[privacy]
epsilon = 2
delta = 0.36787944117144233
L = 0
b = 1
lambda = 1
sigma0_sq = 1
alpha = 0
T = 4
K = 2
"""

SCAN = """
[scan]
n_values = 2, 3
layers = 2
samples = 100
"""

BOUNDS = """
[bounds]
eta_l = 0.02
tau = 2
T = 10
L = 1.0
sigma_g_sq = 0.5
loss_drop = 1.0
kappa_values = 1, 0.5
"""


@pytest.fixture
def write_config(tmp_path):
    def write(text, name="run.ini"):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return str(path)
    return write


def outputs(directory, prefix):
    return sorted(p for p in directory.iterdir() if p.name.startswith(prefix))


class TestRunFl:
    def test_smoke(self, write_config, tmp_path):
        out = tmp_path / "out"
        assert main(["run-fl", "--config", write_config(QUADRATIC), "--out", str(out)]) == EXIT_OK
        (rounds,) = outputs(out, "rounds_s1_")
        frame = pd.read_csv(rounds)
        assert list(frame.columns) == ROUND_COLUMNS
        assert len(frame) == 5
        assert outputs(out, "ledger_s1_") and outputs(out, "diagnostics_s1_")
        (summary,) = outputs(out, "summary_s1_")
        summary = json.loads(summary.read_text(encoding="utf-8"))
        assert summary["rounds"] == 5
        (participation,) = outputs(out, "participation_s1_")
        table = pd.read_csv(participation)
        assert len(table) == summary["clients_charged"]
        assert table["epsilon"].sum() == pytest.approx(summary["epsilon_glob"])

    def test_reruns_are_byte_identical(self, write_config, tmp_path):
        config = write_config(QUADRATIC)
        for name in ("a", "b"):
            assert main(["run-fl", "--config", config, "--out", str(tmp_path / name), "--workers", "2"]) == EXIT_OK
        first, second = outputs(tmp_path / "a", ""), outputs(tmp_path / "b", "")
        assert [p.name for p in first] == [p.name for p in second]
        for a, b in zip(first, second):
            assert a.read_bytes() == b.read_bytes()

    def test_seed_override_changes_file_names(self, write_config, tmp_path):
        out = tmp_path / "out"
        assert main(["run-fl", "--config", write_config(QUADRATIC), "--out", str(out), "--seed", "8"]) == EXIT_OK
        assert outputs(out, "rounds_s8_")

    def test_k_above_u(self, write_config, tmp_path, caplog):
        config = write_config(QUADRATIC.replace("K = 2", "K = 7"))
        with caplog.at_level(logging.ERROR):
            assert main(["run-fl", "--config", config, "--out", str(tmp_path)]) == EXIT_CONFIG
        assert "training.K" in caplog.text

    def test_bad_model_fails_before_loading_data(self, write_config, tmp_path):
        text = QUADRATIC.split("[data]")[0] + (
            "[data]\nsource = mnist\nimages = absent-images.gz\nlabels = absent-labels.gz\n"
            "[model]\nn_qubits = 8\nconv_pool_pairs = 3\nobservable = parity\n"
        )
        assert main(["run-fl", "--config", write_config(text), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_missing_section(self, write_config, tmp_path):
        config = write_config(QUADRATIC.split("[data]")[0])
        assert main(["run-fl", "--config", config, "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_runtime_failure(self, write_config, tmp_path):
        text = QUADRATIC.replace("source = quadratic", f"source = quadratic\nproblem_file = {tmp_path / 'absent.json'}")
        assert main(["run-fl", "--config", write_config(text), "--out", str(tmp_path)]) == EXIT_RUNTIME

    def test_epsilon_sweep(self, write_config, tmp_path):
        text = QUADRATIC + "\n[sweep]\nepsilons = 0.5, 2\n"
        out = tmp_path / "out"
        assert main(["run-fl", "--config", write_config(text), "--out", str(out), "--sweep", "epsilon"]) == EXIT_OK
        (sweep,) = outputs(out, "sweep_epsilon_")
        assert pd.read_csv(sweep)["epsilon"].tolist() == [0.5, 2.0]


class TestDpAudit:
    def test_prints_calibrated_variance(self, write_config, tmp_path, capsys):
        assert main(["dp-audit", "--config", write_config(CALIBRATION_FIXTURE), "--out", str(tmp_path)]) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        value = next(line for line in lines if line.startswith("calibrated_sigma_sq"))
        # T = 4 scales the single-round fixture value 0.5 by 4
        assert float(value.split("=")[1]) == pytest.approx(2.0, rel=1e-15)

    def test_single_round_fixture(self, write_config, tmp_path, capsys):
        text = CALIBRATION_FIXTURE.replace("T = 4", "T = 1")
        assert main(["dp-audit", "--config", write_config(text), "--out", str(tmp_path)]) == EXIT_OK
        value = next(line for line in capsys.readouterr().out.splitlines() if line.startswith("calibrated_sigma_sq"))
        assert float(value.split("=")[1]) == pytest.approx(0.5, rel=1e-15)

    def test_constant_schedule(self, write_config, tmp_path):
        assert main(["dp-audit", "--config", write_config(CALIBRATION_FIXTURE), "--out", str(tmp_path)]) == EXIT_OK
        (schedule,) = outputs(tmp_path, "dp_schedule_")
        frame = pd.read_csv(schedule)
        assert len(frame) == 4
        assert frame["sigma_t_sq"].nunique() == 1

    def test_missing_privacy_section(self, write_config, tmp_path):
        assert main(["dp-audit", "--config", write_config(SCAN), "--out", str(tmp_path)]) == EXIT_CONFIG


class TestBarrenPlateau:
    def test_rows(self, write_config, tmp_path):
        assert main(["barren-plateau", "--config", write_config(SCAN), "--out", str(tmp_path)]) == EXIT_OK
        (table,) = outputs(tmp_path, "barren_plateau_")
        assert len(pd.read_csv(table)) == 2

    def test_too_few_samples(self, write_config, tmp_path):
        config = write_config(SCAN.replace("samples = 100", "samples = 50"))
        assert main(["barren-plateau", "--config", config, "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_fixed_seed_identical_csv(self, write_config, tmp_path):
        config = write_config(SCAN)
        for name in ("a", "b"):
            assert main(["barren-plateau", "--config", config, "--out", str(tmp_path / name)]) == EXIT_OK
        (a,), (b,) = outputs(tmp_path / "a", "barren_plateau_"), outputs(tmp_path / "b", "barren_plateau_")
        assert a.read_bytes() == b.read_bytes()


class TestBounds:
    def test_zeroed_fixture(self, write_config, tmp_path):
        text = "[bounds]\neta_l = 0.02\ntau = 2\nT = 10\nL = 1.0\n"
        assert main(["bounds", "--config", write_config(text), "--out", str(tmp_path)]) == EXIT_OK
        (table,) = outputs(tmp_path, "bounds_")
        assert (pd.read_csv(table)["value"] == 0).all()

    def test_kappa_sweep(self, write_config, tmp_path):
        assert main(["bounds", "--config", write_config(BOUNDS), "--out", str(tmp_path), "--kappa-sweep"]) == EXIT_OK
        (sweep,) = outputs(tmp_path, "kappa_sweep_")
        frame = pd.read_csv(sweep)
        assert frame["total"].iloc[1] == pytest.approx(2 * frame["total"].iloc[0])

    def test_zero_kappa(self, write_config, tmp_path):
        config = write_config(BOUNDS + "kappa = 0\n")
        assert main(["bounds", "--config", config, "--out", str(tmp_path)]) == EXIT_CONFIG


class TestVarianceCheck:
    def test_table(self, write_config, tmp_path):
        text = ("[variance_check]\nn_values = 2, 3\nn_models = 1\nn_samples = 8\n"
                "batch_size = 2\ntrials = 100\nlayers = 2\n")
        assert main(["variance-check", "--config", write_config(text), "--out", str(tmp_path)]) == EXIT_OK
        (table,) = outputs(tmp_path, "variance_check_")
        assert pd.read_csv(table)["n_qubits"].tolist() == [2, 3]


class TestUsage:
    def test_help(self, capsys):
        assert main(["--help"]) == EXIT_OK
        assert "run-fl" in capsys.readouterr().out

    def test_unknown_command(self):
        assert main(["train"]) == EXIT_CONFIG

    def test_missing_config_flag(self):
        assert main(["dp-audit"]) == EXIT_CONFIG

    def test_bad_workers(self, write_config, tmp_path):
        assert main(["dp-audit", "--config", write_config(CALIBRATION_FIXTURE), "--workers", "0"]) == EXIT_CONFIG
