"""
INI run configuration.

Sections map onto frozen dataclasses; every key is type-checked, unknown
sections and keys are rejected, and each present section is validated before
any work starts. Section names:

  [run] [training] [local] [privacy] [data] [model] [scan]
  [variance_check] [bounds] [sweep]
"""
import configparser
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from analysis import BoundInputs
from client import LocalConfig
from errors import ConfigurationError
from privacy import PrivacyParams
from qnn import OBSERVABLES, qcnn_core_params
from server import TrainingConfig
from statevector import check_qubit_count
from utils import config_digest

logger = logging.getLogger(__name__)

DATA_SOURCES = ("quadratic", "synthetic", "mnist")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    workers: int = 1
    out_dir: str = "results"


@dataclass(frozen=True)
class DataConfig:
    source: str = "quadratic"
    # quadratic federation
    dim: int = 4
    mu: float = 1.0
    L_bound: float = 2.0
    heterogeneity: float = 1.0
    problem_file: str = ""
    # QNN tasks
    n_samples: int = 200
    n_features: int = 4
    test_fraction: float = 0.25
    images: str = ""
    labels: str = ""
    digits: tuple = (0, 1)
    block_rows: int = 4
    block_cols: int = 2
    n_train: int = 500
    n_test: int = 200
    classes_per_client: int = 2

    def validate(self):
        if self.source not in DATA_SOURCES:
            raise ConfigurationError(f"data.source must be one of {DATA_SOURCES}, got {self.source!r}")
        if self.source == "quadratic":
            if self.dim < 1:
                raise ConfigurationError(f"data.dim must be >= 1, got {self.dim}")
            if not 0 < self.mu <= self.L_bound:
                raise ConfigurationError(f"data.mu must satisfy 0 < mu <= L_bound, got {self.mu}")
            if self.heterogeneity < 0:
                raise ConfigurationError(f"data.heterogeneity must be >= 0, got {self.heterogeneity}")
        if self.source == "synthetic" and not 0 < self.test_fraction < 1:
            raise ConfigurationError(f"data.test_fraction must lie in (0, 1), got {self.test_fraction}")
        if self.source == "mnist":
            if not self.images or not self.labels:
                raise ConfigurationError("data.images and data.labels are required for mnist")
            if len(self.digits) != 2:
                raise ConfigurationError(f"data.digits must name two classes, got {self.digits}")
        if self.classes_per_client < 1:
            raise ConfigurationError(f"data.classes_per_client must be >= 1, got {self.classes_per_client}")
        return self

    @property
    def feature_count(self):
        return self.n_features if self.source == "synthetic" else self.block_rows * self.block_cols


@dataclass(frozen=True)
class ModelConfig:
    n_qubits: int = 8
    conv_pool_pairs: int = 3
    total_params: int = 64
    observable: str = "local"
    init_scale: float = math.pi

    def validate(self):
        if self.observable not in OBSERVABLES:
            raise ConfigurationError(f"model.observable must be one of {OBSERVABLES}, got {self.observable!r}")
        try:
            check_qubit_count(self.n_qubits)
            core = qcnn_core_params(self.n_qubits, self.conv_pool_pairs)
        except ConfigurationError as exc:
            raise ConfigurationError(f"model.n_qubits / model.conv_pool_pairs: {exc}") from exc
        if self.total_params < core:
            raise ConfigurationError(
                f"model.total_params={self.total_params} is below the {core} parameters of the conv/pool core"
            )
        if not self.init_scale >= 0:
            raise ConfigurationError(f"model.init_scale must be >= 0, got {self.init_scale}")
        return self

    def check_features(self, n_features):
        if n_features > self.n_qubits:
            raise ConfigurationError(f"{n_features} input features do not fit model.n_qubits={self.n_qubits}")


@dataclass(frozen=True)
class ScanConfig:
    n_values: tuple = (2, 4, 6)
    layers: tuple = (20,)
    samples: int = 200
    observable: str = "global"

    def validate(self):
        if self.samples < 100:
            raise ConfigurationError(f"scan.samples must be >= 100, got {self.samples}")
        if not self.n_values or not self.layers:
            raise ConfigurationError("scan.n_values and scan.layers must not be empty")
        return self


@dataclass(frozen=True)
class VarianceCheckConfig:
    n_values: tuple = (2, 4)
    n_models: int = 20
    n_samples: int = 64
    batch_size: int = 8
    trials: int = 200
    layers: int = 20

    def validate(self):
        if self.trials < 100:
            raise ConfigurationError(f"variance_check.trials must be >= 100, got {self.trials}")
        if not 1 <= self.batch_size <= self.n_samples:
            raise ConfigurationError(
                f"variance_check.batch_size must lie in [1, n_samples={self.n_samples}], got {self.batch_size}"
            )
        return self


@dataclass(frozen=True)
class BoundsConfig:
    inputs: BoundInputs
    kappa_values: tuple = (1.0, 0.5, 0.25, 0.125)


@dataclass(frozen=True)
class SweepConfig:
    epsilons: tuple = (0.5, 1.0, 2.0, 5.0)
    participation: tuple = (1, 2, 5)


@dataclass(frozen=True)
class RunConfig:
    run: RunSettings
    digest: str
    path: str
    training: TrainingConfig = None
    local: LocalConfig = None
    privacy: PrivacyParams = None
    data: DataConfig = None
    model: ModelConfig = None
    scan: ScanConfig = None
    variance_check: VarianceCheckConfig = None
    bounds: BoundsConfig = None
    sweep: SweepConfig = field(default_factory=SweepConfig)

    @property
    def seed(self):
        return self.run.seed

    def require(self, *sections):
        for section in sections:
            if getattr(self, section) is None:
                raise ConfigurationError(f"{self.path}: missing [{section}] section")
        return self

    def with_overrides(self, seed=None, workers=None, out_dir=None):
        run = replace(
            self.run,
            seed=self.run.seed if seed is None else seed,
            workers=self.run.workers if workers is None else workers,
            out_dir=self.run.out_dir if out_dir is None else str(out_dir),
        )
        training = self.training
        if training is not None:
            training = replace(training, seed=run.seed, workers=run.workers).validate()
        return replace(self, run=run, training=training)


def _type_name(f):
    return f.type if isinstance(f.type, str) else f.type.__name__


def _number(text):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        return float(text)


def _convert(raw, kind, where):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            lowered = raw.strip().lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(raw)
        if kind == "tuple":
            return tuple(_number(part) for part in raw.split(",") if part.strip())
        return raw.strip()
    except ValueError as exc:
        raise ConfigurationError(f"{where}: cannot read {raw!r} as {kind}") from exc


def _read_section(parser, section, cls, aliases=None, extra=None):
    """Typed values of one section for dataclass `cls`; unknown keys raise."""
    aliases = aliases or {}
    extra = extra or {}
    known = {aliases.get(f.name, f.name): (f.name, _type_name(f)) for f in fields(cls)}
    known.update(extra)
    values = {}
    for key, raw in parser.items(section):
        if key not in known:
            raise ConfigurationError(f"unknown key [{section}] {key}")
        name, kind = known[key]
        values[name] = _convert(raw, kind, f"[{section}] {key}")
    return values


def _build(cls, values, section):
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f"[{section}] is missing required keys: {exc}") from exc


def parse_config(text, path="<config>", digest=""):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc

    known_sections = {
        "run", "training", "local", "privacy", "data", "model",
        "scan", "variance_check", "bounds", "sweep",
    }
    for section in parser.sections():
        if section not in known_sections:
            raise ConfigurationError(f"{path}: unknown section [{section}]")

    def section(name, cls, **kwargs):
        if not parser.has_section(name):
            return None
        return _build(cls, _read_section(parser, name, cls, **kwargs), name)

    run = section("run", RunSettings) or RunSettings()
    training = section("training", TrainingConfig)
    if training is not None:
        training = replace(training, seed=run.seed, workers=run.workers).validate()

    privacy = None
    if parser.has_section("privacy"):
        values = _read_section(parser, "privacy", PrivacyParams, aliases={"lam": "lambda"})
        if training is not None:
            for key in ("T", "K"):
                if key in values and values[key] != getattr(training, key):
                    raise ConfigurationError(f"[privacy] {key} disagrees with [training] {key}")
            values.setdefault("T", training.T)
            values.setdefault("K", training.K)
        privacy = _build(PrivacyParams, values, "privacy").validate()

    local = section("local", LocalConfig)
    if local is not None:
        local.validate()
    data = section("data", DataConfig)
    if data is not None:
        data.validate()
    scan = section("scan", ScanConfig)
    if scan is not None:
        scan.validate()
    variance_check = section("variance_check", VarianceCheckConfig)
    if variance_check is not None:
        variance_check.validate()
    model = section("model", ModelConfig)
    if model is not None:
        model.validate()
        if data is not None and data.source != "quadratic":
            model.check_features(data.feature_count)

    bounds = None
    if parser.has_section("bounds"):
        values = _read_section(parser, "bounds", BoundInputs, extra={"kappa_values": ("kappa_values", "tuple")})
        kappa_values = values.pop("kappa_values", BoundsConfig.kappa_values)
        inputs = _build(BoundInputs, values, "bounds").validate()
        bounds = BoundsConfig(inputs, kappa_values)

    config = RunConfig(
        run=run,
        digest=digest,
        path=str(path),
        training=training,
        local=local,
        privacy=privacy,
        data=data,
        model=model,
        scan=scan,
        variance_check=variance_check,
        bounds=bounds,
        sweep=section("sweep", SweepConfig) or SweepConfig(),
    )
    logger.debug("Loaded %s (digest %s)", path, digest)
    return config


def load_config(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_config(raw.decode("utf-8"), path, config_digest(raw))
