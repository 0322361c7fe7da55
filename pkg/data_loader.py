import gzip
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.model_selection import train_test_split

from errors import ConfigurationError, FormatError, InputError

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
MNIST_CLASSES = 10
PIXEL_MAX = 255
_GZIP_MAGIC = b"\x1f\x8b"
_RANGE_TOL = 1e-12


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        features = np.array(self.features, dtype=float)
        labels = np.array(self.labels, dtype=int).reshape(-1)
        if features.ndim != 2 or len(features) != len(labels):
            raise InputError(
                f"features {features.shape} and labels {labels.shape} do not describe one sample set"
            )
        if np.any(features < -_RANGE_TOL) or np.any(features > np.pi + _RANGE_TOL):
            raise InputError("features must be normalized to [0, pi]")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise InputError(f"labels must lie in [0, {self.n_classes})")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=int)
        return Dataset(self.features[indices], self.labels[indices], self.n_classes)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.n_classes)


def normalize_features(values):
    """
    Map raw pixels to rotation angles in [0, pi].

    Integer input is treated as 0..255 pixel bytes and rescaled; float input
    must already lie in [0, pi] and is returned as is, so the map is idempotent.

    Parameters:
    values (numpy.ndarray): Pixel bytes or already-normalized features

    Returns:
    numpy.ndarray: float features in [0, pi]
    """
    values = np.asarray(values)
    if np.issubdtype(values.dtype, np.integer):
        if values.size and (values.min() < 0 or values.max() > PIXEL_MAX):
            raise InputError(f"pixel values must lie in [0, {PIXEL_MAX}]")
        return values.astype(float) * (np.pi / PIXEL_MAX)
    values = values.astype(float)
    if np.any(values < -_RANGE_TOL) or np.any(values > np.pi + _RANGE_TOL):
        raise InputError("float features must already lie in [0, pi]")
    return np.clip(values, 0.0, np.pi)


def block_average(images, rows=4, cols=2):
    """
    Downsample (N, H, W) images to (N, rows * cols) by averaging equal blocks.
    The default 4x2 grid gives one feature per qubit of the 8-qubit QCNN.
    """
    images = np.asarray(images, dtype=float)
    n, height, width = images.shape
    if height % rows or width % cols:
        raise ConfigurationError(f"{height}x{width} images cannot be split into a {rows}x{cols} grid")
    blocks = images.reshape(n, rows, height // rows, cols, width // cols)
    return blocks.mean(axis=(2, 4)).reshape(n, rows * cols)


def _read_bytes(path):
    raw = Path(path).read_bytes()
    if raw[:2] == _GZIP_MAGIC:
        raw = gzip.decompress(raw)
    return raw


def _read_header(raw, magic, n_dims, what):
    header_size = 4 * (1 + n_dims)
    if len(raw) < header_size:
        raise FormatError(f"{what}: truncated header", offset=len(raw))
    values = struct.unpack(f">{1 + n_dims}I", raw[:header_size])
    if values[0] != magic:
        raise FormatError(f"{what}: bad magic 0x{values[0]:08x}, expected 0x{magic:08x}", offset=0)
    return values[1:], header_size


def _read_payload(raw, offset, size, what):
    end = offset + size
    if len(raw) < end:
        raise FormatError(f"{what}: truncated payload, expected {size} bytes", offset=len(raw))
    if len(raw) > end:
        raise FormatError(f"{what}: {len(raw) - end} trailing bytes", offset=end)
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=offset)


def load_mnist_idx(images_path, labels_path, block=None):
    """
    Read an MNIST image/label pair in IDX format (optionally gzip-compressed).

    Parameters:
    images_path (str or Path): IDX3 file, magic 0x00000803
    labels_path (str or Path): IDX1 file, magic 0x00000801
    block (tuple, optional): (rows, cols) grid for block averaging

    Returns:
    Dataset: features in [0, pi], one row per image
    """
    raw_images = _read_bytes(images_path)
    (n_images, height, width), offset = _read_header(raw_images, IMAGES_MAGIC, 3, "images")
    pixels = _read_payload(raw_images, offset, n_images * height * width, "images")

    raw_labels = _read_bytes(labels_path)
    (n_labels,), label_offset = _read_header(raw_labels, LABELS_MAGIC, 1, "labels")
    if n_labels != n_images:
        raise FormatError(f"labels: {n_labels} labels for {n_images} images", offset=4)
    labels = _read_payload(raw_labels, label_offset, n_labels, "labels")
    bad = np.flatnonzero(labels >= MNIST_CLASSES)
    if bad.size:
        raise FormatError(f"labels: class {labels[bad[0]]} out of range", offset=label_offset + int(bad[0]))

    images = normalize_features(pixels.reshape(n_images, height, width))
    features = block_average(images, *block) if block else images.reshape(n_images, -1)
    logger.info("Loaded %d images (%dx%d) -> %d features", n_images, height, width, features.shape[1])
    return Dataset(features, labels, MNIST_CLASSES)


def binary_task(dataset, digits=(0, 1)):
    """Keep two classes and relabel them 0 and 1."""
    first, second = digits
    if first == second:
        raise ConfigurationError("binary task needs two distinct classes")
    mask = (dataset.labels == first) | (dataset.labels == second)
    if not np.any(dataset.labels[mask] == first) or not np.any(dataset.labels[mask] == second):
        raise InputError(f"dataset lacks samples of class {first} or {second}")
    labels = (dataset.labels[mask] == second).astype(int)
    return Dataset(dataset.features[mask], labels, 2)


def train_test_subsample(dataset, n_train, n_test, seed):
    """Stratified, disjoint train/test subsample of fixed sizes."""
    if n_train + n_test > len(dataset):
        raise ConfigurationError(
            f"n_train + n_test = {n_train + n_test} exceeds the {len(dataset)} available samples"
        )
    indices = np.arange(len(dataset))
    train_idx, test_idx = train_test_split(
        indices,
        train_size=n_train,
        test_size=n_test,
        random_state=seed,
        stratify=dataset.labels,
    )
    return dataset.subset(np.sort(train_idx)), dataset.subset(np.sort(test_idx))


def make_synthetic_binary(n_samples, n_features, stream, spread=0.35):
    """Two Gaussian blobs centered at pi/4 and 3pi/4 per feature, clipped to [0, pi]."""
    if n_samples < 2 or n_features < 1:
        raise ConfigurationError("synthetic task needs >= 2 samples and >= 1 feature")
    labels = stream.permutation(np.arange(n_samples) % 2)
    centers = np.where(labels[:, None] == 1, 3 * np.pi / 4, np.pi / 4)
    features = centers + stream.normal(0.0, spread, size=(n_samples, n_features))
    return Dataset(np.clip(features, 0.0, np.pi), labels, 2)


def partition_label_skew(dataset, n_clients, classes_per_client, stream):
    """
    Label-skew non-IID partition.

    Classes are shuffled, then dealt round-robin: client u holds the classes at
    positions (u * classes_per_client + j) mod C. Each class is split evenly
    (numpy.array_split) among the clients holding it.

    Parameters:
    dataset (Dataset): Samples to distribute
    n_clients (int): U
    classes_per_client (int): Classes held by each client
    stream (numpy.random.Generator): Shuffling source

    Returns:
    list: One Dataset per client, disjoint and covering
    """
    n_classes = dataset.n_classes
    if n_clients < 1:
        raise ConfigurationError(f"n_clients must be >= 1, got {n_clients}")
    if not 1 <= classes_per_client <= n_classes:
        raise ConfigurationError(
            f"classes_per_client must lie in [1, {n_classes}], got {classes_per_client}"
        )
    counts = dataset.class_counts()
    if np.any(counts == 0):
        raise ConfigurationError(f"classes {np.flatnonzero(counts == 0).tolist()} have no samples")
    if n_clients * classes_per_client < n_classes:
        raise ConfigurationError(
            f"{n_clients} clients x {classes_per_client} classes cannot cover {n_classes} classes"
        )

    order = stream.permutation(n_classes)
    holders = {int(c): [] for c in range(n_classes)}
    for client in range(n_clients):
        for j in range(classes_per_client):
            holders[int(order[(client * classes_per_client + j) % n_classes])].append(client)

    shares = [[] for _ in range(n_clients)]
    for label in range(n_classes):
        clients = holders[label]
        indices = stream.permutation(np.flatnonzero(dataset.labels == label))
        if len(indices) < len(clients):
            raise ConfigurationError(
                f"class {label} has {len(indices)} samples for {len(clients)} clients"
            )
        for client, part in zip(clients, np.array_split(indices, len(clients))):
            shares[client].append(part)

    partitions = [dataset.subset(np.sort(np.concatenate(parts))) for parts in shares]
    logger.debug("label-skew partition sizes: %s", [len(p) for p in partitions])
    return partitions


@dataclass(frozen=True)
class QuadraticProblem:
    """Federation of local losses f_u(theta) = a_u / 2 * ||theta - c_u||^2."""
    curvatures: np.ndarray
    optima: np.ndarray
    mu: float
    L_bound: float

    def __post_init__(self):
        curvatures = np.array(self.curvatures, dtype=float).reshape(-1)
        optima = np.array(self.optima, dtype=float)
        if optima.ndim == 1:
            optima = optima[:, None]
        if len(curvatures) != len(optima):
            raise InputError(f"{len(curvatures)} curvatures for {len(optima)} client optima")
        if np.any(curvatures < self.mu) or np.any(curvatures > self.L_bound):
            raise InputError(f"curvatures must lie in [{self.mu}, {self.L_bound}]")
        for array in (curvatures, optima):
            array.setflags(write=False)
        object.__setattr__(self, "curvatures", curvatures)
        object.__setattr__(self, "optima", optima)

    @property
    def n_clients(self):
        return len(self.curvatures)

    @property
    def dim(self):
        return self.optima.shape[1]

    def optimum(self):
        return self.curvatures @ self.optima / self.curvatures.sum()

    def client_losses(self, theta):
        return 0.5 * self.curvatures * np.sum((np.asarray(theta) - self.optima) ** 2, axis=1)

    def global_loss(self, theta):
        return float(np.mean(self.client_losses(theta)))

    def optimal_loss(self):
        return self.global_loss(self.optimum())

    def gradients(self, theta):
        return self.curvatures[:, None] * (np.asarray(theta) - self.optima)

    def global_gradient(self, theta):
        return self.gradients(theta).mean(axis=0)

    def gradient_dissimilarity(self, theta):
        """(1/U) sum_u ||grad f_u(theta) - grad L(theta)||^2."""
        grads = self.gradients(theta)
        return float(np.mean(np.sum((grads - grads.mean(axis=0)) ** 2, axis=1)))

    def sigma_star_sq(self):
        return float(np.mean(np.sum(self.gradients(self.optimum()) ** 2, axis=1)))

    def save(self, path):
        payload = {
            "curvatures": self.curvatures.tolist(),
            "optima": self.optima.tolist(),
            "mu": self.mu,
            "L_bound": self.L_bound,
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(payload["curvatures"], payload["optima"], payload["mu"], payload["L_bound"])
        except (KeyError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: not a quadratic problem file ({exc})") from exc


def make_quadratic_federation(n_clients, dim, mu, L_bound, heterogeneity, stream):
    """
    Random strongly convex federation with a prescribed sigma*^2.

    Client optima are c_u = center + s * z_u; sigma*^2 is quadratic in s, so
    s is solved in closed form to hit `heterogeneity` exactly.
    """
    if not 0 < mu <= L_bound:
        raise ConfigurationError(f"need 0 < mu <= L_bound, got mu={mu}, L_bound={L_bound}")
    if n_clients < 1 or dim < 1:
        raise ConfigurationError("n_clients and dim must be >= 1")
    if heterogeneity < 0:
        raise ConfigurationError(f"heterogeneity must be >= 0, got {heterogeneity}")

    curvatures = stream.uniform(mu, L_bound, size=n_clients)
    center = stream.normal(size=dim)
    offsets = stream.normal(size=(n_clients, dim))
    weighted = curvatures @ offsets / curvatures.sum()
    unit = float(np.mean(curvatures ** 2 * np.sum((weighted - offsets) ** 2, axis=1)))

    if heterogeneity == 0:
        scale = 0.0
    elif unit <= 0:
        raise ConfigurationError(
            f"heterogeneity {heterogeneity} is infeasible for {n_clients} client(s) in {dim} dimension(s)"
        )
    else:
        scale = np.sqrt(heterogeneity / unit)
    return QuadraticProblem(curvatures, center + scale * offsets, mu, L_bound)
