"""
Parameterized quantum models on top of the statevector simulator.

A model is an angle-encoding layer (RY(x_i) on qubit i) followed by a
ParamCircuit of trainable and fixed gates and a single readout:
- "local":  prediction = (<Z_readout> + 1) / 2
- "global": prediction = <prod_i (1 + Z_i) / 2>, the |0...0> probability
Both predictions lie in [0, 1] and are trained against MSE.

Gradients use the two-term parameter-shift rule with shift pi/2, applied per
gate occurrence so that tied parameters are still differentiated exactly.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, replace

import numpy as np

from errors import ConfigurationError, InputError, StructuralError
from statevector import (
    Gate,
    GateKind,
    apply_gate,
    apply_to_array,
    check_qubit_count,
    expectation_z_array,
    init_zero,
    run_gates,
    zero_projector_array,
)

logger = logging.getLogger(__name__)

SHIFT = np.pi / 2
OBSERVABLES = ("local", "global")
QCNN_READOUT = 0
DEFAULT_QCNN_PARAMS = 64
GRADIENT_CHUNK = 64
_FEATURE_TOL = 1e-12
_RANDOM_ROTATIONS = (GateKind.RX, GateKind.RY, GateKind.RZ)


@dataclass(frozen=True)
class ParamCircuit:
    n_qubits: int
    gates: tuple

    def __post_init__(self):
        check_qubit_count(self.n_qubits)
        gates = tuple(self.gates)
        for gate in gates:
            for qubit in gate.qubits:
                if qubit >= self.n_qubits:
                    raise StructuralError(
                        f"{gate.kind.value} on qubit {qubit} exceeds {self.n_qubits} qubits"
                    )
        object.__setattr__(self, "gates", gates)

    @property
    def param_count(self):
        indices = [gate.param_index for gate in self.gates if gate.is_trainable]
        return max(indices) + 1 if indices else 0

    @property
    def trainable_positions(self):
        return tuple(i for i, gate in enumerate(self.gates) if gate.is_trainable)

    def __len__(self):
        return len(self.gates)


@dataclass(frozen=True)
class QnnModel:
    circuit: ParamCircuit
    params: np.ndarray
    readout_qubit: int = QCNN_READOUT
    observable: str = "local"

    def __post_init__(self):
        params = np.array(self.params, dtype=float)
        if params.ndim != 1:
            raise StructuralError(f"params must be a vector, got shape {params.shape}")
        if len(params) < self.circuit.param_count:
            raise StructuralError(
                f"circuit reads {self.circuit.param_count} params but only {len(params)} given"
            )
        if not 0 <= self.readout_qubit < self.circuit.n_qubits:
            raise StructuralError(f"readout qubit {self.readout_qubit} out of range")
        if self.observable not in OBSERVABLES:
            raise ConfigurationError(f"observable must be one of {OBSERVABLES}, got {self.observable!r}")
        params.setflags(write=False)
        object.__setattr__(self, "params", params)

    @property
    def n_qubits(self):
        return self.circuit.n_qubits

    def with_params(self, params):
        return replace(self, params=params)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        inputs = np.array(self.inputs, dtype=float)
        labels = np.array(self.labels, dtype=float).reshape(-1)
        if inputs.ndim != 2:
            raise InputError(f"inputs must be a 2-D array, got shape {inputs.shape}")
        if len(inputs) != len(labels):
            raise InputError(f"{len(inputs)} inputs but {len(labels)} labels")
        if not np.all(np.isfinite(labels)):
            raise InputError("labels must be finite")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=int)
        return Batch(self.inputs[indices], self.labels[indices])


def _check_features(features, n_qubits):
    features = np.asarray(features, dtype=float)
    if features.shape[-1] > n_qubits:
        raise InputError(f"{features.shape[-1]} features do not fit {n_qubits} qubits")
    if np.any(features < -_FEATURE_TOL) or np.any(features > np.pi + _FEATURE_TOL):
        raise InputError("features must be scaled to [0, pi]")
    return features


def encode(features, n_qubits):
    """
    Angle-encode a feature vector: RY(features[i]) on qubit i of |0...0>.

    Parameters:
    features (array-like): Values in [0, pi], at most n_qubits of them
    n_qubits (int): Register size

    Returns:
    StateVector: The encoded product state
    """
    features = _check_features(features, n_qubits)
    state = init_zero(n_qubits)
    for qubit, angle in enumerate(features):
        state = apply_gate(state, Gate(GateKind.RY, qubit, angle=float(angle)))
    return state


def encode_batch(inputs, n_qubits):
    """Stacked product states for a (B, d) input matrix, shape (B, 2**n)."""
    inputs = _check_features(np.atleast_2d(inputs), n_qubits)
    n_samples, n_features = inputs.shape
    amps = np.ones((n_samples, 1), dtype=np.complex128)
    # most significant qubit first so the result is little-endian
    for qubit in reversed(range(n_qubits)):
        local = np.zeros((n_samples, 2), dtype=np.complex128)
        if qubit < n_features:
            local[:, 0] = np.cos(inputs[:, qubit] / 2)
            local[:, 1] = np.sin(inputs[:, qubit] / 2)
        else:
            local[:, 0] = 1.0
        amps = (amps[:, :, None] * local[:, None, :]).reshape(n_samples, -1)
    return amps


def _expectation(amps, model):
    if model.observable == "global":
        return zero_projector_array(amps)
    return expectation_z_array(amps, model.n_qubits, model.readout_qubit)


def _to_prediction(expectation, observable):
    if observable == "global":
        return expectation
    return (expectation + 1.0) / 2.0


def _prediction_scale(observable):
    return 1.0 if observable == "global" else 0.5


def forward(model: QnnModel, features):
    state = run_gates(encode(features, model.n_qubits), model.circuit.gates, model.params)
    if model.observable == "global":
        expectation = zero_projector_array(state.amplitudes)
    else:
        expectation = expectation_z_array(state.amplitudes, model.n_qubits, model.readout_qubit)
    return float(_to_prediction(expectation, model.observable))


def predict_batch(model: QnnModel, inputs):
    amps = encode_batch(inputs, model.n_qubits)
    for gate in model.circuit.gates:
        amps = apply_to_array(amps, model.n_qubits, gate, model.params)
    return _to_prediction(_expectation(amps, model), model.observable)


def loss_mse(pred, label):
    return (pred - label) ** 2


def batch_loss(model: QnnModel, batch: Batch):
    if len(batch) == 0:
        raise InputError("cannot evaluate the loss of an empty batch")
    return float(np.mean(loss_mse(predict_batch(model, batch.inputs), batch.labels)))


def _jacobian_chunk(model, inputs):
    n_qubits = model.n_qubits
    gates = model.circuit.gates
    params = model.params

    amps = encode_batch(inputs, n_qubits)
    prefix = []
    for gate in gates:
        prefix.append(amps)
        amps = apply_to_array(amps, n_qubits, gate, params)
    expectation = _expectation(amps, model)

    jac = np.zeros((len(inputs), len(params)))
    for position in model.circuit.trainable_positions:
        shifted = []
        for delta in (SHIFT, -SHIFT):
            out = apply_to_array(prefix[position], n_qubits, gates[position], params, delta)
            for gate in gates[position + 1:]:
                out = apply_to_array(out, n_qubits, gate, params)
            shifted.append(_expectation(out, model))
        jac[:, gates[position].param_index] += (shifted[0] - shifted[1]) / 2
    return expectation, jac


def expectation_jacobian(model: QnnModel, inputs):
    """
    Observable expectations and their parameter-shift Jacobian.

    Returns:
    tuple: (expectations of shape (B,), d<O>/dtheta of shape (B, P))
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    expectations, jacobians = [], []
    for start in range(0, len(inputs), GRADIENT_CHUNK):
        e, j = _jacobian_chunk(model, inputs[start:start + GRADIENT_CHUNK])
        expectations.append(e)
        jacobians.append(j)
    return np.concatenate(expectations), np.concatenate(jacobians)


def per_sample_gradients(model: QnnModel, batch: Batch):
    """Gradient of each sample's MSE loss w.r.t. theta, shape (B, P)."""
    if len(batch) == 0:
        raise InputError("cannot differentiate over an empty batch")
    expectation, jac = expectation_jacobian(model, batch.inputs)
    preds = _to_prediction(expectation, model.observable)
    residual = 2.0 * (preds - batch.labels) * _prediction_scale(model.observable)
    return residual[:, None] * jac


def grad_parameter_shift(model: QnnModel, batch: Batch):
    return per_sample_gradients(model, batch).mean(axis=0)


def init_params(circuit: ParamCircuit, stream, scale=np.pi):
    return stream.uniform(-scale, scale, size=circuit.param_count)


def qcnn_active_qubits(n_qubits, conv_pool_pairs):
    """Active qubits before each conv-pool block and after the last one."""
    if conv_pool_pairs < 1:
        raise ConfigurationError("conv_pool_pairs must be >= 1")
    if n_qubits < 2 or n_qubits & (n_qubits - 1) or n_qubits < 2 ** conv_pool_pairs:
        raise ConfigurationError(
            f"n_qubits={n_qubits} must be a power of two >= 2**conv_pool_pairs "
            f"({2 ** conv_pool_pairs})"
        )
    active = list(range(n_qubits))
    stages = [active]
    for _ in range(conv_pool_pairs):
        active = active[0::2]
        stages.append(active)
    return stages


def qcnn_core_params(n_qubits, conv_pool_pairs):
    """Parameters of the conv/pool core: 4 per conv unit, 2 per pool unit."""
    stages = qcnn_active_qubits(n_qubits, conv_pool_pairs)
    return sum(4 * (len(active) - 1) + 2 * (len(active) - len(kept)) for active, kept in zip(stages, stages[1:]))


def _conv_unit(a, b, counter):
    return [
        Gate(GateKind.RY, a, param_index=next(counter)),
        Gate(GateKind.RY, b, param_index=next(counter)),
        Gate(GateKind.CNOT, b, control=a),
        Gate(GateKind.RY, a, param_index=next(counter)),
        Gate(GateKind.RY, b, param_index=next(counter)),
    ]


def _pool_unit(sink, source, counter):
    # the parked qubit steers the kept one, then the kept one is rotated
    return [
        Gate(GateKind.RY, source, param_index=next(counter)),
        Gate(GateKind.CNOT, sink, control=source),
        Gate(GateKind.RY, sink, param_index=next(counter)),
    ]


def qcnn_ansatz(n_qubits=8, conv_pool_pairs=3, total_params=DEFAULT_QCNN_PARAMS):
    """
    Build the QCNN: conv_pool_pairs blocks of (conv, pool) and a rotation tail.

    Each conv layer applies (RY, RY, CNOT, RY, RY) to every adjacent pair of
    active qubits; each pool layer keeps the even-positioned active qubits.
    The tail of alternating RY/RX rotations on the readout qubit brings the
    parameter count to `total_params` (64 for the 8-qubit, 3-block model).

    Returns:
    ParamCircuit: readout is qubit QCNN_READOUT
    """
    stages = qcnn_active_qubits(n_qubits, conv_pool_pairs)
    counter = itertools.count()
    gates = []
    for active, kept in zip(stages[:-1], stages[1:]):
        for a, b in zip(active, active[1:]):
            gates.extend(_conv_unit(a, b, counter))
        parked = [q for q in active if q not in kept]
        for sink, source in zip(kept, parked):
            gates.extend(_pool_unit(sink, source, counter))

    core = next(counter)
    tail = total_params - core
    if tail < 0:
        raise ConfigurationError(
            f"total_params={total_params} is below the {core} parameters of the conv/pool core"
        )
    readout = stages[-1][0]
    for i in range(tail):
        kind = GateKind.RY if i % 2 == 0 else GateKind.RX
        gates.append(Gate(kind, readout, param_index=core + i))
    logger.debug("qcnn(%d, %d): %d core + %d tail params", n_qubits, conv_pool_pairs, core, tail)
    return ParamCircuit(n_qubits, gates)


def random_layered_circuit(n_qubits, layers, seed):
    """
    Random layered circuit used for barren-plateau measurements.

    Each layer is one uniformly random rotation (RX/RY/RZ, angle in [0, 2pi))
    per qubit followed by a CNOT ladder 0->1->...->n-1. The rotation on qubit 0
    of the last layer is the single trainable parameter (index 0).

    Returns:
    tuple: (ParamCircuit, params) with params holding that gate's drawn angle
    """
    if n_qubits < 2:
        raise ConfigurationError(f"random layered circuits need n_qubits >= 2, got {n_qubits}")
    if layers < 1:
        raise ConfigurationError(f"layers must be >= 1, got {layers}")
    check_qubit_count(n_qubits)

    rng = np.random.default_rng(seed)
    gates = []
    params = []
    for layer in range(layers):
        kinds = rng.integers(0, len(_RANDOM_ROTATIONS), size=n_qubits)
        angles = rng.uniform(0.0, 2 * np.pi, size=n_qubits)
        for qubit in range(n_qubits):
            kind = _RANDOM_ROTATIONS[kinds[qubit]]
            if layer == layers - 1 and qubit == 0:
                gates.append(Gate(kind, qubit, param_index=0))
                params.append(float(angles[qubit]))
            else:
                gates.append(Gate(kind, qubit, angle=float(angles[qubit])))
        for qubit in range(n_qubits - 1):
            gates.append(Gate(GateKind.CNOT, qubit + 1, control=qubit))
    return ParamCircuit(n_qubits, gates), np.array(params)


def observable_gradient(model: QnnModel):
    """d<O>/dtheta evaluated on the unencoded |0...0> input."""
    _, jac = expectation_jacobian(model, np.zeros((1, 0)))
    return jac[0]
