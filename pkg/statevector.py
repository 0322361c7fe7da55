"""
Dense statevector simulation of n-qubit circuits.

Conventions:
- Amplitudes are little-endian: qubit 0 is the least significant bit of the
  basis index, i.e. index = sum_q bit_q * 2**q.
- Rotations are R_P(theta) = exp(-i * theta * P / 2) for P in {X, Y, Z}.
- Everything is complex128; there is no single-precision mode.

States are immutable from the caller's point of view. Every operation returns
a new array, so independent circuits can be evaluated concurrently.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Sequence

import numpy as np

from errors import ConfigurationError, StructuralError

logger = logging.getLogger(__name__)

MAX_QUBITS = 16


class GateKind(str, Enum):
    RX = "RX"
    RY = "RY"
    RZ = "RZ"
    CNOT = "CNOT"
    CZ = "CZ"
    H = "H"


ROTATIONS = frozenset({GateKind.RX, GateKind.RY, GateKind.RZ})
CONTROLLED = frozenset({GateKind.CNOT, GateKind.CZ})

_SQRT2_INV = 1 / math.sqrt(2)
# Action on the target wire; for CNOT/CZ only applied where the control is |1>.
_FIXED_MATRICES = {
    GateKind.H: np.array([[1, 1], [1, -1]], dtype=np.complex128) * _SQRT2_INV,
    GateKind.CNOT: np.array([[0, 1], [1, 0]], dtype=np.complex128),
    GateKind.CZ: np.array([[1, 0], [0, -1]], dtype=np.complex128),
}


def rotation_matrix(kind, theta):
    """
    Return the 2x2 matrix exp(-i * theta * P / 2) for a rotation kind.

    Parameters:
    kind (GateKind): One of RX, RY, RZ
    theta (float): Rotation angle in radians

    Returns:
    numpy.ndarray: complex 2x2 unitary
    """
    c, s = math.cos(theta / 2), math.sin(theta / 2)
    if kind == GateKind.RX:
        return np.array([[c, -1j * s], [-1j * s, c]], dtype=np.complex128)
    if kind == GateKind.RY:
        return np.array([[c, -s], [s, c]], dtype=np.complex128)
    if kind == GateKind.RZ:
        return np.array([[complex(c, -s), 0], [0, complex(c, s)]], dtype=np.complex128)
    raise StructuralError(f"{kind} is not a rotation gate")


@dataclass(frozen=True)
class Gate:
    kind: GateKind
    target: int
    control: int | None = None
    angle: float | None = None
    param_index: int | None = None

    def __post_init__(self):
        kind = GateKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if self.target < 0:
            raise StructuralError(f"{kind.value}: negative target qubit {self.target}")

        if kind in CONTROLLED:
            if self.control is None:
                raise StructuralError(f"{kind.value} requires a control qubit")
            if self.control < 0 or self.control == self.target:
                raise StructuralError(
                    f"{kind.value}: invalid control {self.control} for target {self.target}"
                )
        elif self.control is not None:
            raise StructuralError(f"{kind.value} does not take a control qubit")

        if kind in ROTATIONS:
            if (self.angle is None) == (self.param_index is None):
                raise StructuralError(f"{kind.value} needs exactly one of angle or param_index")
            if self.param_index is not None and self.param_index < 0:
                raise StructuralError(f"{kind.value}: negative param_index {self.param_index}")
        elif self.angle is not None or self.param_index is not None:
            raise StructuralError(f"{kind.value} is a fixed gate and takes no angle")

    @property
    def qubits(self):
        return (self.target,) if self.control is None else (self.control, self.target)

    @property
    def is_trainable(self):
        return self.param_index is not None

    def resolve_angle(self, params):
        if self.param_index is None:
            return float(self.angle)
        if self.param_index >= len(params):
            raise StructuralError(
                f"{self.kind.value} reads param {self.param_index} but only {len(params)} given"
            )
        return float(params[self.param_index])

    def matrix(self, params=(), delta=0.0):
        """2x2 action on the target wire; `delta` is added to the rotation angle."""
        if self.kind in ROTATIONS:
            return rotation_matrix(self.kind, self.resolve_angle(params) + delta)
        return _FIXED_MATRICES[self.kind]

    def inverse(self):
        if self.kind not in ROTATIONS:
            return self
        if self.param_index is not None:
            raise StructuralError("inverse of a trainable gate needs a bound angle")
        return Gate(self.kind, self.target, angle=-self.angle)


@dataclass(frozen=True)
class StateVector:
    n_qubits: int
    amplitudes: np.ndarray

    def __post_init__(self):
        check_qubit_count(self.n_qubits)
        amps = np.array(self.amplitudes, dtype=np.complex128)
        if amps.shape != (2 ** self.n_qubits,):
            raise StructuralError(
                f"{self.n_qubits} qubits need {2 ** self.n_qubits} amplitudes, got shape {amps.shape}"
            )
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    def norm_sq(self):
        return float(np.sum(np.abs(self.amplitudes) ** 2))

    def probabilities(self):
        return np.abs(self.amplitudes) ** 2


def check_qubit_count(n_qubits):
    if not isinstance(n_qubits, (int, np.integer)) or not 1 <= n_qubits <= MAX_QUBITS:
        raise ConfigurationError(f"n_qubits must be an integer in [1, {MAX_QUBITS}], got {n_qubits}")


def _check_gate(gate, n_qubits):
    for qubit in gate.qubits:
        if qubit >= n_qubits:
            raise StructuralError(
                f"{gate.kind.value} acts on qubit {qubit} of a {n_qubits}-qubit register"
            )


def _apply_on_axis(psi, matrix, axis):
    psi = np.moveaxis(psi, axis, -1)
    psi = psi @ matrix.T
    return np.moveaxis(psi, -1, axis)


def _apply_tensor(psi, gate, matrix):
    # psi carries any leading batch axes followed by one axis per qubit, MSB first
    target_axis = psi.ndim - 1 - gate.target
    if gate.control is None:
        return _apply_on_axis(psi, matrix, target_axis)

    control_axis = psi.ndim - 1 - gate.control
    out = psi.copy()
    index = [slice(None)] * psi.ndim
    index[control_axis] = 1
    index = tuple(index)
    sub_axis = target_axis - 1 if target_axis > control_axis else target_axis
    out[index] = _apply_on_axis(psi[index], matrix, sub_axis)
    return out


def apply_to_array(amplitudes, n_qubits, gate, params=(), delta=0.0):
    """
    Apply one gate to a raw amplitude array of shape (..., 2**n).

    Parameters:
    amplitudes (numpy.ndarray): One state or a stack of states
    n_qubits (int): Register size
    gate (Gate): Gate to apply
    params (sequence): Parameter vector read by trainable gates
    delta (float): Offset added to the gate's rotation angle

    Returns:
    numpy.ndarray: New amplitudes with the same shape
    """
    _check_gate(gate, n_qubits)
    amps = np.asarray(amplitudes, dtype=np.complex128)
    batch_shape = amps.shape[:-1]
    psi = amps.reshape(batch_shape + (2,) * n_qubits)
    psi = _apply_tensor(psi, gate, gate.matrix(params, delta))
    return psi.reshape(batch_shape + (2 ** n_qubits,))


def evolve(amplitudes, n_qubits, gates: Sequence[Gate], params=(), shift=None):
    """
    Run a gate sequence on one state or a stack of states.

    `shift` is an optional (gate_position, delta) pair that offsets the angle of
    a single gate occurrence; the parameter-shift rule uses it.
    """
    amps = np.array(amplitudes, dtype=np.complex128)
    batch_shape = amps.shape[:-1]
    psi = amps.reshape(batch_shape + (2,) * n_qubits)
    for position, gate in enumerate(gates):
        _check_gate(gate, n_qubits)
        delta = shift[1] if shift is not None and shift[0] == position else 0.0
        psi = _apply_tensor(psi, gate, gate.matrix(params, delta))
    return psi.reshape(batch_shape + (2 ** n_qubits,))


@lru_cache(maxsize=None)
def z_signs(n_qubits, qubit):
    """+1/-1 eigenvalue of Z_qubit for every basis index (read-only)."""
    signs = 1.0 - 2.0 * ((np.arange(2 ** n_qubits) >> qubit) & 1)
    signs.setflags(write=False)
    return signs


def expectation_z_array(amplitudes, n_qubits, qubit):
    if not 0 <= qubit < n_qubits:
        raise StructuralError(f"qubit {qubit} out of range for {n_qubits} qubits")
    probs = np.abs(amplitudes) ** 2
    return np.clip(probs @ z_signs(n_qubits, qubit), -1.0, 1.0)


def zero_projector_array(amplitudes):
    """Probability of |0...0>, i.e. the expectation of prod_i (1 + Z_i) / 2."""
    return np.abs(np.asarray(amplitudes)[..., 0]) ** 2


def init_zero(n_qubits):
    check_qubit_count(n_qubits)
    amps = np.zeros(2 ** n_qubits, dtype=np.complex128)
    amps[0] = 1.0
    return StateVector(n_qubits, amps)


def apply_gate(state: StateVector, gate: Gate, params=()):
    return StateVector(state.n_qubits, apply_to_array(state.amplitudes, state.n_qubits, gate, params))


def run_gates(state: StateVector, gates: Sequence[Gate], params=()):
    return StateVector(state.n_qubits, evolve(state.amplitudes, state.n_qubits, gates, params))


def expectation_z(state: StateVector, qubit):
    return float(expectation_z_array(state.amplitudes, state.n_qubits, qubit))


def expectation_zero_projector(state: StateVector):
    return float(zero_projector_array(state.amplitudes))
