import math

import numpy as np
import pytest
from scipy.linalg import expm

from errors import ConfigurationError, StructuralError
from statevector import (
    Gate,
    GateKind,
    StateVector,
    apply_gate,
    evolve,
    expectation_z,
    expectation_zero_projector,
    init_zero,
    rotation_matrix,
    run_gates,
)

I2 = np.eye(2, dtype=complex)
X = np.array([[0, 1], [1, 0]], dtype=complex)
Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
Z = np.array([[1, 0], [0, -1]], dtype=complex)
H = np.array([[1, 1], [1, -1]], dtype=complex) / math.sqrt(2)
P0 = np.diag([1, 0]).astype(complex)
P1 = np.diag([0, 1]).astype(complex)
PAULI = {GateKind.RX: X, GateKind.RY: Y, GateKind.RZ: Z}


def kron_all(ops):
    out = np.eye(1, dtype=complex)
    for op in ops:
        out = np.kron(out, op)
    return out


def full_matrix(gate, n_qubits, params=()):
    """Explicit 2^n x 2^n operator; kron order is qubit n-1 first (little-endian)."""
    def embed(placements):
        return kron_all([placements.get(q, I2) for q in reversed(range(n_qubits))])

    if gate.kind in PAULI:
        theta = gate.resolve_angle(params)
        return embed({gate.target: expm(-0.5j * theta * PAULI[gate.kind])})
    if gate.kind == GateKind.H:
        return embed({gate.target: H})
    action = X if gate.kind == GateKind.CNOT else Z
    return embed({gate.control: P0}) + embed({gate.control: P1, gate.target: action})


def random_gate(rng, n_qubits):
    kind = GateKind(rng.choice([k.value for k in GateKind]))
    target = int(rng.integers(n_qubits))
    if kind in (GateKind.CNOT, GateKind.CZ):
        control = int(rng.choice([q for q in range(n_qubits) if q != target]))
        return Gate(kind, target, control=control)
    if kind == GateKind.H:
        return Gate(kind, target)
    return Gate(kind, target, angle=float(rng.uniform(-np.pi, np.pi)))


def basis(n_qubits, index):
    amps = np.zeros(2 ** n_qubits, dtype=complex)
    amps[index] = 1
    return StateVector(n_qubits, amps)


class TestInitZero:
    def test_single_qubit(self):
        np.testing.assert_array_equal(init_zero(1).amplitudes, [1, 0])

    def test_two_qubits(self):
        np.testing.assert_array_equal(init_zero(2).amplitudes, [1, 0, 0, 0])

    @pytest.mark.parametrize("n", [0, 17])
    def test_qubit_cap(self, n):
        with pytest.raises(ConfigurationError):
            init_zero(n)

    def test_amplitudes_are_read_only(self):
        with pytest.raises(ValueError):
            init_zero(2).amplitudes[0] = 0


class TestGateValidation:
    def test_cnot_requires_control(self):
        with pytest.raises(StructuralError):
            Gate(GateKind.CNOT, 1)

    def test_control_equal_to_target(self):
        with pytest.raises(StructuralError):
            Gate(GateKind.CZ, 1, control=1)

    def test_rotation_needs_exactly_one_angle_source(self):
        with pytest.raises(StructuralError):
            Gate(GateKind.RY, 0)
        with pytest.raises(StructuralError):
            Gate(GateKind.RY, 0, angle=0.1, param_index=0)

    def test_fixed_gate_rejects_angle(self):
        with pytest.raises(StructuralError):
            Gate(GateKind.H, 0, angle=0.3)

    def test_kind_accepts_string(self):
        assert Gate("RX", 0, angle=0.2).kind is GateKind.RX


class TestApplyGate:
    def test_identity_rotation(self):
        state = apply_gate(init_zero(1), Gate(GateKind.RY, 0, angle=0.0))
        np.testing.assert_allclose(state.amplitudes, [1, 0], atol=1e-15)

    def test_cnot_truth_table(self):
        # qubit 0 (the control) set: little-endian index 1
        state = apply_gate(basis(2, 0b01), Gate(GateKind.CNOT, target=1, control=0))
        np.testing.assert_allclose(state.amplitudes, basis(2, 0b11).amplitudes)

    def test_cnot_leaves_unset_control_alone(self):
        state = apply_gate(basis(2, 0b10), Gate(GateKind.CNOT, target=1, control=0))
        np.testing.assert_allclose(state.amplitudes, basis(2, 0b10).amplitudes)

    def test_ry_half_pi_matches_matrix(self):
        state = apply_gate(init_zero(1), Gate(GateKind.RY, 0, angle=np.pi / 2))
        expected = expm(-0.25j * np.pi * Y) @ np.array([1, 0])
        np.testing.assert_allclose(state.amplitudes, expected, atol=1e-12)
        np.testing.assert_allclose(state.amplitudes, [math.cos(np.pi / 4), math.sin(np.pi / 4)], atol=1e-12)

    def test_out_of_range_target(self):
        with pytest.raises(StructuralError):
            apply_gate(init_zero(2), Gate(GateKind.H, 2))

    def test_missing_parameter(self):
        with pytest.raises(StructuralError):
            apply_gate(init_zero(1), Gate(GateKind.RX, 0, param_index=3), params=[0.1])

    def test_trainable_gate_reads_params(self):
        bound = apply_gate(init_zero(1), Gate(GateKind.RX, 0, angle=0.7))
        free = apply_gate(init_zero(1), Gate(GateKind.RX, 0, param_index=1), params=[0.0, 0.7])
        np.testing.assert_allclose(bound.amplitudes, free.amplitudes)

    @pytest.mark.parametrize("kind", [GateKind.RX, GateKind.RY, GateKind.RZ])
    def test_rotation_matrix_is_exponential(self, kind):
        for theta in np.linspace(-2 * np.pi, 2 * np.pi, 9):
            np.testing.assert_allclose(
                rotation_matrix(kind, theta), expm(-0.5j * theta * PAULI[kind]), atol=1e-14
            )


class TestOracles:
    @pytest.mark.parametrize("n_qubits", [1, 2, 3])
    def test_brute_force_equivalence(self, n_qubits):
        rng = np.random.default_rng(n_qubits)
        for _ in range(40):
            raw = rng.normal(size=2 ** n_qubits) + 1j * rng.normal(size=2 ** n_qubits)
            state = StateVector(n_qubits, raw / np.linalg.norm(raw))
            gate = random_gate(rng, n_qubits) if n_qubits > 1 else Gate(GateKind.RY, 0, angle=rng.uniform())
            expected = full_matrix(gate, n_qubits) @ state.amplitudes
            np.testing.assert_allclose(apply_gate(state, gate).amplitudes, expected, atol=1e-12)

    def test_norm_preserved_on_random_circuits(self):
        rng = np.random.default_rng(0)
        for n_qubits in (2, 5, 10):
            gates = [random_gate(rng, n_qubits) for _ in range(64)]
            state = run_gates(init_zero(n_qubits), gates)
            assert abs(state.norm_sq() - 1) < 1e-9

    def test_inverse_recovers_input(self):
        rng = np.random.default_rng(1)
        n_qubits = 4
        raw = rng.normal(size=16) + 1j * rng.normal(size=16)
        start = StateVector(n_qubits, raw / np.linalg.norm(raw))
        for _ in range(30):
            gate = random_gate(rng, n_qubits)
            back = apply_gate(apply_gate(start, gate), gate.inverse())
            np.testing.assert_allclose(back.amplitudes, start.amplitudes, atol=1e-10)

    def test_batched_evolution_matches_single_states(self):
        rng = np.random.default_rng(2)
        gates = [random_gate(rng, 3) for _ in range(20)]
        raw = rng.normal(size=(5, 8)) + 1j * rng.normal(size=(5, 8))
        stack = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        batched = evolve(stack, 3, gates)
        for row, amps in zip(stack, batched):
            np.testing.assert_allclose(run_gates(StateVector(3, row), gates).amplitudes, amps, atol=1e-13)

    def test_shift_offsets_a_single_occurrence(self):
        gates = [Gate(GateKind.RY, 0, param_index=0), Gate(GateKind.RY, 0, param_index=0)]
        shifted = evolve(init_zero(1).amplitudes, 1, gates, params=[0.2], shift=(1, 0.5))
        direct = evolve(init_zero(1).amplitudes, 1, [Gate(GateKind.RY, 0, angle=0.9)])
        np.testing.assert_allclose(shifted, direct, atol=1e-14)


class TestExpectation:
    def test_zero_state(self):
        assert expectation_z(init_zero(1), 0) == 1.0

    def test_one_state(self):
        assert expectation_z(basis(1, 1), 0) == -1.0

    def test_equal_superposition(self):
        state = apply_gate(init_zero(1), Gate(GateKind.RY, 0, angle=np.pi / 2))
        assert abs(expectation_z(state, 0)) < 1e-10

    def test_little_endian_readout(self):
        state = basis(3, 0b100)
        assert expectation_z(state, 2) == -1.0
        assert expectation_z(state, 0) == 1.0

    def test_bad_qubit(self):
        with pytest.raises(StructuralError):
            expectation_z(init_zero(2), 2)

    def test_zero_projector_matches_product_of_z_terms(self):
        rng = np.random.default_rng(3)
        gates = [random_gate(rng, 3) for _ in range(15)]
        state = run_gates(init_zero(3), gates)
        projector = kron_all([(I2 + Z) / 2] * 3)
        expected = np.real(np.conj(state.amplitudes) @ projector @ state.amplitudes)
        assert expectation_zero_projector(state) == pytest.approx(expected, abs=1e-12)
