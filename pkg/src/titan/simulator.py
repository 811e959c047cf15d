"""Dense statevector simulation.

All kernels operate on a ``(batch, 2^N)`` complex array so that the many
shifted circuits of one parameter-shift gradient run as a single pass. The
single-state API (``zero_state``, ``apply_gate``, ``run_circuit``) wraps
these with batch size one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np
from numba import njit

from .errors import ArityError, SizeError, ValidationError
from .hamiltonian import Hamiltonian, expectation_values

if TYPE_CHECKING:
    from .ansatz import CircuitSpec

MAX_QUBITS = 24
ROTATIONS = ("RX", "RY", "RZ")
GATE_KINDS = ROTATIONS + ("CNOT", "CZ", "FIXED1Q")


@dataclass(frozen=True, eq=False)
class Gate:
    """One circuit slot.

    A rotation with ``param`` set is tunable; its angle comes from the
    parameter vector. A rotation with ``angle`` set is a fixed gate.
    ``CNOT`` targets are ``(control, target)``.
    """

    kind: str
    targets: tuple[int, ...]
    angle: float | None = None
    matrix: np.ndarray | None = field(default=None, repr=False)
    param: int | None = None

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise ValidationError(f"unknown gate kind {self.kind!r}")
        object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))
        n_t = 2 if self.kind in ("CNOT", "CZ") else 1
        if len(self.targets) != n_t:
            raise ValidationError(f"{self.kind} takes {n_t} target(s), got {self.targets}")
        if n_t == 2 and self.targets[0] == self.targets[1]:
            raise ValidationError(f"{self.kind} targets must be distinct")
        if self.kind == "FIXED1Q":
            m = np.asarray(self.matrix, dtype=complex)
            if m.shape != (2, 2):
                raise ValidationError("FIXED1Q matrix must be 2x2")
            if not np.allclose(m.conj().T @ m, np.eye(2), atol=1e-12, rtol=0):
                raise ValidationError("FIXED1Q matrix is not unitary")
            object.__setattr__(self, "matrix", m)
        elif self.kind in ROTATIONS:
            if (self.param is None) == (self.angle is None):
                raise ValidationError("a rotation needs exactly one of angle / param")

    @property
    def tunable(self) -> bool:
        return self.param is not None


@dataclass(eq=False)
class StateVector:
    n_qubits: int
    amplitudes: np.ndarray

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def copy(self) -> "StateVector":
        return StateVector(self.n_qubits, self.amplitudes.copy())


def _check_n(n: int):
    if not 1 <= n <= MAX_QUBITS:
        raise SizeError(f"qubit count must be in [1, {MAX_QUBITS}], got {n}")


def zero_states(n: int, batch: int = 1) -> np.ndarray:
    _check_n(n)
    out = np.zeros((batch, 1 << n), dtype=complex)
    out[:, 0] = 1.0
    return out


def zero_state(n: int) -> StateVector:
    return StateVector(n, zero_states(n)[0])


@njit(cache=True)
def _k_1q(S, q, m00, m01, m10, m11):
    B, dim = S.shape
    step = 1 << q
    for b in range(B):
        for base in range(0, dim, 2 * step):
            for i0 in range(base, base + step):
                i1 = i0 + step
                a0 = S[b, i0]
                a1 = S[b, i1]
                S[b, i0] = m00 * a0 + m01 * a1
                S[b, i1] = m10 * a0 + m11 * a1


@njit(cache=True)
def _k_1q_rows(S, q, M):
    B, dim = S.shape
    step = 1 << q
    for b in range(B):
        m00, m01, m10, m11 = M[b, 0, 0], M[b, 0, 1], M[b, 1, 0], M[b, 1, 1]
        for base in range(0, dim, 2 * step):
            for i0 in range(base, base + step):
                i1 = i0 + step
                a0 = S[b, i0]
                a1 = S[b, i1]
                S[b, i0] = m00 * a0 + m01 * a1
                S[b, i1] = m10 * a0 + m11 * a1


@njit(cache=True)
def _k_cnot(S, control, target):
    B, dim = S.shape
    t = 1 << target
    for b in range(B):
        for i in range(dim):
            if (i >> control) & 1 and not (i >> target) & 1:
                tmp = S[b, i]
                S[b, i] = S[b, i + t]
                S[b, i + t] = tmp


@njit(cache=True)
def _k_cz(S, qa, qb):
    B, dim = S.shape
    for b in range(B):
        for i in range(dim):
            if (i >> qa) & 1 and (i >> qb) & 1:
                S[b, i] = -S[b, i]


def rotation_entries(kind: str, angle) -> tuple:
    """``(m00, m01, m10, m11)`` of ``exp(-i angle P / 2)``; scalars or arrays."""
    half = np.asarray(angle, dtype=float) / 2
    c, s = np.cos(half), np.sin(half)
    if kind == "RY":
        return c + 0j, -s + 0j, s + 0j, c + 0j
    if kind == "RX":
        return c + 0j, -1j * s, -1j * s, c + 0j
    if kind == "RZ":
        ph = np.exp(-1j * half)
        zero = np.zeros_like(ph)
        return ph, zero, zero, np.conj(ph)
    raise ValidationError(f"{kind} is not a rotation")


def rotation_matrix(kind: str, angle: float) -> np.ndarray:
    """``exp(-i angle P / 2)`` for ``P`` in X, Y, Z."""
    m00, m01, m10, m11 = rotation_entries(kind, float(angle))
    return np.array([[m00, m01], [m10, m11]], dtype=complex)


def apply_inplace(S: np.ndarray, gate: Gate, angle=None):
    """Apply ``gate`` to every row of the contiguous block ``S`` in place.

    ``angle`` is a scalar or one angle per row for tunable rotations.
    """
    kind = gate.kind
    if kind in ROTATIONS:
        if gate.tunable:
            if angle is None:
                raise ArityError("tunable gate applied without an angle")
        else:
            angle = gate.angle
        if np.ndim(angle):
            M = np.stack(rotation_entries(kind, angle), axis=-1).reshape(-1, 2, 2)
            _k_1q_rows(S, gate.targets[0], M)
        else:
            _k_1q(S, gate.targets[0], *(complex(m) for m in rotation_entries(kind, angle)))
    elif kind == "FIXED1Q":
        m = gate.matrix
        _k_1q(S, gate.targets[0], m[0, 0], m[0, 1], m[1, 0], m[1, 1])
    elif kind == "CNOT":
        _k_cnot(S, *gate.targets)
    elif kind == "CZ":
        _k_cz(S, *gate.targets)
    else:
        raise ValidationError(f"unknown gate kind {kind!r}")


def apply_1q(states: np.ndarray, n: int, q: int, matrix: np.ndarray) -> np.ndarray:
    """Copying single-qubit application; ``matrix`` is ``(2, 2)`` or ``(batch, 2, 2)``."""
    out = np.array(states, dtype=complex, order="C")
    matrix = np.asarray(matrix, dtype=complex)
    if matrix.ndim == 3:
        _k_1q_rows(out, q, matrix)
    else:
        _k_1q(out, q, matrix[0, 0], matrix[0, 1], matrix[1, 0], matrix[1, 1])
    return out


def apply_gate_batch(states: np.ndarray, n: int, gate: Gate, angles=None) -> np.ndarray:
    """Copying version of ``apply_inplace`` with index validation."""
    for t in gate.targets:
        if not 0 <= t < n:
            raise IndexError(f"gate target {t} outside {n} qubits")
    out = np.array(states, dtype=complex, order="C")
    apply_inplace(out, gate, angles)
    return out


def apply_gate(state: StateVector, g: Gate, angle: float | None = None) -> StateVector:
    out = apply_gate_batch(state.amplitudes[None, :], state.n_qubits, g, angle)
    return StateVector(state.n_qubits, out[0])


def run_circuit_batch(
    spec: "CircuitSpec",
    thetas: np.ndarray,
    twirl_batch: np.ndarray | None = None,
) -> np.ndarray:
    """Execute ``spec`` once per row of ``thetas`` (shape ``(batch, P)``).

    ``twirl_batch`` of shape ``(batch, N, 2, 2)`` replaces the spec's twirl
    matrices row by row (used when every sample draws its own twirl).
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if thetas.shape[1] != spec.param_count:
        raise ArityError(f"expected {spec.param_count} parameters, got {thetas.shape[1]}")
    n = spec.n_qubits
    states = zero_states(n, thetas.shape[0])
    shared = thetas.shape[0] == 1 or bool((thetas == thetas[0]).all())
    twirl_seen = 0
    for g in spec.slots:
        if g.tunable:
            apply_inplace(states, g, thetas[0, g.param] if shared else thetas[:, g.param])
        elif g.kind == "FIXED1Q" and twirl_batch is not None:
            _k_1q_rows(states, g.targets[0], np.ascontiguousarray(twirl_batch[:, g.targets[0]]))
            twirl_seen += 1
        else:
            apply_inplace(states, g)
    if twirl_batch is not None and twirl_seen == 0:
        raise ValidationError("twirl_batch given but the circuit has no twirl slots")
    return states


def run_circuit(spec: "CircuitSpec", theta: Sequence[float]) -> StateVector:
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1 or theta.shape[0] != spec.param_count:
        raise ArityError(f"expected {spec.param_count} parameters, got shape {theta.shape}")
    return StateVector(spec.n_qubits, run_circuit_batch(spec, theta[None, :])[0])


@njit(cache=True)
def _k_expect(S, xs, diags):
    B, dim = S.shape
    out = np.zeros(B, dtype=np.complex128)
    for b in range(B):
        acc = 0j
        for g in range(xs.shape[0]):
            x = xs[g]
            for c in range(dim):
                acc += np.conj(S[b, c]) * diags[g, c] * S[b, c ^ x]
        out[b] = acc
    return out


def expectation_batch(states: np.ndarray, H: Hamiltonian) -> np.ndarray:
    """Row-wise real ``<psi|H|psi>``; the imaginary part must vanish."""
    if states.shape[-1] != H.dim:
        raise SizeError(f"state dimension {states.shape[-1]} != 2^{H.n_qubits}")
    if len(H.terms) == 0:
        return np.zeros(states.shape[0])
    xs, diags = H.flip_table
    vals = _k_expect(np.ascontiguousarray(states), xs, diags)
    if np.max(np.abs(vals.imag), initial=0.0) > 1e-10:
        raise ValidationError("expectation value has a non-negligible imaginary part")
    return vals.real


def expectation(state: StateVector, H: Hamiltonian) -> float:
    """``Re <psi|H|psi>`` through ``apply_hamiltonian``."""
    if state.n_qubits != H.n_qubits:
        raise SizeError(f"state has {state.n_qubits} qubits, Hamiltonian {H.n_qubits}")
    val = expectation_values(H, state.amplitudes[None, :])[0]
    if abs(val.imag) > 1e-10:
        raise ValidationError("expectation value has a non-negligible imaginary part")
    return float(val.real)
