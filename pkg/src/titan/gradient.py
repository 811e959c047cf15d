"""Energy and gradient oracles with circuit-evaluation accounting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ansatz import CircuitSpec
from .errors import ArityError, UnsupportedGateError
from .hamiltonian import Hamiltonian
from .simulator import ROTATIONS, apply_inplace, expectation_batch, run_circuit_batch, zero_states

SHIFT = np.pi / 2
# rows x amplitudes processed per simulator pass (~64 MB of complex128)
_MAX_BATCH_ELEMENTS = 1 << 22


@dataclass
class EvalCounter:
    energy_evals: int = 0
    shift_evals: int = 0

    @property
    def total(self) -> int:
        return self.energy_evals + self.shift_evals

    def snapshot(self) -> "EvalCounter":
        return EvalCounter(self.energy_evals, self.shift_evals)


@dataclass
class GradientVector:
    values: np.ndarray
    mask_applied: bool = False


def _check_theta(spec: CircuitSpec, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.param_count,):
        raise ArityError(f"expected {spec.param_count} parameters, got shape {theta.shape}")
    return theta


def energies(spec: CircuitSpec, thetas: np.ndarray, H: Hamiltonian) -> np.ndarray:
    """Uncounted batched energies, chunked to bound memory."""
    thetas = np.atleast_2d(thetas)
    chunk = max(1, _MAX_BATCH_ELEMENTS >> spec.n_qubits)
    out = np.empty(thetas.shape[0])
    for start in range(0, thetas.shape[0], chunk):
        states = run_circuit_batch(spec, thetas[start:start + chunk])
        out[start:start + chunk] = expectation_batch(states, H)
    return out


def energy(spec: CircuitSpec, theta, H: Hamiltonian, counter: EvalCounter | None = None) -> float:
    theta = _check_theta(spec, theta)
    e = float(energies(spec, theta[None, :], H)[0])
    if counter is not None:
        counter.energy_evals += 1
    return e


def _check_generators(spec: CircuitSpec):
    for g in spec.slots:
        if g.tunable and g.kind not in ROTATIONS:
            raise UnsupportedGateError(f"parameter-shift needs Pauli rotations, got {g.kind}")


def _active_ids(P: int, active_mask) -> np.ndarray:
    if active_mask is None:
        return np.arange(P)
    active_mask = np.asarray(active_mask)
    if active_mask.shape != (P,):
        raise ArityError(f"mask length {active_mask.shape} != {P}")
    return np.flatnonzero(active_mask)


def _shift_pass(spec: CircuitSpec, theta: np.ndarray, H: Hamiltonian, active: np.ndarray):
    """Energies of ``theta`` and of ``theta +/- pi/2 e_j`` for every active j.

    Shifted rows are forked off the base row at their own gate, so the
    shared circuit prefix is simulated once. Returns ``(e0, plus, minus)``.
    """
    k = active.size
    n = spec.n_qubits
    if (1 + 2 * k) << n > _MAX_BATCH_ELEMENTS:
        rows = np.repeat(theta[None, :], 1 + 2 * k, axis=0)
        rows[1 + 2 * np.arange(k), active] += SHIFT
        rows[2 + 2 * np.arange(k), active] -= SHIFT
        vals = energies(spec, rows, H)
        return vals[0], vals[1::2], vals[2::2]
    slot_of = np.full(spec.param_count, -1)
    slot_of[active] = np.arange(k)
    S = zero_states(n, 1 + 2 * k)
    live = 1
    for g in spec.slots:
        if not g.tunable:
            apply_inplace(S[:live], g)
            continue
        apply_inplace(S[:live], g, theta[g.param])
        if slot_of[g.param] >= 0:
            S[live:live + 2] = S[0]
            apply_inplace(S[live:live + 1], g, SHIFT)
            apply_inplace(S[live + 1:live + 2], g, -SHIFT)
            live += 2
    vals = expectation_batch(S, H)
    return vals[0], vals[1::2], vals[2::2]


def energy_and_gradient(
    spec: CircuitSpec,
    theta,
    H: Hamiltonian,
    active_mask=None,
    counter: EvalCounter | None = None,
) -> tuple[float, GradientVector]:
    """Energy at ``theta`` plus the parameter-shift gradient over the active
    coordinates, from one batch of ``1 + 2|active|`` circuits.

    Counts one energy evaluation and two shift evaluations per active
    parameter.
    """
    theta = _check_theta(spec, theta)
    _check_generators(spec)
    active = _active_ids(spec.param_count, active_mask)
    e0, plus, minus = _shift_pass(spec, theta, H, active)
    grad = np.zeros(spec.param_count)
    grad[active] = 0.5 * (plus - minus)
    if counter is not None:
        counter.energy_evals += 1
        counter.shift_evals += 2 * active.size
    return float(e0), GradientVector(grad, active_mask is not None)


def parameter_shift_gradient(
    spec: CircuitSpec,
    theta,
    H: Hamiltonian,
    active_mask=None,
    counter: EvalCounter | None = None,
) -> GradientVector:
    """``dE/dtheta_j = (E(theta + pi/2 e_j) - E(theta - pi/2 e_j)) / 2`` on the
    active coordinates, zero elsewhere. Adds ``2|active|`` to ``shift_evals``."""
    theta = _check_theta(spec, theta)
    _check_generators(spec)
    active = _active_ids(spec.param_count, active_mask)
    _, plus, minus = _shift_pass(spec, theta, H, active)
    grad = np.zeros(spec.param_count)
    grad[active] = 0.5 * (plus - minus)
    if counter is not None:
        counter.shift_evals += 2 * active.size
    return GradientVector(grad, active_mask is not None)


def finite_difference_gradient(spec: CircuitSpec, theta, H: Hamiltonian, h: float = 1e-4) -> GradientVector:
    """Central differences; a test oracle, not counted."""
    if h <= 0:
        raise ValueError("step h must be positive")
    theta = _check_theta(spec, theta)
    P = spec.param_count
    rows = np.repeat(theta[None, :], 2 * P, axis=0)
    rows[2 * np.arange(P), np.arange(P)] += h
    rows[1 + 2 * np.arange(P), np.arange(P)] -= h
    vals = energies(spec, rows, H)
    return GradientVector((vals[0::2] - vals[1::2]) / (2 * h))
