"""Pauli-sum Hamiltonians: construction, file ingestion, matrix-free action
and exact ground energies.

Qubit ``q`` is bit ``q`` of a basis index (little-endian) everywhere in the
package. A Pauli string acting on basis state ``|b>`` gives
``i^{nY} (-1)^{popcount(b & yz)} |b ^ x>`` where ``x`` marks X/Y factors and
``yz`` marks Y/Z factors; terms sharing the same flip mask ``x`` are merged
into one diagonal so that ``H v = sum_g d_g * v[idx ^ x_g]``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, ParseError, SizeError, ValidationError

AXES = ("X", "Y", "Z")
DENSE_MAX_QUBITS = 10
EXACT_MAX_QUBITS = 20
# cache per-group diagonals only while they stay below this many complex entries
_GROUP_CACHE_BUDGET = 1 << 24

_PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}


@dataclass(frozen=True)
class PauliString:
    """A real-weighted tensor product of single-qubit Pauli operators."""

    factors: tuple[tuple[int, str], ...]
    coefficient: float

    def __post_init__(self):
        qubits = [q for q, _ in self.factors]
        if len(set(qubits)) != len(qubits):
            raise ValidationError(f"qubit repeated in Pauli string {self.factors}")
        for q, axis in self.factors:
            if axis not in AXES:
                raise ValidationError(f"unknown Pauli axis {axis!r}")
            if q < 0:
                raise ValidationError(f"negative qubit index {q}")
        if not math.isfinite(self.coefficient):
            raise ValidationError("Pauli coefficient must be finite")
        object.__setattr__(self, "factors", tuple(sorted((int(q), a) for q, a in self.factors)))
        object.__setattr__(self, "coefficient", float(self.coefficient))

    @classmethod
    def from_map(cls, factors: Mapping[int, str], coefficient: float) -> "PauliString":
        return cls(tuple(factors.items()), coefficient)

    @property
    def is_identity(self) -> bool:
        return not self.factors

    def masks(self) -> tuple[int, int, int]:
        """Return ``(flip_mask, phase_mask, n_y)``."""
        x = yz = 0
        n_y = 0
        for q, a in self.factors:
            if a in ("X", "Y"):
                x |= 1 << q
            if a in ("Y", "Z"):
                yz |= 1 << q
            n_y += a == "Y"
        return x, yz, n_y

    def label(self) -> str:
        if not self.factors:
            return "I"
        return " ".join(f"{a}{q}" for q, a in self.factors)


@dataclass(frozen=True)
class GroundStateResult:
    energy: float
    residual_norm: float
    method: str
    vector: np.ndarray | None = field(default=None, repr=False, compare=False)


@dataclass(frozen=True, eq=False)
class Hamiltonian:
    """``H = sum_i h_i P_i`` on ``n_qubits`` qubits; duplicate strings are merged."""

    n_qubits: int
    terms: tuple[PauliString, ...] = ()

    def __post_init__(self):
        if self.n_qubits < 1:
            raise SizeError(f"n_qubits must be positive, got {self.n_qubits}")
        merged: dict[tuple, float] = {}
        for t in self.terms:
            for q, _ in t.factors:
                if q >= self.n_qubits:
                    raise ValidationError(
                        f"term {t.label()} touches qubit {q} >= n_qubits={self.n_qubits}"
                    )
            merged[t.factors] = merged.get(t.factors, 0.0) + t.coefficient
        object.__setattr__(
            self, "terms", tuple(PauliString(f, c) for f, c in merged.items())
        )

    @property
    def dim(self) -> int:
        return 1 << self.n_qubits

    @property
    def constant(self) -> float:
        """Sum of identity-term coefficients (a pure energy offset)."""
        return sum(t.coefficient for t in self.terms if t.is_identity)

    def is_zero(self) -> bool:
        return all(t.coefficient == 0.0 for t in self.terms)

    @cached_property
    def _cached_groups(self):
        return self._build_groups()

    def _build_groups(self):
        idx = np.arange(self.dim, dtype=np.int64)
        by_flip: dict[int, np.ndarray] = {}
        for t in self.terms:
            if t.coefficient == 0.0:
                continue
            x, yz, n_y = t.masks()
            parity = np.bitwise_count((idx ^ x) & yz) & 1
            diag = (1j**n_y) * t.coefficient * (1.0 - 2.0 * parity)
            if x in by_flip:
                by_flip[x] = by_flip[x] + diag
            else:
                by_flip[x] = diag.astype(complex)
        groups = []
        for x, diag in sorted(by_flip.items()):
            if not diag.imag.any():
                diag = diag.real.copy()
            perm = None if x == 0 else idx ^ x
            groups.append((perm, diag))
        return groups

    def groups(self):
        """List of ``(permutation or None, diagonal)`` pairs."""
        if self.dim * max(len(self.terms), 1) <= _GROUP_CACHE_BUDGET:
            return self._cached_groups
        return self._build_groups()

    @cached_property
    def flip_table(self) -> tuple[np.ndarray, np.ndarray]:
        """``(flip masks, stacked complex diagonals)`` for compiled kernels."""
        groups = self.groups()
        xs = np.array([0 if p is None else int(p[0]) for p, _ in groups], dtype=np.int64)
        diags = np.zeros((len(groups), self.dim), dtype=complex)
        for i, (_, d) in enumerate(groups):
            diags[i] = d
        return xs, diags

    def to_matrix(self) -> np.ndarray:
        """Dense matrix built from Kronecker products (independent of ``groups``)."""
        if self.n_qubits > DENSE_MAX_QUBITS + 2:
            raise SizeError("refusing to build a dense matrix above 12 qubits")
        mat = np.zeros((self.dim, self.dim), dtype=complex)
        for t in self.terms:
            ops = dict(t.factors)
            term = np.ones((1, 1), dtype=complex)
            # highest qubit is the leftmost Kronecker factor
            for q in reversed(range(self.n_qubits)):
                term = np.kron(term, _PAULI[ops.get(q, "I")])
            mat += t.coefficient * term
        return mat

    def __add__(self, other: "Hamiltonian") -> "Hamiltonian":
        n = max(self.n_qubits, other.n_qubits)
        return Hamiltonian(n, self.terms + other.terms)

    def __len__(self):
        return len(self.terms)


def heisenberg(n: int, a: float, b: float, c: float) -> Hamiltonian:
    """Open-chain XYZ model ``sum_i a XX + b YY + c ZZ`` on neighbours."""
    if n < 2:
        raise SizeError(f"Heisenberg chain needs n >= 2, got {n}")
    terms = []
    for i in range(n - 1):
        for coef, axis in ((a, "X"), (b, "Y"), (c, "Z")):
            if coef != 0:
                terms.append(PauliString(((i, axis), (i + 1, axis)), coef))
    return Hamiltonian(n, tuple(terms))


def tfim(n: int, J: float, h: float) -> Hamiltonian:
    """Open-chain transverse-field Ising model ``J sum ZZ + h sum X``."""
    if n < 2:
        raise SizeError(f"TFIM chain needs n >= 2, got {n}")
    terms = [PauliString(((i, "Z"), (i + 1, "Z")), J) for i in range(n - 1)]
    terms += [PauliString(((i, "X"),), h) for i in range(n)]
    return Hamiltonian(n, tuple(terms))


_FACTOR = re.compile(r"^([XYZ])(\d+)$")


def parse_pauli_text(text: str) -> Hamiltonian:
    n_header = None
    terms = []
    max_q = -1
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if tokens[0] == "qubits":
            if len(tokens) != 2 or not tokens[1].isdigit() or int(tokens[1]) < 1:
                raise ParseError(f"bad header {line!r}", lineno)
            if terms or n_header is not None:
                raise ParseError("qubits header must come first", lineno)
            n_header = int(tokens[1])
            continue
        try:
            coef = float(tokens[0])
        except ValueError:
            raise ParseError(f"bad coefficient {tokens[0]!r}", lineno) from None
        if not math.isfinite(coef):
            raise ParseError("coefficient must be finite", lineno)
        if len(tokens) < 2:
            raise ParseError("term has no factors", lineno)
        factors: dict[int, str] = {}
        for tok in tokens[1:]:
            if tok == "I":
                continue
            m = _FACTOR.match(tok)
            if m is None:
                raise ParseError(f"bad factor {tok!r}", lineno)
            q = int(m.group(2))
            if q in factors:
                raise ParseError(f"qubit {q} repeated in one term", lineno)
            factors[q] = m.group(1)
            max_q = max(max_q, q)
        terms.append(PauliString.from_map(factors, coef))
    n = n_header if n_header is not None else max(max_q + 1, 1)
    if max_q >= n:
        raise ParseError(f"qubit index {max_q} exceeds header qubits {n}")
    return Hamiltonian(n, tuple(terms))


def from_pauli_file(path: str | Path) -> Hamiltonian:
    return parse_pauli_text(Path(path).read_text(encoding="utf-8"))


def format_pauli_text(H: Hamiltonian) -> str:
    lines = [f"qubits {H.n_qubits}"]
    lines += [f"{t.coefficient!r} {t.label()}" for t in H.terms]
    return "\n".join(lines) + "\n"


def apply_hamiltonian(H: Hamiltonian, v: np.ndarray) -> np.ndarray:
    """Return ``H v`` for a vector or a ``(batch, 2^N)`` stack, matrix-free."""
    v = np.asarray(v)
    if v.shape[-1] != H.dim:
        raise SizeError(f"state dimension {v.shape[-1]} != 2^{H.n_qubits}")
    out = np.zeros(v.shape, dtype=complex)
    for perm, diag in H.groups():
        if perm is None:
            out += diag * v
        else:
            out += diag * v[..., perm]
    return out


def expectation_values(H: Hamiltonian, states: np.ndarray) -> np.ndarray:
    """Row-wise ``<v|H|v>`` (complex) for a ``(batch, 2^N)`` array."""
    hv = apply_hamiltonian(H, states)
    return np.einsum("bi,bi->b", states.conj(), hv)


def exact_ground_energy(
    H: Hamiltonian, method: str | None = None, maxiter: int | None = None
) -> GroundStateResult:
    """Smallest eigenvalue of ``H``.

    ``method`` defaults to ``"dense"`` up to 10 qubits and ``"iterative"``
    (matrix-free Lanczos through ``apply_hamiltonian``) up to 20.
    """
    n = H.n_qubits
    if n > EXACT_MAX_QUBITS:
        raise SizeError(f"exact diagonalization limited to {EXACT_MAX_QUBITS} qubits")
    if method is None:
        method = "dense" if n <= DENSE_MAX_QUBITS else "iterative"
    if method == "dense":
        mat = H.to_matrix()
        evals, evecs = np.linalg.eigh(mat)
        vec = evecs[:, 0]
        energy = float(evals[0])
        residual = float(np.linalg.norm(mat @ vec - energy * vec))
    elif method == "iterative":
        dim = H.dim
        if dim < 3:
            raise SizeError("iterative solver needs at least 2 qubits")
        op = spla.LinearOperator(
            (dim, dim), matvec=lambda x: apply_hamiltonian(H, x.ravel()), dtype=complex
        )
        v0 = np.random.default_rng(0).standard_normal(dim).astype(complex)
        try:
            evals, evecs = spla.eigsh(
                op, k=1, which="SA", v0=v0, tol=0, maxiter=maxiter or 20 * dim
            )
        except spla.ArpackNoConvergence as exc:
            raise ConvergenceError(f"Lanczos did not converge: {exc}") from exc
        vec = evecs[:, 0]
        energy = float(evals[0])
        residual = float(np.linalg.norm(apply_hamiltonian(H, vec) - energy * vec))
    else:
        raise ValueError(f"unknown method {method!r}")
    if residual > 1e-8:
        raise ConvergenceError(f"ground-state residual {residual:.2e} exceeds 1e-8")
    return GroundStateResult(energy, residual, method, vec)


def hamiltonian_from_terms(n: int, terms: Iterable[tuple[float, Mapping[int, str]]]) -> Hamiltonian:
    return Hamiltonian(n, tuple(PauliString.from_map(f, c) for c, f in terms))
