"""Parameterized circuit layouts with explicit (layer, slot, qubit) coordinates.

Structured families use the canonical id ``l*D*N + d*N + q``; builders emit
tunable gates in exactly that order so that ids are contiguous in circuit
order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import SizeError, ValidationError
from .simulator import Gate

FAMILIES = ("HEA", "HEA_T1", "SU2", "SEL", "UNSTRUCTURED")


@dataclass(frozen=True, eq=False)
class CircuitSpec:
    n_qubits: int
    layers: int
    slots_per_qubit: int
    slots: tuple[Gate, ...]
    coords: tuple[tuple[int, int, int], ...]
    family: str
    twirl: tuple[Gate, ...] | None = None
    # (L, N, D) of the CFCSA grid; differs from (layers, n_qubits, D) only for
    # unstructured circuits, which collapse to a 1 x p row
    grid: tuple[int, int, int] = field(default=(0, 0, 0))

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown family {self.family!r}")
        ids = [g.param for g in self.slots if g.tunable]
        if ids != list(range(len(ids))):
            raise ValidationError("parameter ids must be 0..P-1 in circuit order")
        if len(self.coords) != len(ids):
            raise ValidationError("one coordinate per parameter required")
        if self.grid == (0, 0, 0):
            object.__setattr__(self, "grid", (self.layers, self.n_qubits, self.slots_per_qubit))

    @property
    def param_count(self) -> int:
        return len(self.coords)

    @property
    def grid_shape(self) -> tuple[int, int]:
        """``(L, D*N)`` shape of the CFCSA grid."""
        L, N, D = self.grid
        return L, D * N

    def param_id(self, layer: int, slot: int, qubit: int) -> int:
        L, N, D = self.grid
        return layer * D * N + slot * N + qubit

    def cell(self, pid: int) -> tuple[int, int]:
        """Grid cell ``(l, q*D + d)`` holding parameter ``pid``."""
        l, d, q = self.coords[pid]
        return l, q * self.grid[2] + d

    def with_twirl(self, twirl: Sequence[Gate]) -> "CircuitSpec":
        if self.family != "HEA_T1":
            raise ValidationError("only HEA_T1 circuits carry a twirl")
        return hea_t1(self.n_qubits, self.layers, twirl)

    def to_dict(self) -> dict:
        def gate_dict(g: Gate):
            d = {"kind": g.kind, "targets": list(g.targets)}
            if g.param is not None:
                d["param"] = g.param
            if g.angle is not None:
                d["angle"] = g.angle
            if g.matrix is not None:
                d["matrix"] = _matrix_reals(g.matrix)
            return d

        return {
            "family": self.family,
            "N": self.n_qubits,
            "L": self.layers,
            "D": self.slots_per_qubit,
            "grid": list(self.grid),
            "slots": [gate_dict(g) for g in self.slots],
            "coords": [list(c) for c in self.coords],
            "twirl": None if self.twirl is None else [_matrix_reals(g.matrix) for g in self.twirl],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "CircuitSpec":
        slots = []
        for s in d["slots"]:
            m = None if "matrix" not in s else _matrix_from_reals(s["matrix"])
            slots.append(Gate(s["kind"], tuple(s["targets"]), s.get("angle"), m, s.get("param")))
        twirl = None
        if d.get("twirl") is not None:
            twirl = tuple(
                g for g in slots if g.kind == "FIXED1Q"
            )[: d["N"]]
        return cls(
            d["N"], d["L"], d["D"], tuple(slots),
            tuple(tuple(c) for c in d["coords"]), d["family"], twirl, tuple(d["grid"]),
        )


def _matrix_reals(m: np.ndarray) -> list[float]:
    # row-major, real and imaginary parts interleaved
    return [float(v) for z in np.asarray(m).ravel() for v in (z.real, z.imag)]


def _matrix_from_reals(vals: Sequence[float]) -> np.ndarray:
    v = np.asarray(vals, dtype=float)
    return (v[0::2] + 1j * v[1::2]).reshape(2, 2)


def _check_sizes(n: int, l: int):
    if n < 2 or l < 1:
        raise SizeError(f"need n >= 2 and l >= 1, got n={n}, l={l}")


def _rotation_sublayer(kind, n, layer, d, D, slots, coords):
    for q in range(n):
        slots.append(Gate(kind, (q,), param=layer * D * n + d * n + q))
        coords.append((layer, d, q))


def hea(n: int, l: int) -> CircuitSpec:
    """RX on every qubit followed by a CNOT chain, repeated ``l`` times."""
    _check_sizes(n, l)
    slots, coords = [], []
    for layer in range(l):
        _rotation_sublayer("RX", n, layer, 0, 1, slots, coords)
        slots += [Gate("CNOT", (q, q + 1)) for q in range(n - 1)]
    return CircuitSpec(n, l, 1, tuple(slots), tuple(coords), "HEA")


def hea_t1(n: int, l: int, twirl: Sequence[Gate] | None = None) -> CircuitSpec:
    """RY / CZ-chain ansatz with a fixed single-qubit twirl after the first
    CZ chain (the BP-resilient layout used for dataset generation).

    Per layer: RY sublayer (d=0), CZ chain, twirl on layer 0 only, RY
    sublayer (d=1). ``twirl=None`` means identity twirl gates.
    """
    _check_sizes(n, l)
    if twirl is None:
        twirl = [Gate("FIXED1Q", (q,), matrix=np.eye(2)) for q in range(n)]
    twirl = list(twirl)
    if len(twirl) != n:
        raise ValidationError(f"twirl needs {n} gates, got {len(twirl)}")
    fixed = []
    for q, g in enumerate(twirl):
        if g.kind != "FIXED1Q":
            raise ValidationError("twirl gates must be FIXED1Q")
        fixed.append(g if g.targets == (q,) else Gate("FIXED1Q", (q,), matrix=g.matrix))
    slots, coords = [], []
    for layer in range(l):
        _rotation_sublayer("RY", n, layer, 0, 2, slots, coords)
        slots += [Gate("CZ", (q, q + 1)) for q in range(n - 1)]
        if layer == 0:
            slots += fixed
        _rotation_sublayer("RY", n, layer, 1, 2, slots, coords)
    return CircuitSpec(n, l, 2, tuple(slots), tuple(coords), "HEA_T1", tuple(fixed))


def su2(n: int, l: int) -> CircuitSpec:
    _check_sizes(n, l)
    slots, coords = [], []
    for layer in range(l):
        _rotation_sublayer("RY", n, layer, 0, 2, slots, coords)
        _rotation_sublayer("RZ", n, layer, 1, 2, slots, coords)
        slots += [Gate("CNOT", (q, q + 1)) for q in range(n - 1)]
    return CircuitSpec(n, l, 2, tuple(slots), tuple(coords), "SU2")


def sel(n: int, l: int) -> CircuitSpec:
    """RZ-RY-RZ on each qubit then a stride-1 CNOT ring."""
    _check_sizes(n, l)
    slots, coords = [], []
    for layer in range(l):
        for d, kind in enumerate(("RZ", "RY", "RZ")):
            _rotation_sublayer(kind, n, layer, d, 3, slots, coords)
        slots += [Gate("CNOT", (q, (q + 1) % n)) for q in range(n)]
    return CircuitSpec(n, l, 3, tuple(slots), tuple(coords), "SEL")


def unstructured(gates: Sequence[Gate], n_qubits: int | None = None) -> CircuitSpec:
    """Wrap an arbitrary gate list; tunable gates are renumbered in order and
    mapped onto a ``1 x p`` grid."""
    slots = []
    p = 0
    for g in gates:
        if g.tunable:
            g = Gate(g.kind, g.targets, param=p)
            p += 1
        slots.append(g)
    if p == 0:
        raise ValidationError("an unstructured circuit needs at least one tunable gate")
    if n_qubits is None:
        n_qubits = 1 + max(t for g in slots for t in g.targets)
    coords = tuple((0, 0, i) for i in range(p))
    return CircuitSpec(n_qubits, 1, 1, tuple(slots), coords, "UNSTRUCTURED", grid=(1, p, 1))


BUILDERS = {"HEA": hea, "HEA_T1": hea_t1, "SU2": su2, "SEL": sel}


def build(family: str, n: int, l: int, twirl=None) -> CircuitSpec:
    family = family.upper()
    if family == "HEA_T1":
        return hea_t1(n, l, twirl)
    if family not in BUILDERS:
        raise ValidationError(f"no builder for family {family!r}")
    return BUILDERS[family](n, l)
