"""Initial parameters and twirl gates, plus the gradient-variance scan that
checks the depth scaling of the enhanced Gaussian scheme."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .ansatz import CircuitSpec, hea_t1
from .errors import ConfigError, ValidationError
from .hamiltonian import Hamiltonian, PauliString
from .simulator import Gate, expectation_batch, rotation_matrix, run_circuit_batch

SCHEMES = ("ENHANCED_GAUSS", "PLAIN_GAUSS", "ZERO", "UNIFORM")


def _twirl_set() -> tuple[np.ndarray, ...]:
    q = np.pi / 4
    r = rotation_matrix
    return (
        r("RZ", q),
        r("RZ", -q),
        r("RY", q) @ r("RX", q),
        r("RY", q) @ r("RX", -q),
        r("RX", q) @ r("RY", q),
        r("RX", q) @ r("RY", -q),
    )


TWIRL_SET = _twirl_set()


@dataclass(frozen=True)
class InitSpec:
    scheme: str = "ENHANCED_GAUSS"
    sigma2: float | None = None
    c_coeff: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown init scheme {self.scheme!r}")
        if self.scheme == "PLAIN_GAUSS" and (self.sigma2 is None or self.sigma2 <= 0):
            raise ConfigError("PLAIN_GAUSS needs a positive sigma2")
        if self.scheme == "ENHANCED_GAUSS" and self.c_coeff <= 0:
            raise ConfigError("ENHANCED_GAUSS needs c_coeff > 0")

    def variance(self, layers: int) -> float | None:
        if self.scheme == "ENHANCED_GAUSS":
            return self.c_coeff / layers
        if self.scheme == "PLAIN_GAUSS":
            return self.sigma2
        return None

    def to_dict(self) -> dict:
        return asdict(self)


def twirl_indices(n: int, seed) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, len(TWIRL_SET), size=n)


def sample_twirl(n: int, seed) -> list[Gate]:
    """``n`` single-qubit gates drawn uniformly from the six-element set."""
    return [Gate("FIXED1Q", (q,), matrix=TWIRL_SET[i]) for q, i in enumerate(twirl_indices(n, seed))]


def sample_params(scheme: str, size, layers: int, rng: np.random.Generator,
                  sigma2: float | None = None, c_coeff: float = 1.0) -> np.ndarray:
    if scheme == "ZERO":
        return np.zeros(size)
    if scheme == "UNIFORM":
        return rng.uniform(0.0, 2 * np.pi, size=size)
    if scheme == "ENHANCED_GAUSS":
        var = c_coeff / layers
    elif scheme == "PLAIN_GAUSS":
        if sigma2 is None:
            raise ConfigError("PLAIN_GAUSS needs sigma2")
        var = sigma2
    else:
        raise ConfigError(f"unknown init scheme {scheme!r}")
    return rng.normal(0.0, np.sqrt(var), size=size)


def init_params(spec: CircuitSpec, init: InitSpec) -> np.ndarray:
    rng = np.random.default_rng(init.seed)
    return sample_params(init.scheme, spec.param_count, spec.layers, rng, init.sigma2, init.c_coeff)


def default_observable(n: int) -> Hamiltonian:
    return Hamiltonian(n, (PauliString(((0, "Z"), (1, "Z")), 1.0),))


def scan_coordinate(n: int, layers: int) -> int:
    """Middle layer, slot 0, qubit 0."""
    return (layers // 2) * 2 * n


def gradient_samples(
    n: int,
    layers: int,
    init: InitSpec,
    samples: int,
    observable: Hamiltonian | None = None,
    param: int | None = None,
    chunk: int = 256,
) -> np.ndarray:
    """Parameter-shift derivatives of ``<O>`` at one coordinate of ``hea_t1``,
    with twirl and parameters redrawn for every sample."""
    O = default_observable(n) if observable is None else observable
    if O.is_zero():
        raise ValidationError("observable is the zero operator")
    spec = hea_t1(n, layers)
    j = scan_coordinate(n, layers) if param is None else param
    rng = np.random.default_rng([init.seed, n, layers])
    out = np.empty(samples)
    for start in range(0, samples, chunk):
        m = min(chunk, samples - start)
        tw = np.asarray(TWIRL_SET)[rng.integers(0, len(TWIRL_SET), size=(m, n))]
        th = sample_params(init.scheme, (m, spec.param_count), layers, rng, init.sigma2, init.c_coeff)
        rows = np.repeat(th, 2, axis=0)
        rows[0::2, j] += np.pi / 2
        rows[1::2, j] -= np.pi / 2
        vals = expectation_batch(run_circuit_batch(spec, rows, np.repeat(tw, 2, axis=0)), O)
        out[start:start + m] = 0.5 * (vals[0::2] - vals[1::2])
    return out


@dataclass(frozen=True)
class ScanRow:
    L: int
    variance: float
    ci_low: float
    ci_high: float
    scheme: str
    n: int
    samples: int
    seed: int


def grad_variance_scan(
    n: int,
    L_list: Sequence[int],
    init: InitSpec,
    samples: int,
    observable: Hamiltonian | None = None,
    n_boot: int = 1000,
) -> list[ScanRow]:
    if samples < 100:
        raise ConfigError("grad_variance_scan needs at least 100 samples")
    rows = []
    for L in L_list:
        g = gradient_samples(n, L, init, samples, observable)
        var = float(np.var(g, ddof=1))
        ci = stats.bootstrap(
            (g,), lambda x, axis: np.var(x, axis=axis, ddof=1), n_resamples=n_boot,
            method="percentile", random_state=np.random.default_rng([init.seed, L, 7]),
        ).confidence_interval
        rows.append(ScanRow(L, var, float(ci.low), float(ci.high), init.scheme, n, samples, init.seed))
    return rows


def loglog_slope(rows: Sequence[ScanRow]) -> float:
    x = np.log([r.L for r in rows])
    y = np.log([r.variance for r in rows])
    return float(np.polyfit(x, y, 1)[0])


SCAN_COLUMNS = ("L", "variance", "ci_low", "ci_high", "scheme", "n", "samples", "seed")


def write_scan_csv(rows: Sequence[ScanRow], path: str | Path, header_comment: str | None = None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(SCAN_COLUMNS)
        for r in rows:
            w.writerow([getattr(r, c) for c in SCAN_COLUMNS])
