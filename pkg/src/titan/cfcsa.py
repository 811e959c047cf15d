"""CFCSA input encoding, freeze-intensity labels and dataset generation.

Grids are ``L x (D*N)`` with column ``q*D + d``. The input tensor has three
normalized coordinate planes followed by ``K`` constant descriptor planes.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .ansatz import CircuitSpec, build
from .apfa import ApfaConfig, ApfaTrajectory, apfa_run, freeze_intensity
from .errors import ArityError, ConfigError, DivergenceError, ParseError, ValidationError
from .hamiltonian import Hamiltonian, from_pauli_file, heisenberg, tfim
from .initializer import InitSpec, TWIRL_SET, twirl_indices
from .simulator import Gate

log = logging.getLogger(__name__)

HAMILTONIAN_CLASSES = ("HEISENBERG", "TFIM", "MOLECULE_FILE")
COEFFICIENT_NAMES = {"HEISENBERG": ("a", "b", "c"), "TFIM": ("J", "h")}


def _coord(i: int, size: int) -> float:
    return 0.0 if size == 1 else i / (size - 1)


def encode(spec: CircuitSpec, descriptors: Sequence[float]) -> np.ndarray:
    """``(3 + K, L, D*N)`` input tensor for ``spec``."""
    s = np.asarray(descriptors, dtype=float).ravel()
    if s.size and (np.any(~np.isfinite(s)) or s.min() < 0 or s.max() > 1):
        raise ValidationError("descriptors must lie in [0, 1]")
    L, N, D = spec.grid
    cols = np.arange(D * N)
    q, d = cols // D, cols % D
    x = np.empty((3 + s.size, L, D * N))
    x[0] = np.array([_coord(l, L) for l in range(L)])[:, None]
    x[1] = np.array([_coord(v, D) for v in d])[None, :]
    x[2] = np.array([_coord(v, N) for v in q])[None, :]
    x[3:] = s[:, None, None]
    return x


def normalize_descriptors(raw: Sequence[float], ranges: Sequence[Sequence[float]]) -> np.ndarray:
    raw = np.asarray(raw, dtype=float)
    if len(ranges) != raw.size:
        raise ConfigError(f"{raw.size} descriptors but {len(ranges)} ranges")
    lo = np.array([r[0] for r in ranges], dtype=float)
    hi = np.array([r[1] for r in ranges], dtype=float)
    if np.any(hi <= lo):
        raise ConfigError("every descriptor range needs hi > lo")
    return np.clip((raw - lo) / (hi - lo), 0.0, 1.0)


def label_from_trajectory(traj: ApfaTrajectory, spec: CircuitSpec) -> np.ndarray:
    """Freeze intensity of every parameter placed on its grid cell."""
    if traj.masks.shape[1] != spec.param_count:
        raise ArityError(f"trajectory has {traj.masks.shape[1]} params, circuit has {spec.param_count}")
    return grid_from_values(freeze_intensity(traj), spec)


def grid_from_values(values: np.ndarray, spec: CircuitSpec) -> np.ndarray:
    grid = np.zeros(spec.grid_shape)
    for pid, v in enumerate(values):
        grid[spec.cell(pid)] = v
    return grid


def values_from_grid(grid: np.ndarray, spec: CircuitSpec) -> np.ndarray:
    if grid.shape != spec.grid_shape:
        raise ArityError(f"grid shape {grid.shape} != {spec.grid_shape}")
    return np.array([grid[spec.cell(pid)] for pid in range(spec.param_count)])


@dataclass(frozen=True)
class DatasetManifest:
    family: str = "HEA_T1"
    hamiltonian_class: str = "HEISENBERG"
    L_list: tuple[int, ...] = (5, 6)
    N_list: tuple[int, ...] = (5, 6, 7, 8)
    coefficient_ranges: dict = field(default_factory=lambda: {"a": [-5.0, 5.0], "b": [-5.0, 5.0], "c": [-5.0, 5.0]})
    samples: int = 200
    seed: int = 0
    c_coeff: float = 1.0
    apfa: dict = field(default_factory=dict)
    max_retries: int = 3
    # MOLECULE_FILE only: Pauli-text files and the term-count normalization range
    molecule_files: tuple[str, ...] = ()
    term_count_range: tuple[float, float] = (0.0, 1000.0)

    def __post_init__(self):
        object.__setattr__(self, "L_list", tuple(int(v) for v in self.L_list))
        object.__setattr__(self, "N_list", tuple(int(v) for v in self.N_list))
        object.__setattr__(self, "molecule_files", tuple(self.molecule_files))
        object.__setattr__(self, "term_count_range", tuple(self.term_count_range))
        if self.hamiltonian_class not in HAMILTONIAN_CLASSES:
            raise ConfigError(f"hamiltonian_class: unknown value {self.hamiltonian_class!r}")
        if self.family.upper() not in ("HEA", "HEA_T1", "SU2", "SEL"):
            raise ConfigError(f"family: unsupported value {self.family!r}")
        if not self.L_list or min(self.L_list) < 1:
            raise ConfigError("L_list: need positive layer counts")
        if self.hamiltonian_class != "MOLECULE_FILE" and (not self.N_list or min(self.N_list) < 2):
            raise ConfigError("N_list: need qubit counts >= 2")
        if self.samples < 1:
            raise ConfigError("samples: must be >= 1")
        if self.max_retries < 0:
            raise ConfigError("max_retries: must be >= 0")
        if self.c_coeff <= 0:
            raise ConfigError("c_coeff: must be > 0")
        if self.hamiltonian_class in COEFFICIENT_NAMES:
            names = COEFFICIENT_NAMES[self.hamiltonian_class]
            if set(self.coefficient_ranges) != set(names):
                raise ConfigError(f"coefficient_ranges: need exactly {names}")
            for k, (lo, hi) in self.coefficient_ranges.items():
                if not hi > lo:
                    raise ConfigError(f"coefficient_ranges.{k}: need hi > lo")
        elif not self.molecule_files:
            raise ConfigError("molecule_files: required for MOLECULE_FILE")
        try:
            self.apfa_config
        except ConfigError as exc:
            raise ConfigError(f"apfa: {exc}") from None

    @property
    def apfa_config(self) -> ApfaConfig:
        return ApfaConfig.from_dict(self.apfa)

    @property
    def descriptor_ranges(self) -> list[list[float]]:
        if self.hamiltonian_class == "MOLECULE_FILE":
            return [list(self.term_count_range)]
        return [list(self.coefficient_ranges[k]) for k in COEFFICIENT_NAMES[self.hamiltonian_class]]

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown manifest keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_json_file(cls, path) -> "DatasetManifest":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("L_list", "N_list", "molecule_files", "term_count_range"):
            d[k] = list(d[k])
        return d


@dataclass
class CfcsaSample:
    x: np.ndarray
    label: np.ndarray
    shape_meta: tuple[int, int, int]
    descriptors: np.ndarray
    seed: int
    meta: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "shape": list(self.shape_meta),
            "descriptors": [float(v) for v in self.descriptors],
            "x": [float(v) for v in self.x.ravel()],
            "label": [float(v) for v in self.label.ravel()],
            "seed": int(self.seed),
            "meta": self.meta,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "CfcsaSample":
        L, N, D = rec["shape"]
        desc = np.asarray(rec["descriptors"], dtype=float)
        x = np.asarray(rec["x"], dtype=float)
        label = np.asarray(rec["label"], dtype=float)
        if x.size != (3 + desc.size) * L * D * N or label.size != L * D * N:
            raise ValidationError("record tensor sizes do not match its shape")
        return cls(x.reshape(3 + desc.size, L, D * N), label.reshape(L, D * N),
                   (L, N, D), desc, rec["seed"], rec.get("meta", {}))


def dumps_record(rec: dict) -> str:
    return json.dumps(rec, separators=(",", ":"))


def write_dataset(samples: Sequence[CfcsaSample], path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(dumps_record(s.to_record()) + "\n")


def iter_dataset(path) -> Iterator[CfcsaSample]:
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(str(exc), i) from None
            yield CfcsaSample.from_record(rec)


def read_dataset(path) -> list[CfcsaSample]:
    return list(iter_dataset(path))


def sample_seed(manifest: DatasetManifest, index: int, attempt: int) -> int:
    return int(np.random.SeedSequence([manifest.seed, index, attempt]).generate_state(1)[0])


@dataclass
class Instance:
    spec: CircuitSpec
    H: Hamiltonian
    raw: list[float]
    descriptors: np.ndarray
    twirl: list[int] | None
    init: InitSpec


def instance_from_seed(manifest: DatasetManifest, seed: int) -> Instance:
    """Everything one record depends on, drawn from its seed alone."""
    rng = np.random.default_rng(seed)
    L = int(rng.choice(manifest.L_list))
    cls = manifest.hamiltonian_class
    if cls == "MOLECULE_FILE":
        path = manifest.molecule_files[int(rng.integers(len(manifest.molecule_files)))]
        H = from_pauli_file(path)
        N = H.n_qubits
        raw = [float(len(H.terms))]
    else:
        N = int(rng.choice(manifest.N_list))
        raw = [float(rng.uniform(*manifest.coefficient_ranges[k])) for k in COEFFICIENT_NAMES[cls]]
        H = heisenberg(N, *raw) if cls == "HEISENBERG" else tfim(N, *raw)
    twirl = None
    family = manifest.family.upper()
    if family == "HEA_T1":
        twirl = [int(i) for i in twirl_indices(N, rng.integers(2**32))]
        gates = [Gate("FIXED1Q", (q,), matrix=TWIRL_SET[i]) for q, i in enumerate(twirl)]
        spec = build(family, N, L, gates)
    else:
        spec = build(family, N, L)
    init = InitSpec("ENHANCED_GAUSS", c_coeff=manifest.c_coeff, seed=int(rng.integers(2**32)))
    desc = normalize_descriptors(raw, manifest.descriptor_ranges)
    return Instance(spec, H, raw, desc, twirl, init)


def generate_sample(manifest: DatasetManifest, index: int) -> CfcsaSample:
    """Record ``index``; diverged runs are logged and redrawn with a new seed."""
    base = manifest.apfa_config
    for attempt in range(manifest.max_retries + 1):
        seed = sample_seed(manifest, index, attempt)
        inst = instance_from_seed(manifest, seed)
        config = ApfaConfig(**{**base.to_dict(), "seed": seed})
        try:
            traj = apfa_run(inst.spec, inst.H, inst.init, config)
        except DivergenceError as exc:
            log.warning("sample %d attempt %d diverged: %s", index, attempt, exc)
            continue
        L, N, D = inst.spec.grid
        meta = {
            "index": index,
            "attempt": attempt,
            "raw_descriptors": inst.raw,
            "twirl": inst.twirl,
            "init_seed": inst.init.seed,
            "final_energy": traj.final_energy,
            "mean_frozen_fraction": traj.mean_frozen_fraction,
            "shift_evals": traj.counter.shift_evals,
        }
        return CfcsaSample(encode(inst.spec, inst.descriptors), label_from_trajectory(traj, inst.spec),
                           (L, N, D), inst.descriptors, seed, meta)
    raise DivergenceError(f"sample {index} diverged {manifest.max_retries + 1} times", None)


def _generate_star(args):
    return generate_sample(*args)


def dataset_stats(samples: Sequence[CfcsaSample], bins: int = 10) -> dict:
    labels = np.concatenate([s.label.ravel() for s in samples]) if samples else np.zeros(0)
    hist, edges = np.histogram(labels, bins=bins, range=(0.0, 1.0))
    fr = [s.meta.get("mean_frozen_fraction", float(np.mean(s.label))) for s in samples]
    return {
        "records": len(samples),
        "mean_frozen_fraction": float(np.mean(fr)) if fr else 0.0,
        "mean_label": float(labels.mean()) if labels.size else 0.0,
        "label_histogram": {"edges": edges.tolist(), "counts": hist.tolist()},
        "retried": sum(1 for s in samples if s.meta.get("attempt", 0) > 0),
    }


def generate_dataset(manifest: DatasetManifest, out_path, workers: int = 1) -> dict:
    """Write ``manifest.samples`` records to ``out_path`` (JSON Lines) and a
    ``<out>.stats.json`` sidecar; returns the stats block."""
    out_path = Path(out_path)
    args = [(manifest, i) for i in range(manifest.samples)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            samples = list(pool.map(_generate_star, args))
    else:
        samples = [generate_sample(*a) for a in args]
    write_dataset(samples, out_path)
    stats = dataset_stats(samples)
    stats["manifest"] = manifest.to_dict()
    out_path.with_suffix(out_path.suffix + ".stats.json").write_text(json.dumps(stats, indent=2))
    return stats
