"""Experiment orchestration: single runs, sweeps, convergence curves,
intensity maps and the gradient-variance benchmark.

All randomness of one run is derived from ``(master seed, cell id, seed
index)``. Configs are plain JSON objects; unknown keys are rejected.

Sign conventions (both appear in output headers):
  * tables use ``dE = E_strategy - E_baseline`` (negative = better than baseline);
  * coefficient heatmaps use ``dE = E_baseline - E_init`` (positive = improvement).
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import plots
from .ansatz import CircuitSpec, build
from .apfa import ApfaConfig, ApfaTrajectory, apfa_run, fixed_mask_run, freeze_intensity, random_frozen_ids
from .cfcsa import COEFFICIENT_NAMES, grid_from_values, normalize_descriptors
from .errors import ConfigError, TitanError
from .hamiltonian import Hamiltonian, from_pauli_file, heisenberg, tfim
from .initializer import SCHEMES, TWIRL_SET, InitSpec, grad_variance_scan, init_params, twirl_indices, write_scan_csv
from .predictor import PredictorWeights, format_frozen, predict_mask
from .simulator import Gate

log = logging.getLogger(__name__)

STRATEGIES = ("baseline", "titan", "random")
DEFAULT_DESCRIPTOR_RANGE = (-5.0, 5.0)


def _reject_unknown(cls, d: dict, where: str):
    unknown = sorted(set(d) - {f.name for f in fields(cls)})
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


@dataclass(frozen=True)
class ProblemConfig:
    hamiltonian: dict = field(default_factory=lambda: {"class": "HEISENBERG", "coefficients": [1.0, 1.0, 1.0]})
    family: str = "HEA_T1"
    N: int = 5
    L: int = 5
    init: dict = field(default_factory=lambda: {"scheme": "ENHANCED_GAUSS"})
    eta: float = 0.05
    T: int = 300
    tau: float = 80.0
    strategies: tuple[str, ...] = STRATEGIES
    descriptor_ranges: tuple | None = None
    checkpoint: str | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "strategies", tuple(self.strategies))
        h = dict(self.hamiltonian)
        allowed = {"class", "coefficients", "path", "units"}
        if set(h) - allowed:
            raise ConfigError(f"hamiltonian: unknown keys {sorted(set(h) - allowed)}")
        cls = h.get("class")
        if cls in COEFFICIENT_NAMES:
            if len(h.get("coefficients", ())) != len(COEFFICIENT_NAMES[cls]):
                raise ConfigError(f"hamiltonian.coefficients: {cls} needs {COEFFICIENT_NAMES[cls]}")
        elif cls == "MOLECULE_FILE":
            if "path" not in h:
                raise ConfigError("hamiltonian.path: required for MOLECULE_FILE")
        else:
            raise ConfigError(f"hamiltonian.class: unknown value {cls!r}")
        if self.N < 2 or self.L < 1:
            raise ConfigError("N/L: need N >= 2 and L >= 1")
        if self.eta <= 0 or self.T < 1:
            raise ConfigError("eta/T: need eta > 0 and T >= 1")
        if not 0 < self.tau < 100:
            raise ConfigError("tau: must lie in (0, 100)")
        bad = set(self.strategies) - set(STRATEGIES)
        if bad or not self.strategies:
            raise ConfigError(f"strategies: must be a non-empty subset of {STRATEGIES}")
        if ("titan" in self.strategies or "random" in self.strategies) and not self.checkpoint:
            raise ConfigError("checkpoint: required for titan/random strategies")
        self.init_spec(0)

    def init_spec(self, seed: int) -> InitSpec:
        d = dict(self.init)
        if set(d) - {"scheme", "sigma2", "c_coeff"}:
            raise ConfigError(f"init: unknown keys {sorted(set(d) - {'scheme', 'sigma2', 'c_coeff'})}")
        try:
            return InitSpec(seed=seed, **d)
        except ConfigError as exc:
            raise ConfigError(f"init: {exc}") from None

    @property
    def units(self) -> str:
        h = self.hamiltonian
        return h.get("units", "file units" if h["class"] == "MOLECULE_FILE" else "coupling units")

    def build_hamiltonian(self) -> Hamiltonian:
        h = self.hamiltonian
        if h["class"] == "HEISENBERG":
            return heisenberg(self.N, *h["coefficients"])
        if h["class"] == "TFIM":
            return tfim(self.N, *h["coefficients"])
        H = from_pauli_file(h["path"])
        if H.n_qubits != self.N:
            raise ConfigError(f"N: config says {self.N}, Hamiltonian file has {H.n_qubits} qubits")
        return H

    def descriptors(self, H: Hamiltonian) -> np.ndarray:
        h = self.hamiltonian
        raw = [float(len(H.terms))] if h["class"] == "MOLECULE_FILE" else list(h["coefficients"])
        ranges = self.descriptor_ranges or [DEFAULT_DESCRIPTOR_RANGE] * len(raw)
        return normalize_descriptors(raw, ranges)

    @classmethod
    def from_dict(cls, d: dict) -> "ProblemConfig":
        _reject_unknown(cls, d, "problem config")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategies"] = list(self.strategies)
        return d


def derive_seed(master: int, cell: int, index: int) -> int:
    return int(np.random.SeedSequence([master, cell, index]).generate_state(1)[0])


def make_circuit(problem: ProblemConfig, seed: int) -> CircuitSpec:
    family = problem.family.upper()
    if family == "HEA_T1":
        idx = twirl_indices(problem.N, np.random.default_rng([seed, 1]))
        return build(family, problem.N, problem.L, [Gate("FIXED1Q", (q,), matrix=TWIRL_SET[i]) for q, i in enumerate(idx)])
    return build(family, problem.N, problem.L)


@dataclass
class StrategyResult:
    final_energy: float
    initial_energy: float
    delta_e: float
    frozen: int
    P: int
    shift_evals: int
    energy_evals: int
    wall_time: float

    @property
    def frozen_label(self) -> str:
        return format_frozen(self.frozen, self.P)


@dataclass
class RunRecord:
    experiment_id: str
    config: dict
    seed: int
    units: str
    results: dict[str, StrategyResult]
    trajectories: dict[str, ApfaTrajectory] = field(default_factory=dict, repr=False)

    def to_dict(self, curves: bool = False) -> dict:
        d = {
            "experiment_id": self.experiment_id,
            "config": self.config,
            "seed": self.seed,
            "units": self.units,
            "delta_e_convention": "E_strategy - E_baseline (negative = better)",
            "results": {k: {**asdict(v), "frozen_label": v.frozen_label} for k, v in self.results.items()},
        }
        if curves:
            d["curves"] = {k: {"energies": t.energies.tolist(), "grad_norms": t.grad_norms.tolist()}
                           for k, t in self.trajectories.items()}
        return d


def load_weights(problem: ProblemConfig, weights: PredictorWeights | None):
    if weights is not None or "titan" not in problem.strategies and "random" not in problem.strategies:
        return weights
    return PredictorWeights.load(problem.checkpoint)


def run_problem(problem: ProblemConfig, seed: int, weights: PredictorWeights | None = None,
                experiment_id: str = "run") -> RunRecord:
    """Run the requested strategies from one shared initial point.

    ``random`` freezes as many parameters as ``titan`` does (matched count).
    """
    weights = load_weights(problem, weights)
    H = problem.build_hamiltonian()
    spec = make_circuit(problem, seed)
    theta0 = init_params(spec, problem.init_spec(derive_seed(seed, 0, 2)))
    P = spec.param_count
    strategies = [s for s in STRATEGIES if s in problem.strategies]
    frozen: dict[str, np.ndarray] = {"baseline": np.zeros(0, dtype=int)}
    if "titan" in strategies or "random" in strategies:
        frozen["titan"] = predict_mask(weights, spec, problem.descriptors(H), problem.tau).frozen
        frozen["random"] = random_frozen_ids(P, frozen["titan"].size, derive_seed(seed, 0, 3))
    trajs, results = {}, {}
    for s in strategies:
        t0 = time.perf_counter()
        trajs[s] = fixed_mask_run(spec, H, theta0, frozen[s], problem.eta, problem.T, s)
        trajs[s].config["wall_time"] = time.perf_counter() - t0
    ref = trajs["baseline"].final_energy if "baseline" in trajs else None
    for s, tr in trajs.items():
        results[s] = StrategyResult(
            final_energy=tr.final_energy,
            initial_energy=float(tr.energies[0]),
            delta_e=float("nan") if ref is None else tr.final_energy - ref,
            frozen=int(frozen[s].size),
            P=P,
            shift_evals=tr.counter.shift_evals,
            energy_evals=tr.counter.energy_evals,
            wall_time=tr.config["wall_time"],
        )
    return RunRecord(experiment_id, problem.to_dict(), seed, problem.units, results, trajs)


# ---------------------------------------------------------------- sweep

@dataclass(frozen=True)
class SweepConfig:
    problem: dict = field(default_factory=dict)
    L_list: tuple[int, ...] = (5, 6)
    N_list: tuple[int, ...] = (5, 6, 7, 8)
    seeds: int = 3
    seed: int = 0
    # "LN": cells over (L, N); "AB": cells over Heisenberg (a, b) at fixed L, N, c
    axes: str = "LN"
    a_values: tuple[float, ...] = ()
    b_values: tuple[float, ...] = ()
    c_value: float = 1.0

    def __post_init__(self):
        for k in ("L_list", "N_list", "a_values", "b_values"):
            object.__setattr__(self, k, tuple(getattr(self, k)))
        if self.seeds < 1:
            raise ConfigError("seeds: must be >= 1")
        if self.axes not in ("LN", "AB"):
            raise ConfigError("axes: must be 'LN' or 'AB'")
        if self.axes == "LN" and (not self.L_list or not self.N_list):
            raise ConfigError("L_list/N_list: must be non-empty")
        if self.axes == "AB" and (not self.a_values or not self.b_values):
            raise ConfigError("a_values/b_values: required for AB sweeps")
        self.base_problem()

    def base_problem(self) -> ProblemConfig:
        return ProblemConfig.from_dict(self.problem)

    def cells(self) -> list[tuple[int, ProblemConfig, dict]]:
        base = self.base_problem().to_dict()
        out = []
        if self.axes == "LN":
            for L in self.L_list:
                for N in self.N_list:
                    out.append(({**base, "L": L, "N": N}, {"L": L, "N": N}))
        else:
            for b in self.b_values:
                for a in self.a_values:
                    h = {"class": "HEISENBERG", "coefficients": [a, b, self.c_value]}
                    out.append(({**base, "hamiltonian": h}, {"a": a, "b": b}))
        return [(i, ProblemConfig.from_dict(p), key) for i, (p, key) in enumerate(out)]

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        _reject_unknown(cls, d, "sweep config")
        return cls(**d)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


SWEEP_COLUMNS = (
    "cell", "L", "N", "a", "b", "seed_index", "seed", "status", "units", "P",
    "F_titan", "E_init", "E_baseline", "E_titan", "E_random",
    "dE_titan", "dE_random", "dE_baseline_minus_init",
    "shift_evals_baseline", "shift_evals_titan", "shift_evals_random",
)


def _sweep_task(args):
    cell, problem, key, idx, seed, weights = args
    row = {"cell": cell, "L": problem.L, "N": problem.N, "a": key.get("a", ""), "b": key.get("b", ""),
           "seed_index": idx, "seed": seed, "units": problem.units}
    try:
        rec = run_problem(problem, seed, weights, f"cell{cell}")
    except TitanError as exc:
        row["status"] = f"failed: {exc}"
        return row
    r = rec.results
    row.update(status="ok", P=r["baseline"].P, E_init=r["baseline"].initial_energy,
               E_baseline=r["baseline"].final_energy,
               dE_baseline_minus_init=r["baseline"].final_energy - r["baseline"].initial_energy,
               shift_evals_baseline=r["baseline"].shift_evals)
    for s in ("titan", "random"):
        if s in r:
            row[f"E_{s}"] = r[s].final_energy
            row[f"dE_{s}"] = r[s].delta_e
            row[f"shift_evals_{s}"] = r[s].shift_evals
    if "titan" in r:
        row["F_titan"] = r["titan"].frozen
    return row


def run_sweep(config: SweepConfig, weights: PredictorWeights | None = None, workers: int = 1) -> list[dict]:
    tasks = []
    for cell, problem, key in config.cells():
        w = load_weights(problem, weights)
        for idx in range(config.seeds):
            tasks.append((cell, problem, key, idx, derive_seed(config.seed, cell, idx), w))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_sweep_task, tasks))
    return [_sweep_task(t) for t in tasks]


def write_rows_csv(rows: Sequence[dict], columns: Sequence[str], path, config: dict):
    with open(path, "w", newline="") as fh:
        fh.write(f"# config: {json.dumps(config, sort_keys=True)}\n")
        w = csv.DictWriter(fh, fieldnames=list(columns), restval="", extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def read_rows_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def cell_summary(rows: Sequence[dict]) -> list[dict]:
    """Per-cell aggregates over seeds (only successful rows)."""
    by_cell: dict[int, list[dict]] = {}
    for r in rows:
        if r.get("status") == "ok":
            by_cell.setdefault(int(r["cell"]), []).append(r)
    out = []
    for cell, rs in sorted(by_cell.items()):
        get = lambda k: np.array([float(r[k]) for r in rs if r.get(k, "") != ""])  # noqa: E731
        s = {"cell": cell, "L": int(rs[0]["L"]), "N": int(rs[0]["N"]), "a": rs[0].get("a", ""),
             "b": rs[0].get("b", ""), "runs": len(rs)}
        for k in ("dE_titan", "dE_random", "dE_baseline_minus_init"):
            v = get(k)
            s[f"mean_{k}"] = float(v.mean()) if v.size else float("nan")
            s[f"median_{k}"] = float(np.median(v)) if v.size else float("nan")
        F, P = get("F_titan"), get("P")
        s["frozen_fraction"] = float(np.mean(F / P)) if F.size else 0.0
        out.append(s)
    return out


def sweep_heatmaps(config: SweepConfig, rows: Sequence[dict], out_dir: Path) -> list[Path]:
    summary = cell_summary(rows)
    meta = config.to_dict()
    paths = []
    if config.axes == "LN":
        grid = np.full((len(config.L_list), len(config.N_list)), np.nan)
        for s in summary:
            grid[config.L_list.index(s["L"]), config.N_list.index(s["N"])] = s["mean_dE_titan"]
        p = out_dir / "sweep_dE_titan.svg"
        plots.heatmap(grid, config.L_list, config.N_list,
                      "mean dE = E_titan - E_baseline (negative = better)", "dE", p, meta)
        paths.append(p)
    else:
        grid = np.full((len(config.b_values), len(config.a_values)), np.nan)
        for s in summary:
            grid[config.b_values.index(float(s["b"])), config.a_values.index(float(s["a"]))] = \
                s["mean_dE_baseline_minus_init"]
        p = out_dir / "sweep_dE_baseline_minus_init.svg"
        plots.heatmap(grid, config.b_values, config.a_values,
                      "dE = E_baseline - E_init (positive = improvement); rows b, cols a", "dE", p, meta)
        paths.append(p)
    return paths


# ---------------------------------------------------------------- convergence

@dataclass
class ConvergenceResult:
    energies: dict[str, np.ndarray]      # strategy -> (seeds, T+1)
    grad_norms: dict[str, np.ndarray]
    records: list[RunRecord]

    def envelope(self, kind: str, strategy: str) -> tuple[np.ndarray, np.ndarray]:
        data = (self.energies if kind == "energy" else self.grad_norms)[strategy]
        return data.mean(axis=0), data.std(axis=0)

    def crossing_iterations(self, strategy: str = "titan") -> list[int | None]:
        """Per seed, the first iteration at which ``strategy``'s gradient norm
        is below the baseline's (None if it never is)."""
        out = []
        for g, b in zip(self.grad_norms[strategy], self.grad_norms["baseline"]):
            hit = np.flatnonzero(g < b)
            out.append(int(hit[0]) if hit.size else None)
        return out


CURVE_COLUMNS = ("strategy", "iteration", "energy_mean", "energy_std", "grad_norm_mean", "grad_norm_std")


def run_convergence(problem: ProblemConfig, seeds: int, master_seed: int = 0,
                    weights: PredictorWeights | None = None) -> ConvergenceResult:
    if seeds < 1:
        raise ConfigError("seeds: must be >= 1")
    weights = load_weights(problem, weights)
    records = [run_problem(problem, derive_seed(master_seed, 0, i), weights, f"convergence{i}")
               for i in range(seeds)]
    strategies = list(records[0].trajectories)
    return ConvergenceResult(
        {s: np.array([r.trajectories[s].energies for r in records]) for s in strategies},
        {s: np.array([r.trajectories[s].grad_norms for r in records]) for s in strategies},
        records,
    )


def write_convergence(result: ConvergenceResult, out_dir: Path, config: dict) -> list[Path]:
    rows = []
    for s in result.energies:
        em, es = result.envelope("energy", s)
        gm, gs = result.envelope("grad", s)
        for t in range(len(em)):
            rows.append({"strategy": s, "iteration": t, "energy_mean": em[t], "energy_std": es[t],
                         "grad_norm_mean": gm[t], "grad_norm_std": gs[t]})
    csv_path = out_dir / "convergence.csv"
    write_rows_csv(rows, CURVE_COLUMNS, csv_path, config)
    e_path, g_path = out_dir / "convergence_energy.svg", out_dir / "convergence_grad_norm.svg"
    plots.curves({s: result.envelope("energy", s) for s in result.energies}, "energy",
                 "energy (mean +/- std over seeds)", e_path, config)
    plots.curves({s: result.envelope("grad", s) for s in result.grad_norms}, "||masked gradient||",
                 "gradient norm (mean +/- std over seeds)", g_path, config, log_y=True)
    return [csv_path, e_path, g_path]


# ---------------------------------------------------------------- intensity maps

@dataclass(frozen=True)
class IntensityConfig:
    problem: dict = field(default_factory=lambda: {"strategies": ["baseline"]})
    L_list: tuple[int, ...] = (5, 6)
    N_list: tuple[int, ...] = (5, 6)
    seeds: int = 1
    seed: int = 0
    apfa: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "L_list", tuple(self.L_list))
        object.__setattr__(self, "N_list", tuple(self.N_list))
        if self.seeds < 1:
            raise ConfigError("seeds: must be >= 1")
        ProblemConfig.from_dict(self.problem)
        ApfaConfig.from_dict(self.apfa)

    @classmethod
    def from_dict(cls, d: dict) -> "IntensityConfig":
        _reject_unknown(cls, d, "intensity config")
        return cls(**d)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def run_intensity_maps(config: IntensityConfig) -> list[dict]:
    """Mean APFA freeze-intensity grid per (L, N) cell."""
    base = ProblemConfig.from_dict(config.problem).to_dict()
    out = []
    cell = 0
    for L in config.L_list:
        for N in config.N_list:
            problem = ProblemConfig.from_dict({**base, "L": L, "N": N})
            H = problem.build_hamiltonian()
            grids = []
            for i in range(config.seeds):
                seed = derive_seed(config.seed, cell, i)
                spec = make_circuit(problem, seed)
                apfa = ApfaConfig.from_dict({**config.apfa, "seed": seed, "eta": problem.eta, "max_iters": problem.T})
                traj = apfa_run(spec, H, problem.init_spec(derive_seed(seed, 0, 2)), apfa)
                grids.append(grid_from_values(freeze_intensity(traj), spec))
            out.append({"cell": cell, "L": L, "N": N, "grid": np.mean(grids, axis=0)})
            cell += 1
    return out


def layer_contrast(maps: Sequence[dict]) -> float:
    """Mean over cells of (first-layer intensity - last-layer intensity)."""
    return float(np.mean([m["grid"][0].mean() - m["grid"][-1].mean() for m in maps]))


# ---------------------------------------------------------------- bench-bp

@dataclass(frozen=True)
class BenchConfig:
    n: int = 6
    L_list: tuple[int, ...] = (2, 4, 8, 16)
    samples: int = 1000
    schemes: tuple[str, ...] = ("ENHANCED_GAUSS", "UNIFORM")
    c_coeff: float = 1.0
    sigma2: float | None = None
    seed: int = 0
    n_boot: int = 1000
    ratio_L: int = 12
    ratio_N_list: tuple[int, ...] = (4, 8, 12)
    ratio_samples: int = 0

    def __post_init__(self):
        for k in ("L_list", "schemes", "ratio_N_list"):
            object.__setattr__(self, k, tuple(getattr(self, k)))
        if set(self.schemes) - set(SCHEMES):
            raise ConfigError(f"schemes: unknown {sorted(set(self.schemes) - set(SCHEMES))}")
        if self.samples < 100:
            raise ConfigError("samples: must be >= 100")

    def init(self, scheme: str) -> InitSpec:
        return InitSpec(scheme, sigma2=self.sigma2, c_coeff=self.c_coeff, seed=self.seed)

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        _reject_unknown(cls, d, "bench config")
        return cls(**d)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


RATIO_COLUMNS = ("N", "L", "var_enhanced", "var_uniform", "ratio", "samples", "seed")


def run_bench(config: BenchConfig, out_dir: Path) -> dict:
    meta = json.dumps(config.to_dict(), sort_keys=True)
    scans = {s: grad_variance_scan(config.n, config.L_list, config.init(s), config.samples, n_boot=config.n_boot)
             for s in config.schemes}
    paths = []
    for s, rows in scans.items():
        p = out_dir / f"bench_bp_{s.lower()}.csv"
        write_scan_csv(rows, p, f"config: {meta}")
        paths.append(p)
    svg = out_dir / "bench_bp.svg"
    plots.variance_plot(scans, svg, config.to_dict())
    paths.append(svg)
    ratios = []
    if config.ratio_samples:
        from .initializer import gradient_samples
        for n in config.ratio_N_list:
            ve = float(np.var(gradient_samples(n, config.ratio_L, config.init("ENHANCED_GAUSS"), config.ratio_samples), ddof=1))
            vu = float(np.var(gradient_samples(n, config.ratio_L, config.init("UNIFORM"), config.ratio_samples), ddof=1))
            ratios.append({"N": n, "L": config.ratio_L, "var_enhanced": ve, "var_uniform": vu,
                           "ratio": ve / vu, "samples": config.ratio_samples, "seed": config.seed})
        p = out_dir / "bench_bp_ratio.csv"
        write_rows_csv(ratios, RATIO_COLUMNS, p, config.to_dict())
        paths.append(p)
    return {"scans": scans, "ratios": ratios, "paths": paths}
