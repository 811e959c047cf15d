"""Adaptive parameter freezing and activation (APFA) for gradient-descent VQE,
plus the fixed-mask runners used as baselines.

A run records one mask row per gradient call, ``m_0 .. m_T``. Row ``m_t``
decides which coordinates are differentiated at ``theta_t``; frozen
coordinates are never evaluated, so their saliency EMA is held at its last
value until the activate rule fires.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import numpy as np

from .ansatz import CircuitSpec
from .errors import ConfigError, DivergenceError, ValidationError
from .gradient import EvalCounter, energy_and_gradient
from .hamiltonian import Hamiltonian
from .initializer import InitSpec, init_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ApfaConfig:
    alpha: float = 0.9
    noise_std: float = 0.01
    epsilon: float = 1e-8
    lambda_f_min: float = 0.1
    lambda_f_max: float = 0.5
    lambda_a_min: float = 1.5
    lambda_a_max: float = 3.0
    n_freeze_patience: int = 5
    n_activate_patience: int = 3
    eta: float = 0.05
    max_iters: int = 300
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if not 0 < self.lambda_f_min < self.lambda_f_max <= 1:
            raise ConfigError("need 0 < lambda_f_min < lambda_f_max <= 1")
        if not 1 < self.lambda_a_min < self.lambda_a_max:
            raise ConfigError("need 1 < lambda_a_min < lambda_a_max")
        if self.n_freeze_patience < 1 or self.n_activate_patience < 1:
            raise ConfigError("patience lengths must be positive")
        if self.eta <= 0:
            raise ConfigError("eta must be > 0")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ApfaConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown apfa config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ApfaState:
    theta: np.ndarray
    ema: np.ndarray
    mask: np.ndarray
    freeze_counters: np.ndarray
    activate_counters: np.ndarray
    g0_norm: float
    iter: int = 0


class Thresholds(NamedTuple):
    tau_f: float
    tau_a: float
    r: float
    lambda_f: float
    lambda_a: float


@dataclass
class ApfaTrajectory:
    masks: np.ndarray
    energies: np.ndarray
    grad_norms: np.ndarray
    counter: EvalCounter
    theta0: np.ndarray
    theta_final: np.ndarray
    strategy: str = "apfa"
    config: dict = field(default_factory=dict)
    # per-update audit streams (length T): EMA after the update and thresholds
    ema: np.ndarray | None = None
    tau_f: np.ndarray | None = None
    tau_a: np.ndarray | None = None
    ratio: np.ndarray | None = None

    @property
    def iterations(self) -> int:
        return self.masks.shape[0] - 1

    @property
    def cumulative(self) -> np.ndarray:
        """``C``: number of rows in which each parameter was active."""
        return self.masks.sum(axis=0, dtype=np.int64)

    @property
    def mean_frozen_fraction(self) -> float:
        return float(1.0 - self.masks.mean())

    @property
    def final_energy(self) -> float:
        return float(self.energies[-1])

    def to_dict(self, audit: bool = True) -> dict:
        d = {
            "strategy": self.strategy,
            "config": self.config,
            "energies": self.energies.tolist(),
            "grad_norms": self.grad_norms.tolist(),
            "mask_rle": encode_mask_rows(self.masks),
            "C": self.cumulative.tolist(),
            "counter": asdict(self.counter),
            "theta0": self.theta0.tolist(),
            "theta_final": self.theta_final.tolist(),
        }
        if audit and self.ema is not None:
            d["audit"] = {
                "ema": self.ema.tolist(),
                "tau_f": self.tau_f.tolist(),
                "tau_a": self.tau_a.tolist(),
                "ratio": self.ratio.tolist(),
            }
        return d

    def to_json(self, audit: bool = True) -> str:
        return json.dumps(self.to_dict(audit))

    @classmethod
    def from_dict(cls, d: dict) -> "ApfaTrajectory":
        audit = d.get("audit") or {}
        arr = lambda k: None if k not in audit else np.asarray(audit[k], dtype=float)  # noqa: E731
        return cls(
            masks=decode_mask_rows(d["mask_rle"]),
            energies=np.asarray(d["energies"], dtype=float),
            grad_norms=np.asarray(d["grad_norms"], dtype=float),
            counter=EvalCounter(**d["counter"]),
            theta0=np.asarray(d["theta0"], dtype=float),
            theta_final=np.asarray(d["theta_final"], dtype=float),
            strategy=d.get("strategy", "apfa"),
            config=d.get("config", {}),
            ema=arr("ema"), tau_f=arr("tau_f"), tau_a=arr("tau_a"), ratio=arr("ratio"),
        )

    @classmethod
    def from_json(cls, text: str) -> "ApfaTrajectory":
        return cls.from_dict(json.loads(text))


def encode_mask_rows(masks: np.ndarray) -> list[list]:
    """Run-length encode consecutive identical mask rows as ``[bits, count]``."""
    out: list[list] = []
    for row in masks:
        bits = "".join("1" if v else "0" for v in row)
        if out and out[-1][0] == bits:
            out[-1][1] += 1
        else:
            out.append([bits, 1])
    return out


def decode_mask_rows(rle: list) -> np.ndarray:
    rows = []
    for bits, count in rle:
        row = np.frombuffer(bits.encode(), dtype=np.uint8) - ord("0")
        rows.extend([row] * int(count))
    return np.array(rows, dtype=np.uint8)


def ema_update(ema: np.ndarray, abs_g: np.ndarray, alpha: float, active=None) -> np.ndarray:
    """``alpha * ema + (1 - alpha) * |g|``; inactive coordinates keep their value."""
    new = alpha * ema + (1 - alpha) * abs_g
    if active is None:
        return new
    return np.where(np.asarray(active, dtype=bool), new, ema)


def thresholds(g_norm: float, g0_norm: float, ema: np.ndarray, config: ApfaConfig) -> Thresholds:
    r = min(max(g_norm / (g0_norm + config.epsilon), 0.0), 1.0)
    lam_f = config.lambda_f_min + (1 - r) * (config.lambda_f_max - config.lambda_f_min)
    lam_a = config.lambda_a_min + (1 - r) * (config.lambda_a_max - config.lambda_a_min)
    tau_f = lam_f * float(np.mean(ema))
    return Thresholds(tau_f, lam_a * tau_f, r, lam_f, lam_a)


def mask_update(ema, mask, c_f, c_a, tau_f, tau_a, config: ApfaConfig):
    """Advance the patience counters and apply the freeze / activate rules.

    Returns new ``(mask, c_f, c_a)`` arrays.
    """
    c_f = np.where(ema < tau_f, c_f + 1, 0)
    c_a = np.where(ema > tau_a, c_a + 1, 0)
    active = mask.astype(bool)
    freeze = active & (c_f >= config.n_freeze_patience)
    wake = ~active & (c_a >= config.n_activate_patience)
    flipped = freeze | wake
    new_mask = np.where(freeze, 0, np.where(wake, 1, mask)).astype(np.uint8)
    return new_mask, np.where(flipped, 0, c_f), np.where(flipped, 0, c_a)


def _initial_theta(spec: CircuitSpec, init) -> np.ndarray:
    if isinstance(init, InitSpec):
        return init_params(spec, init)
    theta = np.array(init, dtype=float)
    if theta.shape != (spec.param_count,):
        raise ValidationError(f"initial theta has shape {theta.shape}, expected ({spec.param_count},)")
    return theta


def apfa_run(spec: CircuitSpec, H: Hamiltonian, init, config: ApfaConfig) -> ApfaTrajectory:
    """Gradient descent with adaptive freezing; ``init`` is an InitSpec or a
    starting parameter vector."""
    theta = _initial_theta(spec, init)
    theta0 = theta.copy()
    P, T = spec.param_count, config.max_iters
    rng = np.random.default_rng(config.seed)
    counter = EvalCounter()
    state = ApfaState(theta, np.zeros(P), np.ones(P, dtype=np.uint8),
                      np.zeros(P, dtype=np.int64), np.zeros(P, dtype=np.int64), 0.0)
    masks = np.empty((T + 1, P), dtype=np.uint8)
    energies = np.full(T + 1, np.nan)
    grad_norms = np.full(T + 1, np.nan)
    ema_log = np.empty((T, P))
    tf_log, ta_log, r_log = np.empty(T), np.empty(T), np.empty(T)

    def partial(t):
        return ApfaTrajectory(masks[:t + 1].copy(), energies[:t + 1].copy(), grad_norms[:t + 1].copy(),
                              counter.snapshot(), theta0, state.theta.copy(), "apfa", config.to_dict(),
                              ema_log[:t].copy(), tf_log[:t].copy(), ta_log[:t].copy(), r_log[:t].copy())

    for t in range(T + 1):
        state.iter = t
        masks[t] = state.mask
        e, gv = energy_and_gradient(spec, state.theta, H, state.mask, counter)
        g = gv.values
        if config.noise_std > 0:
            active = np.flatnonzero(state.mask)
            g[active] += rng.normal(0.0, config.noise_std, size=active.size)
        energies[t] = e
        grad_norms[t] = np.linalg.norm(g)
        if not np.isfinite(e) or not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite energy or gradient at iteration {t}", partial(t))
        if t == T:
            break
        if t == 0:
            state.g0_norm = grad_norms[0]
            state.ema = np.abs(g)
        else:
            state.ema = ema_update(state.ema, np.abs(g), config.alpha, state.mask)
        th = thresholds(grad_norms[t], state.g0_norm, state.ema, config)
        old_mask = state.mask
        state.mask, state.freeze_counters, state.activate_counters = mask_update(
            state.ema, state.mask, state.freeze_counters, state.activate_counters,
            th.tau_f, th.tau_a, config)
        state.theta = state.theta - config.eta * (old_mask * g)
        ema_log[t], tf_log[t], ta_log[t], r_log[t] = state.ema, th.tau_f, th.tau_a, th.r

    return ApfaTrajectory(masks, energies, grad_norms, counter, theta0, state.theta,
                          "apfa", config.to_dict(), ema_log, tf_log, ta_log, r_log)


def fixed_mask_run(spec: CircuitSpec, H: Hamiltonian, init, frozen, eta: float, T: int,
                   strategy: str = "fixed") -> ApfaTrajectory:
    """Plain gradient descent with a constant set of frozen parameter ids."""
    if eta <= 0 or T < 1:
        raise ConfigError("need eta > 0 and T >= 1")
    theta = _initial_theta(spec, init)
    theta0 = theta.copy()
    P = spec.param_count
    mask = np.ones(P, dtype=np.uint8)
    frozen = np.asarray(sorted(set(int(i) for i in frozen)), dtype=np.int64)
    if frozen.size and (frozen.min() < 0 or frozen.max() >= P):
        raise ValidationError("frozen ids out of range")
    mask[frozen] = 0
    counter = EvalCounter()
    energies = np.full(T + 1, np.nan)
    grad_norms = np.full(T + 1, np.nan)
    cfg = {"eta": eta, "max_iters": T, "frozen": frozen.tolist()}
    for t in range(T + 1):
        e, gv = energy_and_gradient(spec, theta, H, mask, counter)
        g = gv.values
        energies[t] = e
        grad_norms[t] = np.linalg.norm(g)
        if not np.isfinite(e) or not np.all(np.isfinite(g)):
            masks = np.repeat(mask[None, :], t + 1, axis=0)
            raise DivergenceError(
                f"non-finite energy or gradient at iteration {t}",
                ApfaTrajectory(masks, energies[:t + 1], grad_norms[:t + 1], counter.snapshot(),
                               theta0, theta, strategy, cfg))
        if t == T:
            break
        theta = theta - eta * (mask * g)
    masks = np.repeat(mask[None, :], T + 1, axis=0)
    return ApfaTrajectory(masks, energies, grad_norms, counter, theta0, theta, strategy, cfg)


def baseline_run(spec: CircuitSpec, H: Hamiltonian, init, eta: float, T: int) -> ApfaTrajectory:
    return fixed_mask_run(spec, H, init, (), eta, T, "baseline")


def random_frozen_ids(P: int, frozen_count: int, seed) -> np.ndarray:
    if not 0 <= frozen_count <= P:
        raise ValidationError(f"frozen_count must lie in [0, {P}], got {frozen_count}")
    return np.sort(np.random.default_rng(seed).choice(P, size=frozen_count, replace=False))


def random_freeze_run(spec: CircuitSpec, H: Hamiltonian, init, frozen_count: int,
                      eta: float, T: int, seed) -> ApfaTrajectory:
    ids = random_frozen_ids(spec.param_count, frozen_count, seed)
    return fixed_mask_run(spec, H, init, ids, eta, T, "random")


def freeze_intensity(traj: ApfaTrajectory) -> np.ndarray:
    """Fraction of recorded iterations each parameter spent frozen."""
    return 1.0 - traj.cumulative / traj.masks.shape[0]


def audit_trajectory(traj: ApfaTrajectory, config: ApfaConfig) -> list[str]:
    """Replay the logged EMA / threshold streams and list every mask
    transition that the patience rules do not justify (empty = legal)."""
    if traj.ema is None:
        raise ValidationError("trajectory carries no audit streams")
    problems = []
    masks = traj.masks
    P = masks.shape[1]
    c_f = np.zeros(P, dtype=np.int64)
    c_a = np.zeros(P, dtype=np.int64)
    for t in range(traj.ema.shape[0]):
        expect, c_f, c_a = mask_update(traj.ema[t], masks[t], c_f, c_a,
                                       traj.tau_f[t], traj.tau_a[t], config)
        for i in np.flatnonzero(expect != masks[t + 1]):
            problems.append(f"t={t + 1} param {i}: replay gives {expect[i]}, log has {masks[t + 1][i]}")
        for i in np.flatnonzero(masks[t] != masks[t + 1]):
            below = traj.ema[:t + 1, i] < traj.tau_f[:t + 1]
            above = traj.ema[:t + 1, i] > traj.tau_a[:t + 1]
            run = _trailing_run(above if masks[t + 1][i] else below)
            need = config.n_activate_patience if masks[t + 1][i] else config.n_freeze_patience
            if run < need:
                problems.append(f"t={t + 1} param {i}: flip after run {run} < patience {need}")
    return problems


def _trailing_run(flags: np.ndarray) -> int:
    n = 0
    for f in flags[::-1]:
        if not f:
            break
        n += 1
    return n
