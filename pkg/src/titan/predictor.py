"""Dimension-agnostic freeze-intensity regressor in plain numpy.

Stride-1 3x3 convolutions with same padding keep the ``L x (D*N)`` grid
intact, one multi-head self-attention block with a residual connection mixes
all grid tokens, and a per-token linear head emits one intensity per cell.
No weight shape depends on the grid, so one checkpoint serves every circuit
size. Gradients are hand-written and checked against finite differences by
``backprop_check``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .ansatz import CircuitSpec
from .cfcsa import CfcsaSample, encode, read_dataset, values_from_grid
from .errors import ConfigError, DivergenceError, ShapeError, ValidationError

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "titan-predictor"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Hyper:
    in_channels: int = 6
    channels: int = 32
    conv_blocks: int = 4
    heads: int = 4
    head_dim: int = 8
    bias: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.in_channels < 3:
            raise ConfigError("in_channels must be >= 3 (three coordinate planes)")
        if self.conv_blocks < 0 or self.heads < 0:
            raise ConfigError("conv_blocks and heads must be >= 0")
        if self.conv_blocks and self.channels < 1:
            raise ConfigError("channels must be positive")
        if self.heads and self.head_dim < 1:
            raise ConfigError("head_dim must be positive")

    @property
    def width(self) -> int:
        """Feature width seen by the attention block and the head."""
        return self.channels if self.conv_blocks else self.in_channels

    @classmethod
    def from_dict(cls, d: dict) -> "Hyper":
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown hyper keys: {unknown}")
        return cls(**d)


def expected_shapes(hyper: Hyper) -> dict[str, tuple[int, ...]]:
    shapes = {}
    c_in = hyper.in_channels
    for i in range(hyper.conv_blocks):
        shapes[f"conv{i}.w"] = (hyper.channels, c_in, 3, 3)
        if hyper.bias:
            shapes[f"conv{i}.b"] = (hyper.channels,)
        c_in = hyper.channels
    if hyper.heads:
        a = hyper.heads * hyper.head_dim
        for k in ("wq", "wk", "wv"):
            shapes[f"attn.{k}"] = (c_in, a)
        shapes["attn.wo"] = (a, c_in)
    shapes["head.w"] = (c_in,)
    shapes["head.b"] = (1,)
    return shapes


@dataclass
class PredictorWeights:
    hyper: Hyper
    params: dict[str, np.ndarray]

    def __post_init__(self):
        want = expected_shapes(self.hyper)
        if set(want) != set(self.params):
            raise ShapeError(f"weight names {sorted(self.params)} do not match hyper {sorted(want)}")
        for k, shp in want.items():
            arr = np.asarray(self.params[k], dtype=float)
            if arr.shape != shp:
                raise ShapeError(f"{k}: shape {arr.shape}, hyper requires {shp}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{k}: non-finite weights")
            self.params[k] = arr

    @classmethod
    def init(cls, hyper: Hyper) -> "PredictorWeights":
        rng = np.random.default_rng(hyper.seed)
        params = {}
        for k, shp in expected_shapes(hyper).items():
            if k.endswith(".b"):
                params[k] = np.zeros(shp)
            elif k.startswith("conv"):
                params[k] = rng.normal(0, np.sqrt(2.0 / (shp[1] * 9)), size=shp)
            else:
                params[k] = rng.normal(0, np.sqrt(1.0 / shp[0]), size=shp)
        return cls(hyper, params)

    @property
    def n_weights(self) -> int:
        return sum(v.size for v in self.params.values())

    def copy(self) -> "PredictorWeights":
        return PredictorWeights(self.hyper, {k: v.copy() for k, v in self.params.items()})

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "hyper": asdict(self.hyper),
            "weights": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorWeights":
        if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
            raise ValidationError("not a predictor checkpoint of a supported version")
        hyper = Hyper.from_dict(d["hyper"])
        want = expected_shapes(hyper)
        params = {}
        for k, rec in d["weights"].items():
            if k not in want or tuple(rec["shape"]) != want[k]:
                raise ShapeError(f"checkpoint tensor {k} does not match the hyper block")
            params[k] = np.asarray(rec["data"], dtype=float).reshape(want[k])
        return cls(hyper, params)

    def save(self, path, train_state: dict | None = None):
        d = self.to_dict()
        if train_state is not None:
            d["train_state"] = train_state
        Path(path).write_text(json.dumps(d))

    @classmethod
    def load(cls, path) -> "PredictorWeights":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- layers

def _im2col(h: np.ndarray) -> np.ndarray:
    """(B, L, W, C) -> (B, L, W, C*9) patches ordered (c, di, dj)."""
    pad = np.pad(h, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(pad, (3, 3), axis=(1, 2))  # B, L, W, C, 3, 3
    B, L, W, C = h.shape
    return win.reshape(B, L, W, C * 9)


def _col2im(dcols: np.ndarray, C: int) -> np.ndarray:
    B, L, W, _ = dcols.shape
    d = dcols.reshape(B, L, W, C, 3, 3)
    dpad = np.zeros((B, L + 2, W + 2, C))
    for i in range(3):
        for j in range(3):
            dpad[:, i:i + L, j:j + W, :] += d[..., i, j]
    return dpad[:, 1:-1, 1:-1, :]


def _softmax(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_input(weights: PredictorWeights, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"input must be (C, L, W) or (B, C, L, W), got {x.shape}")
    if x.shape[1] != weights.hyper.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, checkpoint expects {weights.hyper.in_channels}")
    return x


def _forward(weights: PredictorWeights, x: np.ndarray):
    hp, p = weights.hyper, weights.params
    h = x.transpose(0, 2, 3, 1)
    B, L, W, _ = h.shape
    cache = {"conv": []}
    for i in range(hp.conv_blocks):
        w = p[f"conv{i}.w"]
        cols = _im2col(h)
        z = cols @ w.reshape(w.shape[0], -1).T
        if hp.bias:
            z = z + p[f"conv{i}.b"]
        cache["conv"].append((cols, z, h.shape[-1]))
        h = np.maximum(z, 0.0)
    tok = h.reshape(B, L * W, -1)
    cache["tok"] = tok
    if hp.heads:
        H, dh = hp.heads, hp.head_dim
        split = lambda m: (tok @ m).reshape(B, L * W, H, dh).transpose(0, 2, 1, 3)  # noqa: E731
        Q, K, V = split(p["attn.wq"]), split(p["attn.wk"]), split(p["attn.wv"])
        A = _softmax(Q @ K.transpose(0, 1, 3, 2) / np.sqrt(dh))
        O = (A @ V).transpose(0, 2, 1, 3).reshape(B, L * W, H * dh)
        cache.update(Q=Q, K=K, V=V, A=A, O=O)
        feat = tok + O @ p["attn.wo"]
    else:
        feat = tok
    cache["feat"] = feat
    out = feat @ p["head.w"] + p["head.b"][0]
    return out.reshape(B, L, W), cache


def _backward(weights: PredictorWeights, cache, dout: np.ndarray) -> dict[str, np.ndarray]:
    hp, p = weights.hyper, weights.params
    B, L, W = dout.shape
    g = {}
    d = dout.reshape(B, L * W)
    feat = cache["feat"]
    g["head.w"] = np.einsum("bt,btc->c", d, feat)
    g["head.b"] = np.array([d.sum()])
    dfeat = d[..., None] * p["head.w"]
    if hp.heads:
        H, dh = hp.heads, hp.head_dim
        tok, Q, K, V, A, O = (cache[k] for k in ("tok", "Q", "K", "V", "A", "O"))
        g["attn.wo"] = np.einsum("bta,btc->ac", O, dfeat)
        dO = (dfeat @ p["attn.wo"].T).reshape(B, L * W, H, dh).transpose(0, 2, 1, 3)
        dA = dO @ V.transpose(0, 1, 3, 2)
        dV = A.transpose(0, 1, 3, 2) @ dO
        dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) / np.sqrt(dh)
        dQ = dS @ K
        dK = dS.transpose(0, 1, 3, 2) @ Q
        dtok = dfeat.copy()
        for name, dm in (("wq", dQ), ("wk", dK), ("wv", dV)):
            dm = dm.transpose(0, 2, 1, 3).reshape(B, L * W, H * dh)
            g[f"attn.{name}"] = np.einsum("btc,bta->ca", tok, dm)
            dtok += dm @ p[f"attn.{name}"].T
    else:
        dtok = dfeat
    dh_ = dtok.reshape(B, L, W, -1)
    for i in reversed(range(hp.conv_blocks)):
        cols, z, c_in = cache["conv"][i]
        dz = dh_ * (z > 0)
        w = p[f"conv{i}.w"]
        g[f"conv{i}.w"] = np.einsum("blwo,blwk->ok", dz, cols).reshape(w.shape)
        if hp.bias:
            g[f"conv{i}.b"] = dz.sum(axis=(0, 1, 2))
        if i > 0:
            dh_ = _col2im(dz @ w.reshape(w.shape[0], -1), c_in)
    return g


def forward(weights: PredictorWeights, x: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Intensity grid(s) for input tensor(s) ``(C, L, W)`` or ``(B, C, L, W)``."""
    single = np.ndim(x) == 3
    out, _ = _forward(weights, _check_input(weights, x))
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out[0] if single else out


def loss(pred: np.ndarray, label: np.ndarray) -> float:
    """Mean over the batch of the squared Frobenius norm of ``pred - label``."""
    pred, label = np.asarray(pred, dtype=float), np.asarray(label, dtype=float)
    if pred.shape != label.shape:
        raise ShapeError(f"prediction {pred.shape} vs label {label.shape}")
    if pred.ndim == 2:
        pred, label = pred[None], label[None]
    return float(np.mean(np.sum((pred - label) ** 2, axis=(-2, -1))))


def loss_and_grad(weights: PredictorWeights, x: np.ndarray, label: np.ndarray):
    x = _check_input(weights, x)
    label = np.asarray(label, dtype=float).reshape(x.shape[0], x.shape[2], x.shape[3])
    out, cache = _forward(weights, x)
    diff = out - label
    value = float(np.mean(np.sum(diff**2, axis=(1, 2))))
    return value, _backward(weights, cache, 2.0 * diff / x.shape[0])


def backprop_check(weights: PredictorWeights, x: np.ndarray, label: np.ndarray,
                   n_weights: int = 200, h: float = 1e-4, seed: int = 0) -> float:
    """Max relative error between analytic gradients and central differences
    over a random subset of weight entries (all entries if fewer exist)."""
    _, grads = loss_and_grad(weights, x, label)
    index = [(k, i) for k, v in weights.params.items() for i in range(v.size)]
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(index), size=min(n_weights, len(index)), replace=False)
    w = weights.copy()
    worst = 0.0
    for j in pick:
        k, i = index[j]
        flat = w.params[k].reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        fp = loss(forward(w, x, clamp=False), label)
        flat[i] = orig - h
        fm = loss(forward(w, x, clamp=False), label)
        flat[i] = orig
        fd = (fp - fm) / (2 * h)
        an = grads[k].reshape(-1)[i]
        denom = max(abs(an), abs(fd), 1e-6)
        worst = max(worst, abs(an - fd) / denom)
    return worst


# ---------------------------------------------------------------- training

@dataclass
class TrainReport:
    train_loss: list[float]
    val_loss: list[float]
    initial_train_loss: float
    initial_val_loss: float | None
    split_seed: int
    n_train: int
    n_val: int
    epochs: int
    lr: float
    checkpoint_id: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _Adam:
    lr: float
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8

    def update(self, params: dict, grads: dict):
        self.step += 1
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mh = m / (1 - self.b1**self.step)
            vh = v / (1 - self.b2**self.step)
            params[k] = params[k] - self.lr * mh / (np.sqrt(vh) + self.eps)

    def to_dict(self) -> dict:
        return {"step": self.step, "lr": self.lr,
                "m": {k: a.ravel().tolist() for k, a in self.m.items()},
                "v": {k: a.ravel().tolist() for k, a in self.v.items()}}

    @classmethod
    def from_dict(cls, d: dict, shapes: dict) -> "_Adam":
        opt = cls(d["lr"])
        opt.step = d["step"]
        opt.m = {k: np.asarray(a, dtype=float).reshape(shapes[k]) for k, a in d["m"].items()}
        opt.v = {k: np.asarray(a, dtype=float).reshape(shapes[k]) for k, a in d["v"].items()}
        return opt


def split_indices(n: int, seed: int, val_fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(val_fraction * n)) if n >= 5 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _buckets(samples: Sequence[CfcsaSample], idx: np.ndarray, batch_size: int, rng) -> list[np.ndarray]:
    groups: dict[tuple, list[int]] = {}
    for i in rng.permutation(idx):
        groups.setdefault(samples[i].x.shape, []).append(int(i))
    batches = []
    for members in groups.values():
        for s in range(0, len(members), batch_size):
            batches.append(np.array(members[s:s + batch_size]))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def _eval_loss(weights, samples, idx) -> float:
    if len(idx) == 0:
        return float("nan")
    groups: dict[tuple, list[int]] = {}
    for i in idx:
        groups.setdefault(samples[i].x.shape, []).append(int(i))
    total = 0.0
    for members in groups.values():
        x = np.stack([samples[i].x for i in members])
        y = np.stack([samples[i].label for i in members])
        out, _ = _forward(weights, x)
        total += float(np.sum((out - y) ** 2))
    return total / len(idx)


def train(
    dataset,
    hyper: Hyper | None = None,
    seed: int = 0,
    epochs: int = 100,
    lr: float = 1e-3,
    batch_size: int = 16,
    checkpoint: str | Path | None = None,
    resume: str | Path | None = None,
) -> tuple[TrainReport, PredictorWeights]:
    """Fit a predictor on a dataset path or a list of samples.

    ``resume`` continues from a checkpoint written by an earlier call with
    the same dataset and seed; epochs already done are skipped.
    """
    samples = read_dataset(dataset) if isinstance(dataset, (str, Path)) else list(dataset)
    if not samples:
        raise ValidationError("dataset is empty")
    k = samples[0].x.shape[0]
    if any(s.x.shape[0] != k for s in samples):
        raise ShapeError("records disagree on the descriptor count")
    hyper = hyper or Hyper(in_channels=k, seed=seed)
    if hyper.in_channels != k:
        raise ShapeError(f"hyper expects {hyper.in_channels} input channels, dataset has {k}")
    tr, va = split_indices(len(samples), seed)
    if resume is not None:
        d = json.loads(Path(resume).read_text())
        weights = PredictorWeights.from_dict(d)
        st = d["train_state"]
        if st["seed"] != seed or st["n_records"] != len(samples):
            raise ConfigError("resume checkpoint was trained with a different seed or dataset")
        opt = _Adam.from_dict(st["adam"], expected_shapes(weights.hyper))
        report = TrainReport(**st["report"])
        start = st["epoch"]
    else:
        weights = PredictorWeights.init(hyper)
        opt = _Adam(lr)
        report = TrainReport([], [], _eval_loss(weights, samples, tr),
                             _eval_loss(weights, samples, va) if len(va) else None,
                             seed, len(tr), len(va), epochs, lr)
        start = 0
    report.epochs = epochs
    for epoch in range(start, epochs):
        rng = np.random.default_rng([seed, epoch])
        for batch in _buckets(samples, tr, batch_size, rng):
            x = np.stack([samples[i].x for i in batch])
            y = np.stack([samples[i].label for i in batch])
            value, grads = loss_and_grad(weights, x, y)
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}", report)
            opt.update(weights.params, grads)
        report.train_loss.append(_eval_loss(weights, samples, tr))
        if len(va):
            report.val_loss.append(_eval_loss(weights, samples, va))
        log.info("epoch %d train %.5f val %s", epoch, report.train_loss[-1],
                 report.val_loss[-1] if len(va) else "-")
    if checkpoint is not None:
        report.checkpoint_id = Path(checkpoint).name
        state = {"epoch": epochs, "seed": seed, "n_records": len(samples),
                 "adam": opt.to_dict(), "report": report.to_dict()}
        weights.save(checkpoint, state)
    return report, weights


# ---------------------------------------------------------------- inference

@dataclass
class MaskPrediction:
    frozen: np.ndarray
    grid: np.ndarray
    param_count: int

    @property
    def frozen_count(self) -> int:
        return int(self.frozen.size)

    def label(self) -> str:
        return format_frozen(self.frozen_count, self.param_count)


def format_frozen(frozen: int, total: int) -> str:
    return f"{frozen}/{total}"


def predict_mask(weights: PredictorWeights, spec: CircuitSpec, descriptors, tau: float) -> MaskPrediction:
    """Parameters whose predicted intensity reaches ``tau / 100``."""
    if not 0 < tau < 100:
        raise ValidationError(f"tau must lie in (0, 100), got {tau}")
    grid = forward(weights, encode(spec, descriptors))
    values = values_from_grid(grid, spec)
    return MaskPrediction(np.flatnonzero(values >= tau / 100), grid, spec.param_count)
