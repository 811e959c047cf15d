import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from titan.ansatz import build, hea_t1
from titan.cfcsa import CfcsaSample, encode
from titan.errors import ShapeError, ValidationError
from titan.predictor import (
    Hyper,
    PredictorWeights,
    backprop_check,
    expected_shapes,
    forward,
    loss,
    predict_mask,
    split_indices,
    train,
)

SMALL = Hyper(channels=4, conv_blocks=2, heads=2, head_dim=3)


def naive_forward(w, x):
    """Loop-based reference for the conv + attention + head stack."""
    hp, p = w.hyper, w.params
    h = np.asarray(x, dtype=float)  # C, L, W
    for i in range(hp.conv_blocks):
        k = p[f"conv{i}.w"]
        C, L, W = h.shape
        pad = np.zeros((C, L + 2, W + 2))
        pad[:, 1:-1, 1:-1] = h
        out = np.zeros((k.shape[0], L, W))
        for o in range(k.shape[0]):
            for r in range(L):
                for c in range(W):
                    out[o, r, c] = np.sum(k[o] * pad[:, r:r + 3, c:c + 3])
            if hp.bias:
                out[o] += p[f"conv{i}.b"][o]
        h = np.maximum(out, 0)
    tok = h.reshape(h.shape[0], -1).T
    feat = tok.copy()
    for head in range(hp.heads):
        sl = slice(head * hp.head_dim, (head + 1) * hp.head_dim)
        q, kk, v = (tok @ p[f"attn.{m}"][:, sl] for m in ("wq", "wk", "wv"))
        s = q @ kk.T / np.sqrt(hp.head_dim)
        a = np.exp(s - s.max(axis=1, keepdims=True))
        a /= a.sum(axis=1, keepdims=True)
        feat += (a @ v) @ p["attn.wo"][sl]
    return (feat @ p["head.w"] + p["head.b"][0]).reshape(x.shape[1:])


def random_sample(rng, L, N, D=2, k=3, label=None):
    x = rng.uniform(size=(3 + k, L, N * D))
    y = rng.uniform(size=(L, N * D)) if label is None else label
    return CfcsaSample(x, y, (L, N, D), x[3:, 0, 0], int(rng.integers(1 << 30)), {})


class TestShapes:
    def test_default_hyper(self):
        s = expected_shapes(Hyper())
        assert s["conv0.w"] == (32, 6, 3, 3) and s["conv3.w"] == (32, 32, 3, 3)
        assert s["attn.wq"] == (32, 32) and s["head.w"] == (32,)

    def test_any_grid_same_weights(self):
        w = PredictorWeights.init(Hyper())
        assert forward(w, np.zeros((6, 5, 10))).shape == (5, 10)
        assert forward(w, np.zeros((6, 9, 28))).shape == (9, 28)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            forward(PredictorWeights.init(Hyper()), np.zeros((5, 3, 4)))

    def test_rejects_wrong_tensor(self):
        w = PredictorWeights.init(SMALL)
        d = w.to_dict()
        d["weights"]["conv0.w"]["shape"] = [4, 6, 3, 2]
        with pytest.raises(ShapeError):
            PredictorWeights.from_dict(d)

    def test_rejects_nonfinite(self):
        w = PredictorWeights.init(SMALL)
        w.params["head.w"][0] = np.nan
        with pytest.raises(ValidationError):
            PredictorWeights(w.hyper, w.params)

    def test_checkpoint_round_trip(self, tmp_path):
        w = PredictorWeights.init(SMALL)
        w.save(tmp_path / "c.json")
        again = PredictorWeights.load(tmp_path / "c.json")
        for k in w.params:
            np.testing.assert_array_equal(w.params[k], again.params[k])


class TestForward:
    @given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 1000), st.booleans())
    def test_matches_loop_reference(self, L, W, seed, bias):
        hp = Hyper(channels=3, conv_blocks=2, heads=2, head_dim=2, bias=bias, seed=seed)
        w = PredictorWeights.init(hp)
        rng = np.random.default_rng(seed)
        for k in w.params:
            w.params[k] = rng.normal(size=w.params[k].shape)
        x = rng.normal(size=(6, L, W))
        np.testing.assert_allclose(forward(w, x, clamp=False), naive_forward(w, x), atol=1e-10)

    def test_zero_head_gives_zero(self):
        w = PredictorWeights.init(Hyper())
        w.params["head.w"][:] = 0
        x = np.random.default_rng(0).uniform(size=(6, 4, 6))
        assert not forward(w, x).any()

    def test_clamped(self):
        w = PredictorWeights.init(SMALL)
        w.params["head.b"][0] = 3.0
        assert np.all(forward(w, np.zeros((6, 2, 2))) == 1.0)

    def test_token_swap_equivariance(self):
        # without convolutions each token is processed by attention alone
        w = PredictorWeights.init(Hyper(conv_blocks=0, heads=4, head_dim=8, seed=3))
        x = np.random.default_rng(1).uniform(size=(6, 3, 4))
        y = forward(w, x, clamp=False)
        xs = x.copy()
        xs[:, [0, 2], [1, 3]] = x[:, [2, 0], [3, 1]]
        ys = forward(w, xs, clamp=False)
        assert ys[0, 1] == pytest.approx(y[2, 3], abs=1e-12)
        assert ys[2, 3] == pytest.approx(y[0, 1], abs=1e-12)

    def test_identical_tokens_identical_outputs(self):
        w = PredictorWeights.init(Hyper(conv_blocks=0, seed=5))
        x = np.random.default_rng(2).uniform(size=(6, 2, 3))
        x[:, 1, 2] = x[:, 0, 0]
        y = forward(w, x, clamp=False)
        assert y[1, 2] == pytest.approx(y[0, 0], abs=1e-12)


class TestLoss:
    def test_zero(self):
        a = np.arange(6.0).reshape(2, 3)
        assert loss(a, a) == 0.0

    def test_all_ones_difference(self):
        assert loss(np.ones((2, 3)), np.zeros((2, 3))) == 6.0

    def test_batch_mean(self):
        p = np.zeros((2, 2, 3))
        y = np.stack([np.ones((2, 3)), np.zeros((2, 3))])
        assert loss(p, y) == 3.0

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            loss(np.zeros((2, 3)), np.zeros((3, 2)))

    @given(st.integers(0, 10_000))
    def test_nonnegative_and_zero_iff_equal(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(3, 4))
        b = a.copy()
        assert loss(a, b) == 0
        b[rng.integers(3), rng.integers(4)] += 1e-3
        assert loss(a, b) > 0


class TestBackprop:
    def test_head_only_exact(self):
        w = PredictorWeights.init(Hyper(conv_blocks=0, heads=0))
        rng = np.random.default_rng(0)
        assert backprop_check(w, rng.uniform(size=(6, 3, 4)), rng.uniform(size=(3, 4))) < 1e-8

    def test_full_network(self):
        w = PredictorWeights.init(Hyper(channels=8, conv_blocks=2, heads=2, head_dim=4, seed=1))
        assert w.n_weights <= 10_000
        rng = np.random.default_rng(1)
        assert backprop_check(w, rng.uniform(size=(6, 3, 4)), rng.uniform(size=(3, 4))) < 1e-4

    def test_zero_input_bias_free(self):
        from titan.predictor import loss_and_grad

        w = PredictorWeights.init(Hyper(channels=4, conv_blocks=2, heads=2, head_dim=2, bias=False))
        _, g = loss_and_grad(w, np.zeros((6, 3, 3)), np.ones((3, 3)))
        assert not g["conv0.w"].any() and not g["conv1.w"].any()


class TestTrain:
    def test_overfit_one_sample(self):
        s = random_sample(np.random.default_rng(4), 3, 3)
        rep, _ = train([s], hyper=Hyper(in_channels=6), epochs=200)
        assert rep.train_loss[-1] < 1e-3
        assert rep.val_loss == [] and rep.n_val == 0

    def test_split(self):
        tr, va = split_indices(200, 3)
        assert len(va) == 40 and len(tr) == 160 and not set(tr) & set(va)
        assert np.array_equal(split_indices(200, 3)[1], va)

    def test_deterministic_and_resumable(self, tmp_path):
        rng = np.random.default_rng(6)
        data = [random_sample(rng, L, N) for L, N in [(2, 2), (2, 2), (3, 2), (2, 3), (2, 2), (3, 2)]]
        hp = SMALL
        a, wa = train(data, hyper=hp, epochs=6, seed=2)
        b, wb = train(data, hyper=hp, epochs=6, seed=2)
        assert a == b
        train(data, hyper=hp, epochs=3, seed=2, checkpoint=tmp_path / "half.json")
        c, wc = train(data, hyper=hp, epochs=6, seed=2, resume=tmp_path / "half.json")
        assert c.train_loss == a.train_loss and c.val_loss == a.val_loss
        for k in wa.params:
            np.testing.assert_array_equal(wa.params[k], wc.params[k])
            np.testing.assert_array_equal(wa.params[k], wb.params[k])
        assert all(np.isfinite(v) and v >= 0 for v in a.train_loss + a.val_loss)

    def test_empty(self):
        with pytest.raises(ValidationError):
            train([])

    def test_checkpoint_has_state(self, tmp_path):
        s = random_sample(np.random.default_rng(0), 2, 2)
        train([s], hyper=SMALL, epochs=1, checkpoint=tmp_path / "c.json")
        d = json.loads((tmp_path / "c.json").read_text())
        assert d["hyper"]["channels"] == 4 and d["train_state"]["epoch"] == 1


class TestPredictMask:
    def test_no_freezing_near_hundred(self):
        w = PredictorWeights.init(Hyper(seed=1))
        w.params["head.b"][0] = -5.0  # every intensity clamps to 0
        spec = hea_t1(4, 3)
        assert predict_mask(w, spec, [0.5] * 3, 99.999).frozen_count == 0

    def test_all_frozen_label(self):
        w = PredictorWeights.init(Hyper(seed=1))
        w.params["head.w"][:] = 0
        w.params["head.b"][0] = 0.95
        spec = hea_t1(5, 5)
        m = predict_mask(w, spec, [0.5] * 3, 80)
        assert m.label() == "50/50"
        assert predict_mask(w, spec, [0.5] * 3, 96).label() == "0/50"

    @pytest.mark.parametrize("tau", [0, 100, -3])
    def test_tau_range(self, tau):
        with pytest.raises(ValidationError):
            predict_mask(PredictorWeights.init(SMALL), hea_t1(2, 1), [0.5] * 3, tau)

    def test_uses_parameter_cell(self):
        w = PredictorWeights.init(Hyper(conv_blocks=0, heads=0))
        w.params["head.w"][:] = 0
        w.params["head.w"][2] = 1.0  # intensity = normalised qubit coordinate
        spec = hea_t1(3, 2)
        m = predict_mask(w, spec, [0.5] * 3, 90)
        assert sorted(m.frozen) == [i for i, (_, _, q) in enumerate(spec.coords) if q == 2]

    @given(st.sampled_from(["HEA", "HEA_T1", "SU2", "SEL"]), st.integers(2, 6), st.integers(1, 5),
           st.floats(1, 99), st.floats(1, 99))
    def test_monotone(self, family, n, layers, t1, t2):
        w = PredictorWeights.init(Hyper(channels=8, conv_blocks=1, heads=1, seed=7))
        spec = build(family, n, layers)
        lo, hi = sorted((t1, t2))
        a = set(predict_mask(w, spec, [0.2, 0.4, 0.9], lo).frozen)
        b = set(predict_mask(w, spec, [0.2, 0.4, 0.9], hi).frozen)
        assert b <= a
        assert encode(spec, [0.2, 0.4, 0.9]).shape[1:] == m_grid(spec)


def m_grid(spec):
    L, N, D = spec.grid
    return (L, N * D)
