import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from titan.ansatz import hea_t1, unstructured
from titan.apfa import (
    ApfaConfig,
    ApfaTrajectory,
    apfa_run,
    audit_trajectory,
    baseline_run,
    decode_mask_rows,
    ema_update,
    encode_mask_rows,
    freeze_intensity,
    mask_update,
    random_freeze_run,
    thresholds,
)
from titan.errors import ConfigError, DivergenceError, ValidationError
from titan.hamiltonian import exact_ground_energy, hamiltonian_from_terms, heisenberg
from titan.initializer import InitSpec, sample_twirl
from titan.simulator import Gate

SMALL = hea_t1(3, 2, sample_twirl(3, 1))
H3 = heisenberg(3, 1, 1, 1)
NO_FREEZE = dict(noise_std=0.0, lambda_f_min=1e-9, lambda_f_max=2e-9)


class TestConfig:
    @pytest.mark.parametrize("bad", [
        {"alpha": 1.0}, {"alpha": 0.0}, {"noise_std": -1}, {"epsilon": 0},
        {"lambda_f_min": 0.5, "lambda_f_max": 0.4}, {"lambda_f_max": 1.2},
        {"lambda_a_min": 1.0}, {"lambda_a_min": 3.5}, {"n_freeze_patience": 0},
        {"eta": 0}, {"max_iters": 0},
    ])
    def test_rejects(self, bad):
        with pytest.raises(ConfigError):
            ApfaConfig(**bad)

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ApfaConfig.from_dict({"alpah": 0.9})

    def test_defaults(self):
        c = ApfaConfig()
        assert (c.alpha, c.noise_std, c.n_freeze_patience, c.n_activate_patience, c.eta, c.max_iters) == \
            (0.9, 0.01, 5, 3, 0.05, 300)


class TestEma:
    def test_first_step(self):
        assert ema_update(np.zeros(1), np.ones(1), 0.9)[0] == pytest.approx(0.1)

    def test_fixed_point(self):
        e = np.zeros(3)
        for _ in range(400):
            e = ema_update(e, np.full(3, 0.7), 0.9)
        np.testing.assert_allclose(e, 0.7, rtol=1e-12)

    def test_alpha_zero(self):
        g = np.array([0.3, 2.0])
        np.testing.assert_array_equal(ema_update(np.ones(2), g, 0.0), g)

    def test_inactive_held(self):
        out = ema_update(np.array([1.0, 1.0]), np.array([0.0, 0.0]), 0.5, active=[1, 0])
        np.testing.assert_array_equal(out, [0.5, 1.0])

    @given(hnp.arrays(float, 5, elements=st.floats(0, 10)), hnp.arrays(float, 5, elements=st.floats(0, 10)),
           st.floats(0, 0.99))
    def test_non_negative(self, ema, g, alpha):
        assert np.all(ema_update(ema, g, alpha) >= 0)


class TestThresholds:
    def test_start_uses_minimum_lambdas(self):
        c = ApfaConfig()
        th = thresholds(2.0, 2.0, np.array([1.0, 3.0]), c)
        assert th.lambda_f == pytest.approx(c.lambda_f_min, rel=1e-7)
        assert th.lambda_a == pytest.approx(c.lambda_a_min, rel=1e-7)
        assert th.tau_f == pytest.approx(c.lambda_f_min * 2.0, rel=1e-7)

    def test_zero_ratio_uses_maximum(self):
        c = ApfaConfig()
        th = thresholds(0.0, 2.0, np.ones(2), c)
        assert th.r == 0 and th.lambda_f == c.lambda_f_max and th.lambda_a == c.lambda_a_max

    @given(st.floats(0, 100), st.floats(0, 100), hnp.arrays(float, 4, elements=st.floats(0, 10)))
    def test_ratio_clamped_and_tau_ratio(self, g, g0, ema):
        th = thresholds(g, g0, ema, ApfaConfig())
        assert 0 <= th.r <= 1
        if th.tau_f > 0:
            assert th.tau_a / th.tau_f == pytest.approx(th.lambda_a)


class TestMaskUpdate:
    cfg = ApfaConfig(n_freeze_patience=3, n_activate_patience=2)

    def step(self, ema, mask, cf, ca, tf=1.0, ta=2.0):
        return mask_update(np.array(ema, float), np.array(mask, np.uint8), np.array(cf), np.array(ca), tf, ta, self.cfg)

    def test_freezes_on_nth_low_step(self):
        mask, cf, ca = np.ones(1, np.uint8), np.zeros(1, int), np.zeros(1, int)
        for k in range(3):
            mask, cf, ca = mask_update(np.array([0.5]), mask, cf, ca, 1.0, 2.0, self.cfg)
            assert mask[0] == (0 if k == 2 else 1)
        assert cf[0] == 0 and ca[0] == 0

    def test_between_thresholds_resets(self):
        mask, cf, ca = self.step([1.5], [1], [2], [1])
        assert mask[0] == 1 and cf[0] == 0 and ca[0] == 0

    def test_reactivation(self):
        mask, cf, ca = np.zeros(1, np.uint8), np.zeros(1, int), np.zeros(1, int)
        for k in range(2):
            mask, cf, ca = mask_update(np.array([3.0]), mask, cf, ca, 1.0, 2.0, self.cfg)
        assert mask[0] == 1

    @given(st.lists(st.tuples(hnp.arrays(float, 4, elements=st.floats(0, 3)), st.floats(0.1, 1.5)),
                    min_size=1, max_size=30))
    def test_flips_only_after_patience(self, steps):
        mask = np.ones(4, np.uint8)
        cf, ca = np.zeros(4, int), np.zeros(4, int)
        low, high = np.zeros(4, int), np.zeros(4, int)
        for ema, tf in steps:
            ta = 2 * tf
            low = np.where(ema < tf, low + 1, 0)
            high = np.where(ema > ta, high + 1, 0)
            new, cf, ca = mask_update(ema, mask, cf, ca, tf, ta, self.cfg)
            froze = (mask == 1) & (new == 0)
            woke = (mask == 0) & (new == 1)
            assert np.all(low[froze] >= self.cfg.n_freeze_patience)
            assert np.all(high[woke] >= self.cfg.n_activate_patience)
            assert np.all(cf >= 0) and np.all(ca >= 0)
            mask = new


class TestRuns:
    def test_freezing_disabled_equals_baseline(self):
        init = InitSpec(seed=3)
        cfg = ApfaConfig(max_iters=40, n_freeze_patience=1000, **NO_FREEZE)
        a = apfa_run(SMALL, H3, init, cfg)
        b = baseline_run(SMALL, H3, init, cfg.eta, cfg.max_iters)
        np.testing.assert_array_equal(a.energies, b.energies)
        np.testing.assert_array_equal(a.theta_final, b.theta_final)
        np.testing.assert_array_equal(a.masks, b.masks)
        assert a.counter == b.counter

    def test_deterministic(self):
        cfg = ApfaConfig(max_iters=30)
        a, b = apfa_run(SMALL, H3, InitSpec(seed=1), cfg), apfa_run(SMALL, H3, InitSpec(seed=1), cfg)
        assert a.to_json() == b.to_json()

    def test_trajectory_invariants_and_audit(self):
        cfg = ApfaConfig(max_iters=80, lambda_f_min=0.3, lambda_f_max=0.9)
        tr = apfa_run(SMALL, H3, InitSpec(seed=2), cfg)
        T, P = cfg.max_iters, SMALL.param_count
        assert tr.masks.shape == (T + 1, P) and tr.energies.shape == (T + 1,)
        np.testing.assert_array_equal(tr.cumulative, tr.masks.sum(0))
        assert np.all((0 <= tr.cumulative) & (tr.cumulative <= T + 1))
        assert tr.counter.shift_evals == 2 * int(tr.masks.sum())
        assert tr.counter.energy_evals == T + 1
        assert np.all(tr.ema >= 0)
        assert audit_trajectory(tr, cfg) == []
        assert 0 < tr.mean_frozen_fraction < 1

    def test_audit_catches_tampering(self):
        cfg = ApfaConfig(max_iters=30)
        tr = apfa_run(SMALL, H3, InitSpec(seed=2), cfg)
        tr.masks[10, 0] ^= 1
        assert audit_trajectory(tr, cfg)

    def test_frozen_coordinates_static(self):
        from titan.apfa import fixed_mask_run

        tr = fixed_mask_run(SMALL, H3, InitSpec(seed=0), [1, 4], 0.05, 20)
        assert tr.theta_final[1] == tr.theta0[1] and tr.theta_final[4] == tr.theta0[4]
        assert tr.theta_final[0] != tr.theta0[0]

    def test_json_round_trip(self):
        tr = apfa_run(SMALL, H3, InitSpec(seed=2), ApfaConfig(max_iters=25))
        again = ApfaTrajectory.from_json(tr.to_json())
        np.testing.assert_array_equal(again.masks, tr.masks)
        np.testing.assert_array_equal(again.energies, tr.energies)
        np.testing.assert_array_equal(again.ema, tr.ema)
        assert again.to_json() == tr.to_json()

    def test_heisenberg_five_reaches_ten_percent(self):
        spec = hea_t1(5, 5, sample_twirl(5, 3))
        H = heisenberg(5, 1, 1, 1)
        e0 = exact_ground_energy(H).energy
        tr = apfa_run(spec, H, InitSpec(seed=1), ApfaConfig())
        assert abs(tr.final_energy - e0) / abs(e0) < 0.10

    def test_divergence(self):
        H = hamiltonian_from_terms(1, [(1.0, {0: "Z"})])
        spec = unstructured([Gate("RY", (0,), param=0)])
        with pytest.raises(DivergenceError) as info:
            apfa_run(spec, H, np.array([np.nan]), ApfaConfig(max_iters=5))
        assert info.value.partial.masks.shape[0] == 1


class TestBaselines:
    def test_baseline_all_ones(self):
        tr = baseline_run(SMALL, H3, InitSpec(seed=0), 0.05, 15)
        assert tr.masks.all()
        assert np.all(tr.cumulative == 16)
        assert not freeze_intensity(tr).any()

    def test_cosine_landscape_monotone(self):
        H = hamiltonian_from_terms(1, [(1.0, {0: "Z"})])
        spec = unstructured([Gate("RY", (0,), param=0)])
        tr = baseline_run(spec, H, np.array([2.5]), 0.1, 100)
        assert np.all(np.diff(tr.energies) <= 1e-15)

    def test_random_zero_equals_baseline(self):
        a = random_freeze_run(SMALL, H3, InitSpec(seed=4), 0, 0.05, 10, seed=9)
        b = baseline_run(SMALL, H3, InitSpec(seed=4), 0.05, 10)
        np.testing.assert_array_equal(a.energies, b.energies)

    def test_random_all_frozen(self):
        tr = random_freeze_run(SMALL, H3, InitSpec(seed=4), SMALL.param_count, 0.05, 10, seed=9)
        assert np.all(tr.energies == tr.energies[0]) and tr.counter.shift_evals == 0

    def test_random_eval_accounting(self):
        F, T = 5, 12
        tr = random_freeze_run(SMALL, H3, InitSpec(seed=4), F, 0.05, T, seed=1)
        assert tr.counter.shift_evals == (T + 1) * 2 * (SMALL.param_count - F)
        assert (tr.masks[0] == 0).sum() == F

    def test_random_too_many(self):
        with pytest.raises(ValidationError):
            random_freeze_run(SMALL, H3, InitSpec(), SMALL.param_count + 1, 0.05, 5, seed=0)


class TestIntensity:
    def test_half_frozen(self):
        masks = np.ones((10, 2), np.uint8)
        masks[5:, 1] = 0
        tr = ApfaTrajectory(masks, np.zeros(10), np.zeros(10), None, np.zeros(2), np.zeros(2))
        np.testing.assert_allclose(freeze_intensity(tr), [0.0, 0.5])

    @given(hnp.arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 6)), elements=st.integers(0, 1)))
    def test_range_and_rle(self, masks):
        tr = ApfaTrajectory(masks, np.zeros(len(masks)), np.zeros(len(masks)), None, np.zeros(masks.shape[1]),
                            np.zeros(masks.shape[1]))
        f = freeze_intensity(tr)
        assert np.all((0 <= f) & (f <= 1))
        np.testing.assert_array_equal(decode_mask_rows(encode_mask_rows(masks)), masks)
