import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from titan.ansatz import hea_t1
from titan.errors import ConfigError, ValidationError
from titan.hamiltonian import Hamiltonian
from titan.initializer import (
    SCAN_COLUMNS,
    TWIRL_SET,
    InitSpec,
    grad_variance_scan,
    gradient_samples,
    init_params,
    sample_params,
    sample_twirl,
    twirl_indices,
    write_scan_csv,
)


def test_twirl_set_unitary_and_distinct():
    assert len(TWIRL_SET) == 6
    for m in TWIRL_SET:
        np.testing.assert_allclose(m.conj().T @ m, np.eye(2), atol=1e-12)
    for i in range(6):
        for j in range(i):
            assert not np.allclose(TWIRL_SET[i], TWIRL_SET[j])


def test_twirl_set_elements():
    c, s = np.cos(np.pi / 8), np.sin(np.pi / 8)
    rz = np.diag([np.exp(-1j * np.pi / 8), np.exp(1j * np.pi / 8)])
    np.testing.assert_allclose(TWIRL_SET[0], rz, atol=1e-15)
    ry = np.array([[c, -s], [s, c]])
    rx = np.array([[c, -1j * s], [-1j * s, c]])
    np.testing.assert_allclose(TWIRL_SET[2], ry @ rx, atol=1e-15)


def test_sample_twirl_deterministic():
    a, b = sample_twirl(5, 3), sample_twirl(5, 3)
    assert [g.targets for g in a] == [(q,) for q in range(5)]
    assert all(np.array_equal(x.matrix, y.matrix) for x, y in zip(a, b))


def test_twirl_frequencies():
    counts = np.bincount(twirl_indices(6000, 11), minlength=6)
    assert np.all(np.abs(counts - 1000) <= 120)


class TestInitParams:
    def test_zero(self):
        assert not init_params(hea_t1(5, 5), InitSpec("ZERO")).any()

    def test_enhanced_variance(self):
        x = sample_params("ENHANCED_GAUSS", 100_000, 4, np.random.default_rng(0))
        assert abs(np.var(x) - 0.25) < 0.01

    @given(st.integers(1, 20), st.floats(0.1, 5))
    def test_enhanced_variance_within_five_percent(self, L, c):
        x = sample_params("ENHANCED_GAUSS", 100_000, L, np.random.default_rng(L), c_coeff=c)
        assert abs(np.var(x) / (c / L) - 1) < 0.05

    def test_uniform_range(self):
        x = init_params(hea_t1(6, 6), InitSpec("UNIFORM", seed=4))
        assert x.min() >= 0 and x.max() < 2 * np.pi

    def test_plain_gauss_needs_variance(self):
        with pytest.raises(ConfigError):
            InitSpec("PLAIN_GAUSS")
        with pytest.raises(ConfigError):
            sample_params("PLAIN_GAUSS", 3, 1, np.random.default_rng(0))

    def test_unknown_scheme(self):
        with pytest.raises(ConfigError):
            InitSpec("XAVIER")

    @given(st.sampled_from(["ENHANCED_GAUSS", "UNIFORM", "ZERO"]), st.integers(0, 1000))
    def test_deterministic(self, scheme, seed):
        spec = hea_t1(3, 2)
        np.testing.assert_array_equal(init_params(spec, InitSpec(scheme, seed=seed)),
                                      init_params(spec, InitSpec(scheme, seed=seed)))


class TestScan:
    def test_reproducible(self):
        a = grad_variance_scan(3, [2, 4], InitSpec(seed=2), 120, n_boot=50)
        b = grad_variance_scan(3, [2, 4], InitSpec(seed=2), 120, n_boot=50)
        assert a == b
        for r in a:
            assert np.isfinite(r.variance) and r.variance >= 0 and r.ci_low <= r.variance <= r.ci_high

    def test_needs_samples(self):
        with pytest.raises(ConfigError):
            grad_variance_scan(3, [2], InitSpec(), 50)

    def test_zero_observable(self):
        with pytest.raises(ValidationError):
            gradient_samples(3, 2, InitSpec(), 10, observable=Hamiltonian(3, ()))

    def test_samples_match_parameter_shift(self):
        # one sample redone through the public single-circuit path
        from titan.gradient import parameter_shift_gradient
        from titan.initializer import default_observable, scan_coordinate
        from titan.simulator import Gate

        n, L, init = 3, 2, InitSpec(seed=5)
        g = gradient_samples(n, L, init, 1)
        rng = np.random.default_rng([init.seed, n, L])
        tw = rng.integers(0, 6, size=(1, n))
        th = sample_params(init.scheme, (1, 2 * n * L), L, rng)
        spec = hea_t1(n, L, [Gate("FIXED1Q", (q,), matrix=TWIRL_SET[i]) for q, i in enumerate(tw[0])])
        ref = parameter_shift_gradient(spec, th[0], default_observable(n)).values[scan_coordinate(n, L)]
        assert g[0] == pytest.approx(ref, abs=1e-13)

    def test_csv_schema(self, tmp_path):
        rows = grad_variance_scan(3, [2], InitSpec(), 100, n_boot=20)
        p = tmp_path / "scan.csv"
        write_scan_csv(rows, p, "config: test")
        lines = p.read_text().splitlines()
        assert lines[0].startswith("#")
        assert next(csv.reader(lines[1:])) == list(SCAN_COLUMNS)
        assert ",".join(SCAN_COLUMNS) == "L,variance,ci_low,ci_high,scheme,n,samples,seed"
