import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from titan.ansatz import build, hea_t1, unstructured
from titan.errors import ArityError, UnsupportedGateError
from titan.gradient import (
    EvalCounter,
    energy,
    energy_and_gradient,
    finite_difference_gradient,
    parameter_shift_gradient,
)
from titan.hamiltonian import Hamiltonian, exact_ground_energy, hamiltonian_from_terms, heisenberg
from titan.initializer import InitSpec, init_params, sample_twirl
from titan.simulator import Gate

Z0 = hamiltonian_from_terms(1, [(1.0, {0: "Z"})])
RY1 = unstructured([Gate("RY", (0,), param=0)])


def test_single_ry_energy():
    c = EvalCounter()
    assert energy(RY1, [0.0], Z0, c) == pytest.approx(1.0)
    assert energy(RY1, [np.pi], Z0, c) == pytest.approx(-1.0)
    assert c.energy_evals == 2 and c.shift_evals == 0


@pytest.mark.parametrize("theta,expected", [(0.0, 0.0), (np.pi / 2, -1.0), (1.1, -np.sin(1.1))])
def test_single_ry_gradient(theta, expected):
    assert parameter_shift_gradient(RY1, [theta], Z0).values[0] == pytest.approx(expected, abs=1e-14)


def test_finite_difference_analytic():
    assert finite_difference_gradient(RY1, [np.pi / 2], Z0, 1e-4).values[0] == pytest.approx(-1.0, abs=1e-7)


def test_zero_hamiltonian_zero_gradient():
    spec = hea_t1(3, 2)
    H = Hamiltonian(3, ())
    th = np.random.default_rng(0).normal(size=spec.param_count)
    assert not finite_difference_gradient(spec, th, H).values.any()
    assert not parameter_shift_gradient(spec, th, H).values.any()


def test_energy_above_ground():
    spec = hea_t1(5, 5, sample_twirl(5, 0))
    H = heisenberg(5, 1, 1, 1)
    e0 = exact_ground_energy(H).energy
    for seed in range(5):
        assert energy(spec, init_params(spec, InitSpec(seed=seed)), H) >= e0 - 1e-8


def test_arity():
    with pytest.raises(ArityError):
        energy(hea_t1(2, 1), np.zeros(3), heisenberg(2, 1, 1, 1))
    with pytest.raises(ArityError):
        parameter_shift_gradient(hea_t1(2, 1), np.zeros(4), heisenberg(2, 1, 1, 1), active_mask=[1, 0])


def test_unsupported_generator():
    from titan.ansatz import CircuitSpec

    odd = Gate("FIXED1Q", (0,), matrix=np.eye(2), param=0)
    spec = CircuitSpec(1, 1, 1, (odd,), ((0, 0, 0),), "UNSTRUCTURED")
    with pytest.raises(UnsupportedGateError):
        parameter_shift_gradient(spec, np.zeros(1), Z0)


@given(st.sampled_from(["HEA", "HEA_T1", "SU2", "SEL"]), st.integers(2, 4), st.integers(1, 2),
       st.integers(0, 2**32 - 1))
def test_shift_matches_finite_difference(family, n, l, seed):
    spec = build(family, n, l, sample_twirl(n, seed) if family == "HEA_T1" else None)
    rng = np.random.default_rng(seed)
    H = heisenberg(n, *rng.normal(size=3))
    th = rng.uniform(-np.pi, np.pi, spec.param_count)
    ps = parameter_shift_gradient(spec, th, H).values
    fd = finite_difference_gradient(spec, th, H).values
    assert np.max(np.abs(ps - fd)) < 1e-6


@given(st.integers(2, 4), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_masked_gradient_and_counter(n, l, seed):
    spec = hea_t1(n, l, sample_twirl(n, seed))
    rng = np.random.default_rng(seed)
    H = heisenberg(n, 1.0, 0.5, -0.7)
    th = rng.normal(size=spec.param_count)
    mask = rng.integers(0, 2, spec.param_count)
    c = EvalCounter()
    g = parameter_shift_gradient(spec, th, H, mask, c)
    full = parameter_shift_gradient(spec, th, H).values
    assert g.mask_applied
    assert np.all(g.values[mask == 0] == 0)
    np.testing.assert_allclose(g.values[mask == 1], full[mask == 1], atol=1e-13)
    assert c.shift_evals == 2 * int(mask.sum()) and c.energy_evals == 0
    c2 = EvalCounter()
    e, g2 = energy_and_gradient(spec, th, H, mask, c2)
    assert e == pytest.approx(energy(spec, th, H), abs=1e-13)
    np.testing.assert_array_equal(g2.values, g.values)
    assert (c2.energy_evals, c2.shift_evals) == (1, 2 * int(mask.sum()))


def test_unforked_fallback_agrees(monkeypatch):
    import titan.gradient as gr

    spec = hea_t1(4, 2, sample_twirl(4, 2))
    H = heisenberg(4, 1, 1, 1)
    th = np.random.default_rng(9).normal(size=spec.param_count)
    forked = gr.parameter_shift_gradient(spec, th, H).values
    monkeypatch.setattr(gr, "_MAX_BATCH_ELEMENTS", 64)
    np.testing.assert_allclose(gr.parameter_shift_gradient(spec, th, H).values, forked, atol=1e-13)
