import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from biresnet.motorsim import (
    CHANNELS,
    FaultClass,
    FaultSpec,
    MachineParams,
    SimConfig,
    apply_fault,
    currents_from_flux,
    derivative,
    draw_fault,
    flux_from_currents,
    generate_dataset,
    inverse_park,
    park,
    record_jitter,
    rk4_step,
    simulate_batch,
    simulate_experiment,
    steady_state,
)
from biresnet.nncore import NumericalError


def eq6_oracle(state, inputs, p):
    """Term-by-term transcription of the machine equations with plain floats."""
    theta, w, ld, lq, l0, lf = map(float, state)
    vd, vq, v0, vf = map(float, inputs)
    w_s = 2 * math.pi * p.f
    sigma = (p.P / 2) ** 2 / (p.J * w_s)
    beta = 2 * p.L_d * p.L_ff - 3 * p.L_af ** 2
    dw = sigma * (3 * p.P_ref - (w - w_s) / p.D
                  + (3 * beta * w_s - 6 * p.L_ff * p.L_q * w_s) / (2 * beta * p.L_q) * ld * lq
                  + 3 * p.L_af * w_s / beta * lq * lf)
    return [
        w,
        dw,
        -2 * p.R_a * p.L_ff / beta * ld + w * lq + 2 * p.R_a * p.L_af / beta * lf + vd,
        -w * ld - p.R_a / p.L_q * lq + vq,
        -p.R_a / p.L_0 * l0 + v0,
        3 * p.R_f * p.L_af / beta * ld - 2 * p.R_f * p.L_d / beta * lf + vf,
    ]


# --- parameters -------------------------------------------------------------

def test_default_params_valid(machine):
    assert machine.beta > 0
    assert machine.w_s == pytest.approx(2 * math.pi * 50)
    assert machine.sigma == pytest.approx(4 / (0.011 * machine.w_s))
    assert MachineParams.from_dict(machine.to_dict()) == machine


def test_invalid_params_rejected(machine):
    with pytest.raises(ValueError):
        machine.replace(L_af=0.22)   # beta < 0
    with pytest.raises(ValueError):
        machine.replace(J=-1.0)


# --- park -----------------------------------------------------------------

def test_park_balanced_set(rng):
    theta = rng.uniform(0, 2 * np.pi, 10)
    V = 70.0
    abc = np.stack([V * np.cos(theta), V * np.cos(theta - 2 * np.pi / 3), V * np.cos(theta + 2 * np.pi / 3)], -1)
    np.testing.assert_allclose(park(abc, theta), np.tile([V, 0, 0], (10, 1)), atol=1e-12)


def test_park_zero_sequence():
    np.testing.assert_allclose(park([1.0, 1.0, 1.0], 0.7), [0, 0, 1], atol=1e-15)


@given(arrays(np.float64, 3, elements=st.floats(-100, 100)), st.floats(-10, 10))
@settings(max_examples=200)
def test_park_round_trip(abc, theta):
    np.testing.assert_allclose(inverse_park(park(abc, theta), theta), abc, atol=1e-12)


# --- flux/current maps -----------------------------------------------------

def test_currents_decoupled_limit(machine):
    # L_af must stay positive, so approach the uncoupled limit instead
    p = machine.replace(L_af=1e-12)
    cur = currents_from_flux([0, 0, 0.3, 0.2, 0.1, 0.9], p)
    np.testing.assert_allclose(cur, [0.3 / p.L_d, 0.2 / p.L_q, 0.1 / p.L_0, 0.9 / p.L_ff], rtol=1e-10)


def test_currents_zero_flux(machine):
    assert not currents_from_flux(np.zeros(6), machine).any()


@given(arrays(np.float64, 4, elements=st.floats(-50, 50)))
def test_currents_invert_linkage(currents):
    p = MachineParams()
    i_d, i_q, i_0, i_f = currents
    ld, lq, l0, lf = flux_from_currents(i_d, i_q, i_0, i_f, p)
    back = currents_from_flux(np.array([0, 0, ld, lq, l0, lf]), p)
    np.testing.assert_allclose(back, currents, atol=1e-12 * (1 + np.abs(currents).max()))


# --- derivative --------------------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_derivative_matches_transcription(seed, machine):
    g = np.random.default_rng(seed)
    state = g.standard_normal(6) * [3, 300, 1, 1, 1, 1]
    inputs = g.standard_normal(4) * 50
    got = derivative(state, inputs, machine)
    want = eq6_oracle(state, inputs, machine)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12 * np.max(np.abs(want)))


def test_derivative_damping_sign(machine):
    p = machine.replace(P_ref=1e-12)
    for w in (machine.w_s * 1.1, machine.w_s * 0.9):
        d = derivative([0, w, 0, 0, 0, 0], np.zeros(4), p)
        assert not d[2:].any()
        assert np.sign(d[1]) == -np.sign(w - machine.w_s)
        assert d[1] == pytest.approx(-p.sigma * (w - p.w_s) / p.D, rel=1e-9)


def test_derivative_literal_l0_form(machine):
    state = np.array([0, 300.0, 0, 0.5, 0.2, 0])
    d = derivative(state, np.zeros(4), machine)
    lit = derivative(state, np.zeros(4), machine, eq6_literal=True)
    assert d[4] == pytest.approx(-machine.R_a / machine.L_0 * 0.2)
    assert lit[4] == pytest.approx(-machine.R_a / machine.L_0 * 0.5)


def test_derivative_nonfinite_raises(machine):
    with pytest.raises(NumericalError):
        derivative([0, np.nan, 0, 0, 0, 0], np.zeros(4), machine)


# --- rk4 -------------------------------------------------------------------

def test_rk4_taylor_value():
    y = rk4_step(lambda t, y: -y, 0.0, np.array([1.0]), 0.1)
    assert y[0] == pytest.approx(1 - 0.1 + 0.01 / 2 - 0.001 / 6 + 0.0001 / 24, abs=1e-15)
    assert y[0] == pytest.approx(0.90483750, abs=5e-9)


def test_rk4_zero_field():
    y = np.array([1.0, -2.0])
    assert np.array_equal(rk4_step(lambda t, y: np.zeros_like(y), 0.0, y, 0.1), y)
    with pytest.raises(ValueError):
        rk4_step(lambda t, y: y, 0.0, y, 0.0)


def lambda0_error(machine, h, t_end=0.1, l0=0.05):
    state = np.array([0.0, machine.w_s, 0.0, 0.0, l0, 0.0])
    f = lambda t, y: derivative(y, np.zeros(4), machine) * np.array([0, 0, 0, 0, 1, 0])
    for k in range(int(round(t_end / h))):
        state = rk4_step(f, k * h, state, h)
    return abs(state[4] - l0 * math.exp(-machine.R_a / machine.L_0 * t_end))


def test_lambda0_closed_form(machine):
    assert lambda0_error(machine, 1e-4) < 1e-8


def test_rk4_order_four(machine):
    ratio = lambda0_error(machine, 1e-3) / lambda0_error(machine, 5e-4)
    assert 14 <= ratio <= 18


# --- faults ------------------------------------------------------------------

V_ABC = np.array([1.0, -0.5, -0.5])


@pytest.mark.parametrize("cls", list(FaultClass))
def test_no_change_before_onset(cls):
    v, vf, i = apply_fault(0.1, FaultSpec(cls, 0.5, 0.3), V_ABC, 1.5, V_ABC)
    assert np.array_equal(v, V_ABC) and vf == 1.5 and np.array_equal(i, V_ABC)


@pytest.mark.parametrize("cls, v_exp, vf_exp, ia_exp", [
    (FaultClass.REVD, V_ABC, 0.0, 1.0),
    (FaultClass.VREC, V_ABC, 1.5 * 1.3, 1.0),
    (FaultClass.PSC1, [0.0, -0.5, -0.5], 1.5, 1.0),
    (FaultClass.PSC2, [0.25, 0.25, -0.5], 1.5, 1.0),
    (FaultClass.OP, [0.0, -0.5, -0.5], 1.5, 0.0),
    (FaultClass.NF, V_ABC, 1.5, 1.0),
])
def test_fault_effects(cls, v_exp, vf_exp, ia_exp):
    t_f = float("inf") if cls == FaultClass.NF else 0.5
    v, vf, i = apply_fault(0.6, FaultSpec(cls, t_f, 0.3 if cls == FaultClass.VREC else 0.0), V_ABC, 1.5, V_ABC)
    np.testing.assert_allclose(v, v_exp)
    assert vf == pytest.approx(vf_exp)
    assert i[0] == ia_exp


def test_fault_spec_validation():
    assert math.isinf(FaultSpec(FaultClass.NF).t_f)
    with pytest.raises(ValueError):
        FaultSpec(FaultClass.REVD, 0.9)
    with pytest.raises(ValueError):
        FaultSpec(FaultClass.OP, math.inf)
    with pytest.raises(ValueError):
        FaultClass.parse("XYZ")
    assert FaultClass.parse("2PSC") == FaultClass.PSC2
    assert [c.label for c in FaultClass] == ["REVD", "OP", "VREC", "2PSC", "1PSC", "NF"]


@pytest.mark.parametrize("seed", range(50))
def test_jitter_ranges(seed):
    j = record_jitter(seed)
    assert 0 <= j.phase < 2 * math.pi and 0.9 <= j.p_ref_scale <= 1.1 and 0.2 <= j.t_f <= 0.8
    assert 0.2 <= abs(j.vrec_magnitude) <= 0.5
    assert draw_fault(FaultClass.OP, seed).t_f == j.t_f


# --- simulation ----------------------------------------------------------------

def test_steady_state_is_equilibrium(machine):
    delta, rest = steady_state(machine)
    state = np.concatenate([[0.3 - delta], rest])
    abc = machine.V * np.cos(0.3 + np.array([0, -2 * np.pi / 3, 2 * np.pi / 3]))
    inputs = np.concatenate([park(abc, state[0]), [machine.v_f_nom]])
    d = derivative(state, inputs, machine)
    assert d[0] == pytest.approx(machine.w_s)
    np.testing.assert_allclose(d[1:], 0, atol=1e-9 * machine.w_s)


@pytest.fixture(scope="module")
def seed_runs(machine):
    sim = SimConfig(duration=0.6)
    seed = 77
    faults = [draw_fault(c, seed) for c in FaultClass]
    data = simulate_batch(machine, faults, [seed] * len(faults), sim)
    return faults, data, sim


def test_pre_fault_bit_equality(seed_runs):
    faults, data, sim = seed_runs
    nf = data[FaultClass.NF]
    for f, rec in zip(faults, data):
        if f.fault_class == FaultClass.NF:
            continue
        pre = np.arange(rec.shape[1]) * sim.sample_period < f.t_f
        assert pre.sum() > 0
        assert np.array_equal(rec[:, pre], nf[:, pre])
        assert not np.array_equal(rec[:, ~pre], nf[:, ~pre])


def test_op_zeroes_measured_current(seed_runs):
    faults, data, sim = seed_runs
    rec = data[FaultClass.OP]
    post = np.arange(rec.shape[1]) * sim.sample_period >= faults[FaultClass.OP].t_f
    assert not rec[3, post].any() and rec[3, ~post].any()


def test_batch_equals_single(machine):
    sim = SimConfig(duration=0.05)
    f = draw_fault(FaultClass.PSC1, 5)
    single = simulate_experiment(machine, f, 5, sim)
    batch = simulate_batch(machine, [draw_fault(FaultClass.NF, 9), f], [9, 5], sim)
    assert np.array_equal(single.data, batch[1])
    assert single.data.shape == (len(CHANNELS), 50)


def test_nf_speed_settles(machine):
    rec = simulate_experiment(machine, FaultSpec(FaultClass.NF), 3, SimConfig())
    w = rec.data[6, -200:]
    assert np.max(np.abs(w - machine.w_s)) / machine.w_s < 0.01


def test_lambda0_decay_in_simulation(machine):
    sim = SimConfig(duration=0.05, lambda0_init=0.05)
    _, states = simulate_batch(machine, [FaultSpec(FaultClass.NF)], [1], sim, return_states=True)
    l0 = states[0, 4]
    t = np.arange(len(l0)) * sim.sample_period
    rate = -np.polyfit(t, np.log(l0), 1)[0]
    assert abs(rate / (machine.R_a / machine.L_0) - 1) < 0.01


def test_generate_dataset_counts_and_determinism(machine):
    sim = SimConfig(duration=0.02)
    a = generate_dataset(machine, per_class=3, seed=11, sim=sim)
    b = generate_dataset(machine, per_class=3, seed=11, sim=sim, chunk=5)
    assert len(a) == 18
    assert np.array_equal(np.bincount([r.label for r in a]), [3] * 6)
    assert all(np.array_equal(x.data, y.data) and x.seed == y.seed for x, y in zip(a, b))
    c = generate_dataset(machine, per_class=3, seed=12, sim=sim)
    assert not np.array_equal(a[0].data, c[0].data)
    with pytest.raises(ValueError):
        generate_dataset(machine, per_class=0)


def mean_channel_distance(a, b, start):
    return np.mean(np.linalg.norm(a[:, start:] - b[:, start:], axis=1))


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="seed jitter (initial phase, P_ref) dominates the NF-vs-NF distance; "
                                       "VREC and REVD sit close to NF on the same seed")
def test_class_pairs_separable_beyond_seed_noise(machine):
    sim = SimConfig(duration=1.0)
    seeds = [101, 202, 303]
    nf_runs = simulate_batch(machine, [FaultSpec(FaultClass.NF)] * 3, seeds, sim)
    gaps, noise = [], []
    for k, seed in enumerate(seeds):
        faults = [draw_fault(c, seed) for c in FaultClass]
        runs = simulate_batch(machine, faults, [seed] * 6, sim)
        start = int(math.ceil(faults[0].t_f / sim.sample_period))
        gaps += [mean_channel_distance(runs[i], runs[j], start) for i in range(6) for j in range(i + 1, 6)]
        noise.append(mean_channel_distance(nf_runs[k], nf_runs[(k + 1) % 3], start))
    assert min(gaps) > 10 * max(noise)


@pytest.mark.slow
def test_class_pairs_differ_after_onset(machine):
    sim = SimConfig(duration=1.0)
    faults = [draw_fault(c, 101) for c in FaultClass]
    runs = simulate_batch(machine, faults, [101] * 6, sim)
    start = int(math.ceil(faults[0].t_f / sim.sample_period))
    scale = np.mean(np.linalg.norm(runs[FaultClass.NF][:, start:], axis=1))
    for i in range(6):
        for j in range(i + 1, 6):
            assert mean_channel_distance(runs[i], runs[j], start) > 1e-3 * scale
