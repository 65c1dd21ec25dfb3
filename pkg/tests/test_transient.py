import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldo_lens.ldomodel import NOMINAL_A, ParameterError, ProposedParams, analytic_poles
from ldo_lens.transient import (
    ATOL,
    DEFAULT_BAND,
    FastPathParams,
    LoadStep,
    StateModel,
    StiffnessError,
    TransientMetrics,
    Waveform,
    ab_compare,
    build_state_model,
    g_fast_sweep,
    metrics,
    model_for_step,
    simulate,
)

# Miller approximation holds here: large second/pass gain product, cf*ro >> cp*ro2
MILLER_VALID = ProposedParams(gm1=1e-4, gm2=1e-2, gmp=1.0, ro1=1e7, ro2=1e3, ro=1e3, cm=4e-12, cp=1e-11, cf=1e-10)


def rc_model(r, c, tau_hp=1e-6):
    """Bare single-pole output node: C dv/dt = -v/R - i_load."""
    kinv = np.zeros((3, 3))
    kinv[2, 2] = 1.0 / c
    gmat = np.zeros((3, 4))
    gmat[2, 2] = -1.0 / r
    return StateModel(kinv, gmat, 0.0, -1.0, 1.0, 1.0 / tau_hp, MILLER_VALID, FastPathParams(enabled=False), 1.0)


def rc_closed_form(t, r, c, step):
    tau = r * c
    k = step.delta / step.t_rise
    t1 = step.t_step + step.t_rise
    out = np.zeros_like(t)
    ramp = (t > step.t_step) & (t <= t1)
    tp = t[ramp] - step.t_step
    out[ramp] = -r * k * (tp - tau * (1 - np.exp(-tp / tau)))
    v1 = -r * k * (step.t_rise - tau * (1 - np.exp(-step.t_rise / tau)))
    after = t > t1
    e = np.exp(-(t[after] - t1) / tau)
    out[after] = v1 * e - r * step.delta * (1 - e)
    return out


# ---------------------------------------------------------------- parameter types


def test_fast_path_validation():
    with pytest.raises(ParameterError):
        FastPathParams(c1=0.0)
    with pytest.raises(ParameterError):
        FastPathParams(g_fast=-1.0)
    assert FastPathParams(g_fast=0.0, enabled=True).g_fast == 0.0


def test_load_step_validation():
    with pytest.raises(ParameterError):
        LoadStep(i_low=0.1, i_high=0.05)
    with pytest.raises(ParameterError):
        LoadStep(i_high=0.3)
    with pytest.raises(ParameterError):
        LoadStep(t_rise=0.0)
    s = LoadStep(direction="down")
    assert s.delta == pytest.approx(-0.099)
    assert s.current(0.0) == pytest.approx(0.1) and s.current(1.0) == pytest.approx(0.001)


# ---------------------------------------------------------------- state model


@pytest.mark.parametrize("frac", [1 / 100, 1 / 1000])
def test_open_loop_eigenvalues_match_analytic_poles(frac):
    m = build_state_model(MILLER_VALID, c_int1=MILLER_VALID.cp * frac)
    ana = sorted(analytic_poles(MILLER_VALID).locations(), key=abs)
    for a, e in zip(ana, m.open_loop_eigenvalues()):
        assert abs(e - a) <= 0.05 * abs(a)


def test_open_loop_magnitudes_match_outside_miller_regime():
    # the quadratic's location shifts but its magnitude is preserved
    m = build_state_model(NOMINAL_A, c_int1=NOMINAL_A.cp / 1000)
    ana = sorted(analytic_poles(NOMINAL_A).locations(), key=abs)
    for a, e in zip(ana, m.open_loop_eigenvalues()):
        assert abs(abs(e) - abs(a)) <= 0.05 * abs(a)


def test_fast_path_disabled_has_no_coupling():
    m = build_state_model(MILLER_VALID, FastPathParams(g_fast=1.0, enabled=False))
    assert m.gmat[1, 3] == 0.0
    m2 = build_state_model(MILLER_VALID, FastPathParams(g_fast=1.0, enabled=True))
    assert m2.gmat[1, 3] == -1.0


def test_zero_disturbance_is_identically_zero(calibrated_cfg):
    c = calibrated_cfg
    step = LoadStep(i_low=0.05, i_high=0.05)
    w = simulate(model_for_step(c.proposed, c.device, c.fast, step), step, 60e-6)
    assert np.all(w.vout == 0.0)
    assert metrics(w, step) == TransientMetrics(0.0, 0.0, DEFAULT_BAND, True)


def test_high_pass_state_decays_as_rc():
    # frozen nodes: vout is held, vhp relaxes with tau = r_hp * c1
    tau = 2e-6
    m = replace(rc_model(1.0, 1.0, tau), kinv=np.zeros((3, 3)))
    step = LoadStep(i_low=0.01, i_high=0.01, t_step=1e-6, t_rise=1e-6)
    from ldo_lens import _dopri

    t = np.linspace(0, 10e-6, 201)
    y, status, *_ = _dopri.integrate(
        m.kinv, m.gmat, 0.0, -1.0, 1.0, 1.0 / tau, step.t_step, step.t_rise, 0.0,
        np.array([0.0, 0.0, 0.3, 0.3]), np.array([0.0, 10e-6]), t, 1e-9, 1e-12, 1e-15, 10**6, 10.0,
    )
    assert status == 0
    assert y[:, 2] == pytest.approx(np.full_like(t, 0.3))
    assert y[:, 3] == pytest.approx(0.3 * np.exp(-t / tau), rel=1e-6, abs=1e-12)


# ---------------------------------------------------------------- simulate


@pytest.mark.parametrize("tol", [1e-6, 1e-8])
def test_rc_ramp_matches_closed_form(tol):
    r, c = 10.0, 1e-6
    step = LoadStep(i_low=1e-3, i_high=2e-3, t_step=5e-6, t_rise=10e-6)
    w = simulate(rc_model(r, c), step, 100e-6, tol, 2001)
    ref = rc_closed_form(w.t, r, c, step)
    scale = np.max(np.abs(ref))
    assert np.max(np.abs(w.vout - ref)) <= 10 * tol * scale + 10 * ATOL


def test_simulate_rejects_bad_arguments(calibrated_cfg):
    c = calibrated_cfg
    m = model_for_step(c.proposed, c.device, c.fast, c.step)
    with pytest.raises(ParameterError):
        simulate(m, c.step, 15e-6)
    with pytest.raises(ParameterError):
        simulate(m, c.step, 100e-6, tol=1e-2)


def test_stiffness_error_advises():
    m = rc_model(1.0, 1e-18)  # tau = 1e-18 s, far below the minimum step
    step = LoadStep(t_step=1e-6, t_rise=1e-6)
    with pytest.raises(StiffnessError, match="tolerance"):
        simulate(m, step, 5e-6, 1e-6)


def test_tolerance_halving_converges(calibrated_cfg):
    c = calibrated_cfg
    m = model_for_step(c.proposed, c.device, c.fast, c.step)
    peaks = [metrics(simulate(m, c.step, c.t_end, tol), c.step).peak_dev for tol in (1e-5, 5e-6, 2.5e-6)]
    for a, b in zip(peaks, peaks[1:]):
        assert b <= a * 1.01


def test_peak_sample_included(calibrated_cfg):
    c = calibrated_cfg
    m = model_for_step(c.proposed, c.device, c.fast, c.step)
    coarse = metrics(simulate(m, c.step, c.t_end, c.tol, 51), c.step).peak_dev
    fine = metrics(simulate(m, c.step, c.t_end, c.tol, 20001), c.step).peak_dev
    assert coarse == pytest.approx(fine, rel=1e-3)


def test_up_down_mirror_in_linear_regime(calibrated_cfg):
    c = calibrated_cfg
    up = LoadStep(i_low=0.1, i_high=0.101, direction="up")
    down = replace(up, direction="down")
    f = replace(c.fast, enabled=False)
    wu = simulate(model_for_step(c.proposed, c.device, f, up), up, 100e-6, 1e-8)
    wd = simulate(model_for_step(c.proposed, c.device, f, down), down, 100e-6, 1e-8)
    grid = np.linspace(0, 100e-6, 1001)
    a, b = np.interp(grid, wu.t, wu.vout), np.interp(grid, wd.t, wd.vout)
    assert np.max(np.abs(a + b)) <= 1e-3 * np.max(np.abs(a)) + 1e-9


def test_closed_loop_tail_matches_slowest_eigenvalue(calibrated_cfg):
    c = calibrated_cfg
    step = LoadStep(i_low=0.1, i_high=0.101)
    m = model_for_step(c.proposed, c.device, replace(c.fast, enabled=False), step)
    # the detached high-pass state is excluded, it carries no coupling when disabled
    loop = np.linalg.eigvals(m.a_matrix()[:3, :3])
    slow = loop[np.argmin(np.abs(loop))]
    assert abs(slow.imag) < 1e-9 * abs(slow.real)
    w = simulate(m, step, 100e-6, 1e-9, 20001)
    t1 = step.t_step + step.t_rise
    tau = -1.0 / slow.real
    sel = (w.t > t1 + 2 * tau) & (w.t < t1 + 8 * tau)
    y = np.log(np.abs(w.vout[sel] - w.vout[-1]))
    rate = np.polyfit(w.t[sel], y, 1)[0]
    assert rate == pytest.approx(slow.real, rel=0.05)


@settings(max_examples=8, deadline=None)
@given(st.floats(0.7, 1.4), st.floats(0.7, 1.4), st.floats(1e-3, 0.05))
def test_output_stays_bounded(calibrated_cfg, k1, k2, di):
    c = calibrated_cfg
    p = replace(c.proposed, gm1=c.proposed.gm1 * k1, ro2=c.proposed.ro2 * k2)
    step = LoadStep(i_low=0.1 - di, i_high=0.1)
    m = model_for_step(p, c.device, c.fast, step)
    w = simulate(m, step, 60e-6, 1e-5, 601)
    bound = p.ro * (m.clip_hi - m.clip_lo + abs(step.delta))
    assert np.max(np.abs(w.vout)) <= 10 * bound


# ---------------------------------------------------------------- metrics


def test_metrics_zero_waveform():
    step = LoadStep()
    t = np.linspace(0, 1e-4, 11)
    m = metrics(Waveform(t, np.zeros_like(t)), step, 4e-3)
    assert (m.peak_dev, m.recovery_time) == (0.0, 0.0)


def test_metrics_exponential_recovery():
    step = LoadStep(t_step=10e-6)
    t = np.linspace(0, 200e-6, 200_001)
    tau = 10e-6
    v = np.where(t >= step.t_step, 0.04 * np.exp(-(t - step.t_step) / tau), 0.0)
    m = metrics(Waveform(t, v), step, 4e-3)
    assert m.peak_dev == pytest.approx(0.04)
    assert m.recovery_time == pytest.approx(tau * math.log(10), rel=1e-6)


def test_metrics_square_pulse():
    step = LoadStep(t_step=10e-6)
    h, width = 0.02, 7e-6
    t = np.linspace(0, 50e-6, 50_001)
    v = np.where((t >= step.t_step) & (t <= step.t_step + width), h, 0.0)
    m = metrics(Waveform(t, v), step, 0.01)
    assert m.peak_dev == h
    assert m.recovery_time == pytest.approx(width, abs=2e-9)


def test_metrics_unsettled_flag():
    step = LoadStep(t_step=0.0)
    t = np.linspace(0, 1e-4, 101)
    m = metrics(Waveform(t, np.full_like(t, -0.05)), step, 0.01)
    assert not m.settled and m.recovery_time == pytest.approx(1e-4)


def test_metrics_rejects_empty_and_bad_band():
    step = LoadStep()
    with pytest.raises(ParameterError):
        metrics(Waveform(np.array([]), np.array([])), step)
    with pytest.raises(ParameterError):
        metrics(Waveform(np.array([0.0, 1.0]), np.array([0.0, 0.0])), step, 0.0)


def test_metrics_resampling_idempotent(calibrated_cfg):
    c = calibrated_cfg
    w = simulate(model_for_step(c.proposed, c.device, c.fast, c.step), c.step, c.t_end, c.tol, 4001)
    m0 = metrics(w, c.step)
    t2 = np.union1d(w.t, 0.5 * (w.t[1:] + w.t[:-1]))
    m1 = metrics(Waveform(t2, np.interp(t2, w.t, w.vout)), c.step)
    assert m1.peak_dev == pytest.approx(m0.peak_dev, rel=0.01)
    assert m1.recovery_time == pytest.approx(m0.recovery_time, rel=0.01)


# ---------------------------------------------------------------- A/B


def test_zero_gain_path_is_bit_identical(calibrated_cfg):
    c = calibrated_cfg
    on = model_for_step(c.proposed, c.device, replace(c.fast, g_fast=0.0, enabled=True), c.step)
    off = model_for_step(c.proposed, c.device, replace(c.fast, enabled=False), c.step)
    r = ab_compare(on, off, c.step, c.t_end, c.tol)
    assert np.array_equal(r.wave_on.t, r.wave_off.t)
    assert np.array_equal(r.wave_on.vout, r.wave_off.vout)
    assert r.d_peak == 0.0 and r.d_recovery == 0.0


def test_ab_requires_same_loop(calibrated_cfg):
    c = calibrated_cfg
    a = model_for_step(c.proposed, c.device, c.fast, c.step)
    b = model_for_step(replace(c.proposed, gm1=2 * c.proposed.gm1), c.device, c.fast, c.step)
    with pytest.raises(ParameterError):
        ab_compare(a, b, c.step)


def test_fast_path_reduces_peak(calibrated_cfg):
    c = calibrated_cfg
    on = model_for_step(c.proposed, c.device, c.fast, c.step)
    off = model_for_step(c.proposed, c.device, replace(c.fast, enabled=False), c.step)
    r = ab_compare(on, off, c.step, c.t_end, c.tol)
    assert r.on.peak_dev < r.off.peak_dev


def test_g_fast_sweep_reports_monotonicity(calibrated_cfg):
    c = calibrated_cfg
    g0 = c.fast.g_fast
    decade = 10 ** math.floor(math.log10(g0))
    gs = np.geomspace(decade, 10 * decade, 5)
    pts, flag = g_fast_sweep(c.proposed, c.device, c.fast, c.step, gs, c.t_end, c.tol)
    peaks = [p.metrics.peak_dev for p in pts]
    assert [p.g_fast for p in pts] == pytest.approx(list(gs))
    assert flag == all(b <= a * (1 + 1e-9) for a, b in zip(peaks, peaks[1:]))
