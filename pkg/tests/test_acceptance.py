"""End-to-end acceptance checks, one per criterion.

Each test records a ``PASS``/``FAIL`` line with its measured values and
runtime; the lines are printed as they happen and repeated as a block at the
end of the session (visible even with output capture on).
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import CONFIGS, match_roots, random_params
from ldo_lens.cli import output_pole_shift
from ldo_lens.config import load_config
from ldo_lens.ldomodel import ProposedParams, analytic_poles, analytic_zeros, dc_gain, proposed_tf
from ldo_lens.stability import calibrate, pm_sweep, unity_gain_freq
from ldo_lens.transient import ab_compare, build_state_model, metrics, model_for_step, simulate

pytestmark = pytest.mark.acceptance

N_RANDOM = 1000
LINES: dict[str, str] = {}


@pytest.fixture(scope="module", autouse=True)
def summary(request):
    yield
    tr = request.config.pluginmanager.get_plugin("terminalreporter")
    if tr is None:
        return
    tr.write_line("")
    tr.write_line("acceptance summary")
    for key in sorted(LINES):
        tr.write_line(LINES[key])


def record(n, ok, detail, elapsed, limit):
    ok = ok and elapsed < limit
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}  [{elapsed:.2f} s, limit {limit:g} s]"
    LINES[str(n)] = line
    print(line)
    return ok


def test_criterion_1_pole_zero_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(N_RANDOM):
        p = random_params(rng)
        h = proposed_tf(p)
        pairs = match_roots(analytic_poles(p).locations(), [r.value for r in h.poles()])
        pairs += match_roots(analytic_zeros(p), [r.value for r in h.zeros()])
        worst = max(worst, max(abs(f - e) / abs(e) for e, f in pairs))
    dt = time.perf_counter() - t0
    assert record(1, worst < 1e-6, f"worst relative root error {worst:.2e} over {N_RANDOM} sets (< 1e-6)", dt, 5)


def test_criterion_2_dc_gain_identity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(N_RANDOM):
        p = random_params(rng)
        g = dc_gain(p)
        worst = max(worst, abs(proposed_tf(p).dc_value() - g) / g)
    dt = time.perf_counter() - t0
    assert record(2, worst < 1e-12, f"worst relative DC gain error {worst:.2e} (< 1e-12)", dt, 1)


def test_criterion_3_calibration():
    cfg = load_config(CONFIGS / "default.cfg")
    t0 = time.perf_counter()
    r = calibrate(cfg.proposed, cfg.device, cfg.targets, cfg.free, cfg.bounds, cfg.seed,
                  max_evals=cfg.max_evals, restarts=cfg.restarts, fail_above=cfg.fail_above)
    dt = time.perf_counter() - t0
    ok = abs(r.gain_db - 58.0) <= 0.5 and abs(r.pm_deg - 64.0) <= 1.0
    detail = (f"gain {r.gain_db:.4f} dB (58 +/- 0.5), PM {r.pm_deg:.4f} deg (64 +/- 1) at 100 mA,"
              f" residual {r.residual:.2e}, free {','.join(r.free)}")
    assert record(3, ok, detail, dt, 30)


def test_criterion_4_full_load_phase_margin():
    cfg = load_config(CONFIGS / "calibrated.cfg")
    t0 = time.perf_counter()
    rows = pm_sweep(cfg.proposed, cfg.device, (1e-3, 0.2), 25, workers=4)
    dt = time.perf_counter() - t0
    good = [r for r in rows if r.ok]
    pm = [r.report.phase_margin for r in good]
    k = int(np.argmin(pm))
    dom = all(r.report.dominant_pole_ok for r in good)
    ok = len(good) == len(rows) and min(pm) > 50.0 and dom
    detail = (f"min PM {min(pm):.3f} deg at {good[k].il * 1e3:.3g} mA (> 50), dominant pole ok everywhere: {dom},"
              f" failed rows {len(rows) - len(good)}")
    assert record(4, ok, detail, dt, 10)


def test_criterion_5_conventional_pole_shift():
    cfg = load_config(CONFIGS / "calibrated.cfg")
    t0 = time.perf_counter()
    shift = output_pole_shift(cfg)
    dt = time.perf_counter() - t0
    assert record(5, abs(shift - 100.0) <= 5.0, f"output pole shift 1 mA -> 100 mA = {shift:.6f}x (100 +/- 5%)",
                  dt, 1)


def _transient_ab():
    cfg = load_config(CONFIGS / "calibrated.cfg")
    build = lambda f: model_for_step(cfg.proposed, cfg.device, f, cfg.step, cfg.c_int1, cfg.i_max)
    return ab_compare(build(cfg.fast), build(replace(cfg.fast, enabled=False)), cfg.step, cfg.t_end, cfg.tol,
                      cfg.band, cfg.n_samples)


def test_criterion_6_transient():
    t0 = time.perf_counter()
    r = _transient_ab()
    dt = time.perf_counter() - t0
    on, off = r.on, r.off
    peak_ok = abs(on.peak_dev - 0.040) <= 0.25 * 0.040
    rec_ok = abs(on.recovery_time - 30e-6) <= 0.5 * 30e-6 and on.settled
    dir_peak = on.peak_dev < off.peak_dev
    dir_rec = on.recovery_time < off.recovery_time
    detail = (f"on: peak {on.peak_dev * 1e3:.3f} mV (40 +/- 25%) {'ok' if peak_ok else 'out'},"
              f" recovery {on.recovery_time * 1e6:.3f} us (30 +/- 50%) {'ok' if rec_ok else 'out'};"
              f" off: peak {off.peak_dev * 1e3:.3f} mV, recovery {off.recovery_time * 1e6:.3f} us;"
              f" on beats off: peak {dir_peak}, recovery {dir_rec}")
    assert record(6, peak_ok and rec_ok and dir_peak and dir_rec, detail, dt, 30)


# Miller-regime parameter sets where the closed-form poles are valid approximations
MILLER_SETS = [
    ProposedParams(gm1=1e-4, gm2=1e-2, gmp=1.0, ro1=1e7, ro2=1e3, ro=1e3, cm=4e-12, cp=1e-12, cf=1e-10),
    ProposedParams(gm1=1e-4, gm2=1e-2, gmp=1.0, ro1=1e7, ro2=1e3, ro=1e3, cm=4e-12, cp=1e-11, cf=1e-10),
]


def test_criterion_7_numerical_self_consistency():
    t0 = time.perf_counter()
    cfg = load_config(CONFIGS / "calibrated.cfg")
    model = model_for_step(cfg.proposed, cfg.device, cfg.fast, cfg.step, cfg.c_int1, cfg.i_max)
    peaks = [metrics(simulate(model, cfg.step, cfg.t_end, tol), cfg.step).peak_dev for tol in (1e-6, 5e-7)]
    halving = abs(peaks[1] - peaks[0]) / peaks[1]

    eig = 0.0
    for p in MILLER_SETS:
        ev = build_state_model(p).open_loop_eigenvalues()
        for a, e in match_roots(analytic_poles(p).locations(), ev):
            eig = max(eig, abs(e - a) / abs(a))

    rng = np.random.default_rng(7)
    brackets = 0
    bracket_ok = True
    for _ in range(50):
        p = random_params(rng)
        h = proposed_tf(p)
        if abs(h.dc_value()) <= 1.0:
            continue
        seen = []

        def trace(lo, hi):
            seen.append((lo, hi))

        try:
            w = unity_gain_freq(h, trace=trace)
        except Exception:
            continue
        brackets += len(seen)
        widths = [math.log(b / a) for a, b in seen]
        bracket_ok &= all(abs(h(1j * lo)) >= 1.0 > abs(h(1j * hi)) for lo, hi in seen)
        bracket_ok &= all(b < a for a, b in zip(widths, widths[1:]))
        if seen:
            bracket_ok &= seen[-1][0] <= w <= seen[-1][1] * (1 + 1e-6)
    dt = time.perf_counter() - t0
    ok = halving < 0.01 and eig < 0.05 and bracket_ok
    detail = (f"tolerance halving peak change {halving:.2e} (< 1%), open-loop eigenvalue vs analytic pole"
              f" {eig:.2e} (< 5%), bisection invariants {'hold' if bracket_ok else 'broken'} over {brackets} brackets")
    assert record(7, ok, detail, dt, 120)
