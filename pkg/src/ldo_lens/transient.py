"""Behavioral load-transient simulation of the three-stage loop.

The model works in deviation coordinates around the operating point at the
heavy load current of the step. States are ``[v1, v2, vout, vhp]``:

* ``v1``   first-stage output, node capacitance ``c_int1``, Miller ``cm`` to vout
* ``v2``   second-stage output across ``cp`` (pass-device base)
* ``vout`` output across ``cf``, load step enters here as a current sink
* ``vhp``  voltage across ``r_hp`` of the C1/R_hp coupler fed from vout

The pass-device current is ``gmp * v2`` clamped so that the absolute current
stays inside ``[0, i_max]``. With the fast path enabled ``-g_fast * vhp`` is
injected into the v2 node, so a falling output pushes the base up.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from scipy.optimize import brentq

from . import _dopri
from .ldomodel import DeviceModel, ParameterError, ProposedParams, params_at_load

__all__ = [
    "FastPathParams",
    "LoadStep",
    "Waveform",
    "TransientMetrics",
    "StateModel",
    "StiffnessError",
    "InstabilityError",
    "build_state_model",
    "model_for_step",
    "simulate",
    "metrics",
    "ab_compare",
    "ABResult",
    "calibrate_fast_path",
    "g_fast_sweep",
    "V_NOMINAL",
    "DEFAULT_BAND",
]

V_NOMINAL = 1.25
DEFAULT_BAND = 0.01 * V_NOMINAL
I_MAX = 0.4
I_STEP_MAX = 0.2
ATOL = 1e-9
H_MIN = 1e-15
MAX_STEPS = 20_000_000
V_ABORT = 10.0


class InstabilityError(RuntimeError):
    """The output left the physically meaningful range; the loop is unstable."""

    def __init__(self, t: float, v_abort: float):
        super().__init__(
            f"|vout| exceeded {v_abort:g} V at t = {t:.6e} s: the closed loop is unstable for these "
            "parameters (check the state-model eigenvalues)"
        )
        self.t = t


class StiffnessError(RuntimeError):
    """The adaptive step collapsed below the minimum step size."""

    def __init__(self, t: float, message: str | None = None):
        super().__init__(
            message
            or (
                f"step size underflow (< {H_MIN:g} s) at t = {t:.6e} s; the model is too stiff "
                "for the explicit integrator at this tolerance. Loosen the tolerance, raise "
                "c_int1, or review parasitic capacitances for values far below the rest"
            )
        )
        self.t = t


@dataclass(frozen=True)
class FastPathParams:
    """Behavioral transient-enhancement path.

    ``c1`` and ``r_hp`` set the high-pass corner that senses the output,
    ``g_fast`` converts the sensed voltage into base current. ``i_bias_fast``
    is bookkeeping only and never enters the dynamics.
    """

    c1: float = 1e-12
    r_hp: float = 1e6
    g_fast: float = 1e-3
    i_bias_fast: float = 5e-6
    enabled: bool = True

    def __post_init__(self):
        for name in ("c1", "r_hp"):
            v = getattr(self, name)
            if not math.isfinite(v) or v <= 0:
                raise ParameterError(name, f"must be positive, got {v!r}")
        # g_fast = 0 is allowed so an enabled-but-inert path can be compared
        if not math.isfinite(self.g_fast) or self.g_fast < 0:
            raise ParameterError("g_fast", f"must be non-negative, got {self.g_fast!r}")
        if not math.isfinite(self.i_bias_fast) or self.i_bias_fast < 0:
            raise ParameterError("i_bias_fast", f"must be non-negative, got {self.i_bias_fast!r}")

    @property
    def tau(self) -> float:
        return self.r_hp * self.c1


@dataclass(frozen=True)
class LoadStep:
    """Linear-ramp load step between ``i_low`` and ``i_high``.

    ``direction`` is ``"up"`` (low to high) or ``"down"``. ``i_low == i_high``
    is accepted as the null disturbance.
    """

    i_low: float = 1e-3
    i_high: float = 0.1
    t_step: float = 10e-6
    t_rise: float = 10e-6
    direction: str = "up"

    def __post_init__(self):
        if not (0 < self.i_low <= self.i_high <= I_STEP_MAX):
            raise ParameterError(
                "i_low", f"need 0 < i_low <= i_high <= {I_STEP_MAX} A, got {self.i_low!r}, {self.i_high!r}"
            )
        if not self.t_rise > 0:
            raise ParameterError("t_rise", f"must be positive, got {self.t_rise!r}")
        if not self.t_step >= 0:
            raise ParameterError("t_step", f"must be non-negative, got {self.t_step!r}")
        if self.direction not in ("up", "down"):
            raise ParameterError("direction", f"must be 'up' or 'down', got {self.direction!r}")

    @property
    def i_before(self) -> float:
        return self.i_low if self.direction == "up" else self.i_high

    @property
    def i_after(self) -> float:
        return self.i_high if self.direction == "up" else self.i_low

    @property
    def delta(self) -> float:
        return self.i_after - self.i_before

    def current(self, t):
        """Absolute load current at time(s) ``t``."""
        frac = np.clip((np.asarray(t, dtype=float) - self.t_step) / self.t_rise, 0.0, 1.0)
        return self.i_before + self.delta * frac


class Waveform(NamedTuple):
    t: np.ndarray
    vout: np.ndarray
    il: np.ndarray | None = None

    def validate(self):
        if self.t.size == 0:
            raise ParameterError("waveform", "empty waveform")
        if self.t.shape != self.vout.shape:
            raise ParameterError("waveform", "t and vout differ in length")
        if self.t.size > 1 and not np.all(np.diff(self.t) > 0):
            raise ParameterError("waveform", "t must be strictly increasing")


class TransientMetrics(NamedTuple):
    peak_dev: float
    recovery_time: float
    settling_band: float
    settled: bool = True


@dataclass(frozen=True)
class StateModel:
    """Assembled 4-state system ``C dx/dt = G x + b(t)`` in solver form.

    ``kinv`` is the inverse of the 3x3 node capacitance matrix, ``gmat`` the
    3x4 conductance/transconductance matrix. ``clip_lo``/``clip_hi`` bound the
    pass-device deviation current.
    """

    kinv: np.ndarray
    gmat: np.ndarray
    gmp: float
    clip_lo: float
    clip_hi: float
    inv_tau: float
    params: ProposedParams
    fast: FastPathParams
    c_int1: float

    def a_matrix(self) -> np.ndarray:
        """Linear state matrix (clamp inactive)."""
        g = self.gmat.copy()
        g[2, 1] += self.gmp
        top = self.kinv @ g
        a = np.zeros((4, 4))
        a[:3] = top
        a[3] = top[2]
        a[3, 3] -= self.inv_tau
        return a

    def eigenvalues(self) -> np.ndarray:
        ev = np.linalg.eigvals(self.a_matrix())
        return ev[np.argsort(np.abs(ev))]

    def open_loop_eigenvalues(self) -> np.ndarray:
        """Eigenvalues of the amplifier chain with the feedback (gm1) removed.

        These are the poles the loop-gain expression describes; the closed
        loop moves them.
        """
        g = self.gmat.copy()
        g[2, 1] += self.gmp
        g[0, 2] = 0.0
        ev = np.linalg.eigvals((self.kinv @ g)[:3, :3])
        return ev[np.argsort(np.abs(ev))]


def build_state_model(
    p: ProposedParams,
    f: FastPathParams | None = None,
    c_int1: float | None = None,
    i_base: float = 0.0,
    i_max: float = I_MAX,
) -> StateModel:
    """Assemble the state model for small-signal parameters ``p``.

    ``p`` already holds the pass-device values of the chosen operating point
    (see :func:`model_for_step`). ``i_base`` is the absolute pass current the
    deviation is measured from, used only for the clamp.
    """
    f = f or FastPathParams(enabled=False)
    c_int1 = p.cp / 1000.0 if c_int1 is None else c_int1
    if not c_int1 > 0:
        raise ParameterError("c_int1", f"must be positive, got {c_int1!r}")
    cmat = np.array(
        [
            [c_int1 + p.cm, 0.0, -p.cm],
            [0.0, p.cp, 0.0],
            [-p.cm, 0.0, p.cf + p.cm],
        ]
    )
    g_fast = f.g_fast if f.enabled else 0.0
    gmat = np.array(
        [
            [-1.0 / p.ro1, 0.0, p.gm1, 0.0],
            [-p.gm2, -1.0 / p.ro2, 0.0, -g_fast],
            [0.0, 0.0, -1.0 / p.ro, 0.0],
        ]
    )
    return StateModel(
        kinv=np.linalg.inv(cmat),
        gmat=gmat,
        gmp=p.gmp,
        clip_lo=-i_base,
        clip_hi=i_max - i_base,
        inv_tau=1.0 / f.tau,
        params=p,
        fast=f,
        c_int1=c_int1,
    )


def model_for_step(
    base: ProposedParams,
    d: DeviceModel,
    f: FastPathParams,
    step: LoadStep,
    c_int1: float | None = None,
    i_max: float = I_MAX,
) -> StateModel:
    """State model linearized at the heavy-load end of ``step``."""
    p = params_at_load(base, d, step.i_high)
    return build_state_model(p, f, c_int1=c_int1, i_base=step.i_before, i_max=i_max)


def _breakpoints(step: LoadStep, t_end: float) -> np.ndarray:
    pts = [0.0]
    for t in (step.t_step, step.t_step + step.t_rise):
        if pts[-1] < t < t_end:
            pts.append(t)
    pts.append(t_end)
    return np.array(pts)


def simulate(
    model: StateModel,
    step: LoadStep,
    t_end: float = 100e-6,
    tol: float = 1e-6,
    n_samples: int = 4001,
    x0=None,
) -> Waveform:
    """Integrate the load step and sample vout on a uniform grid.

    The accepted step with the largest ``|vout|`` is merged into the sample
    grid so peak detection does not depend on ``n_samples``.

    Raises
    ------
    StiffnessError
        If the step size underflows or the step budget runs out.
    """
    if not t_end > step.t_step + step.t_rise:
        raise ParameterError("t_end", f"must exceed t_step + t_rise, got {t_end!r}")
    if not 1e-10 <= tol <= 1e-3:
        raise ParameterError("tol", f"must lie in [1e-10, 1e-3], got {tol!r}")
    if n_samples < 2:
        raise ParameterError("n_samples", "need at least 2 samples")
    t_out = np.linspace(0.0, t_end, n_samples)
    x0 = np.zeros(_dopri.N_STATE) if x0 is None else np.asarray(x0, dtype=float)
    y, status, _, _, t_pk, _, t_fail = _dopri.integrate(
        model.kinv, model.gmat, model.gmp, model.clip_lo, model.clip_hi, model.inv_tau,
        step.t_step, step.t_rise, step.delta,
        x0, _breakpoints(step, t_end), t_out, tol, ATOL, H_MIN, MAX_STEPS, V_ABORT,
    )
    if status == _dopri.STATUS_UNDERFLOW:
        raise StiffnessError(t_fail)
    if status == _dopri.STATUS_DIVERGED:
        raise InstabilityError(t_fail, V_ABORT)
    if status == _dopri.STATUS_BUDGET:
        raise StiffnessError(t_fail, f"step budget of {MAX_STEPS} exhausted at t = {t_fail:.6e} s")
    t, vout = t_out, y[:, 2]
    if t_pk > 0 and not np.any(t == t_pk):
        # re-run a single dense point at the peak for exact alignment
        yk, *_ = _dopri.integrate(
            model.kinv, model.gmat, model.gmp, model.clip_lo, model.clip_hi, model.inv_tau,
            step.t_step, step.t_rise, step.delta,
            x0, _breakpoints(step, t_end), np.array([t_pk]), tol, ATOL, H_MIN, MAX_STEPS, V_ABORT,
        )
        k = np.searchsorted(t, t_pk)
        t = np.insert(t, k, t_pk)
        vout = np.insert(vout, k, yk[0, 2])
    return Waveform(t, vout, step.current(t))


def _crossing(t0, v0, t1, v1, band):
    # time where |v| falls to band between two samples, linear in v
    a0, a1 = abs(v0), abs(v1)
    if a0 == a1:
        return t1
    return t0 + (t1 - t0) * (a0 - band) / (a0 - a1)


def metrics(w: Waveform, step: LoadStep, band: float = DEFAULT_BAND) -> TransientMetrics:
    """Peak deviation after ``t_step`` and recovery time into ``band``.

    Recovery is measured from ``t_step`` (the start of the edge) to the last
    exit from the band, interpolated linearly. ``settled`` is False when the
    trace is still outside the band at the final sample.
    """
    w.validate()
    if not band > 0:
        raise ParameterError("band", f"must be positive, got {band!r}")
    t, v = np.asarray(w.t), np.asarray(w.vout)
    sel = t >= step.t_step
    if not np.any(sel):
        return TransientMetrics(0.0, 0.0, band, True)
    t, v = t[sel], v[sel]
    a = np.abs(v)
    peak = float(a.max())
    out = np.flatnonzero(a > band)
    if out.size == 0:
        return TransientMetrics(peak, 0.0, band, True)
    k = out[-1]
    if k == t.size - 1:
        return TransientMetrics(peak, float(t[-1] - step.t_step), band, False)
    tc = _crossing(t[k], v[k], t[k + 1], v[k + 1], band)
    return TransientMetrics(peak, float(tc - step.t_step), band, True)


class ABResult(NamedTuple):
    on: TransientMetrics
    off: TransientMetrics
    wave_on: Waveform
    wave_off: Waveform

    @property
    def d_peak(self) -> float:
        return self.on.peak_dev - self.off.peak_dev

    @property
    def d_recovery(self) -> float:
        return self.on.recovery_time - self.off.recovery_time

    @property
    def improves(self) -> bool:
        return self.on.peak_dev < self.off.peak_dev and self.on.recovery_time < self.off.recovery_time


def ab_compare(
    model_on: StateModel,
    model_off: StateModel,
    step: LoadStep,
    t_end: float = 100e-6,
    tol: float = 1e-6,
    band: float = DEFAULT_BAND,
    n_samples: int = 4001,
) -> ABResult:
    """Simulate fast path on and off concurrently and pair the metrics."""
    if model_on.params != model_off.params:
        raise ParameterError("model_off", "A/B models must share all loop parameters")
    with ThreadPoolExecutor(max_workers=2) as ex:
        fut = [ex.submit(simulate, m, step, t_end, tol, n_samples) for m in (model_on, model_off)]
        w_on, w_off = (x.result() for x in fut)
    return ABResult(metrics(w_on, step, band), metrics(w_off, step, band), w_on, w_off)


class FastCalibration(NamedTuple):
    fast: FastPathParams
    peak_dev: float
    target: float
    evaluations: int
    converged: bool


def calibrate_fast_path(
    base: ProposedParams,
    d: DeviceModel,
    f: FastPathParams,
    step: LoadStep,
    target_peak: float = 0.040,
    g_bounds=(1e-6, 1.0),
    t_end: float = 100e-6,
    tol: float = 1e-6,
    xtol: float = 1e-3,
) -> FastCalibration:
    """Tune ``g_fast`` so the fast-path-on peak deviation hits ``target_peak``.

    Brent root search in log10(g_fast) on ``peak - target``. When the target
    is not bracketed the bound with the smaller mismatch is returned with
    ``converged=False``.
    """

    count = [0]

    def peak(lg):
        count[0] += 1
        ff = replace(f, g_fast=10.0**lg, enabled=True)
        w = simulate(model_for_step(base, d, ff, step), step, t_end, tol)
        return metrics(w, step).peak_dev

    lo, hi = math.log10(g_bounds[0]), math.log10(g_bounds[1])
    plo, phi = peak(lo), peak(hi)
    if (plo - target_peak) * (phi - target_peak) > 0:
        lg, pk = (lo, plo) if abs(plo - target_peak) <= abs(phi - target_peak) else (hi, phi)
        return FastCalibration(replace(f, g_fast=10.0**lg, enabled=True), pk, target_peak, count[0], False)
    lg = brentq(lambda x: peak(x) - target_peak, lo, hi, xtol=xtol)
    ff = replace(f, g_fast=10.0**lg, enabled=True)
    return FastCalibration(ff, peak(lg), target_peak, count[0], True)


class SweepPoint(NamedTuple):
    g_fast: float
    metrics: TransientMetrics


def g_fast_sweep(
    base: ProposedParams,
    d: DeviceModel,
    f: FastPathParams,
    step: LoadStep,
    g_values,
    t_end: float = 100e-6,
    tol: float = 1e-6,
    workers: int | None = None,
) -> tuple[list[SweepPoint], bool]:
    """Peak/recovery for each ``g_fast``; second value flags a monotone peak.

    A False flag means the peak rose somewhere along the sweep (overshoot
    reversal at high gain); callers should report it.
    """

    def run(g):
        ff = replace(f, g_fast=float(g), enabled=True)
        return SweepPoint(float(g), metrics(simulate(model_for_step(base, d, ff, step), step, t_end, tol), step))

    with ThreadPoolExecutor(max_workers=workers) as ex:
        pts = list(ex.map(run, g_values))
    peaks = [p.metrics.peak_dev for p in pts]
    monotone = all(b <= a * (1 + 1e-9) for a, b in zip(peaks, peaks[1:]))
    return pts, monotone
