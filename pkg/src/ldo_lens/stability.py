"""Loop metrics, load sweeps and calibration against a reported operating point."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .ldomodel import (
    DeviceModel,
    ParameterError,
    ProposedParams,
    analytic_poles,
    analytic_zeros,
    dc_gain,
    params_at_load,
    proposed_tf,
)
from .tfcore import ComplexRoot, RationalFunction, TFError, bode, log_grid

__all__ = [
    "StabilityError",
    "LowGainError",
    "NoCrossingError",
    "CalibrationError",
    "StabilityReport",
    "SweepRow",
    "CalibrationTargets",
    "CalibrationResult",
    "SCAN_RANGE",
    "DEFAULT_FREE",
    "DEFAULT_BOUNDS",
    "unity_gain_freq",
    "phase_at",
    "phase_margin",
    "gain_margin",
    "analyze",
    "pole_ordering_check",
    "textbook_pm",
    "pm_sweep",
    "evaluate_point",
    "calibrate",
]

SCAN_RANGE = (1e-2, 1e14)
SCAN_PPD = 50
PHASE_PPD = 200
UGF_RTOL = 1e-9
PENALTY = 1e6


class StabilityError(TFError):
    """Base class for loop-metric failures."""


class LowGainError(StabilityError):
    """``|H(0)| <= 1``: the loop never has gain to lose."""


class NoCrossingError(StabilityError):
    """No unity-gain crossing inside the scan range."""


@dataclass(frozen=True)
class StabilityReport:
    dc_gain_db: float
    ugf: float
    phase_margin: float
    gain_margin_db: float | None
    poles: tuple[ComplexRoot, ...]
    zeros: tuple[ComplexRoot, ...]
    dominant_pole_ok: bool


def _mag(h: RationalFunction, w):
    return np.abs(h(1j * np.asarray(w, dtype=float)))


def unity_gain_freq(
    h: RationalFunction,
    scan: tuple[float, float] = SCAN_RANGE,
    points_per_decade: int = SCAN_PPD,
    rtol: float = UGF_RTOL,
    trace: Callable[[float, float], None] | None = None,
) -> float:
    """Smallest frequency where ``|H(jw)|`` falls through 1.

    A log grid brackets the first crossing, then bisection in ``log w``
    narrows it to ``rtol``. ``trace`` (if given) sees every bracket.
    """
    h0 = abs(h.dc_value())
    if not h0 > 1.0:
        raise LowGainError(f"|H(0)| = {h0:g} <= 1, no unity-gain crossing")
    grid = log_grid(scan[0], scan[1], points_per_decade)
    m = _mag(h, grid)
    below = np.flatnonzero(m < 1.0)
    if below.size == 0:
        raise NoCrossingError(f"|H| stays above 1 up to {scan[1]:g} rad/s")
    i = int(below[0])
    if i == 0:
        raise NoCrossingError(f"|H| is already below 1 at {scan[0]:g} rad/s")
    lo, hi = math.log(grid[i - 1]), math.log(grid[i])
    while math.exp(hi) - math.exp(lo) > rtol * math.exp(lo):
        if trace is not None:
            trace(math.exp(lo), math.exp(hi))
        mid = 0.5 * (lo + hi)
        if _mag(h, math.exp(mid)) >= 1.0:
            lo = mid
        else:
            hi = mid
    # pick the bracket end whose magnitude is closer to 1
    w_lo, w_hi = math.exp(lo), math.exp(hi)
    return w_lo if abs(_mag(h, w_lo) - 1) <= abs(_mag(h, w_hi) - 1) else w_hi


def phase_at(h: RationalFunction, omega: float, points_per_decade: int = PHASE_PPD) -> float:
    """Unwrapped phase in degrees at ``omega``, anchored near 0 at low frequency."""
    w0 = min(SCAN_RANGE[0], omega * 1e-6)
    grid = log_grid(w0, omega, points_per_decade)
    grid[-1] = omega
    ph = bode(h, grid).phase_deg
    return float(ph[-1] - 360.0 * round(ph[0] / 360.0))


def phase_margin(h: RationalFunction, ugf: float | None = None) -> float:
    """``180 + phase(H(j ugf))`` in degrees."""
    if ugf is None:
        ugf = unity_gain_freq(h)
    return 180.0 + phase_at(h, ugf)


def gain_margin(h: RationalFunction) -> float | None:
    """Gain margin in dB at the first -180 degree crossing, ``None`` if none exists."""
    grid = log_grid(SCAN_RANGE[0], SCAN_RANGE[1], PHASE_PPD)
    tab = bode(h, grid)
    ph = tab.phase_deg - 360.0 * round(tab.phase_deg[0] / 360.0)
    idx = np.flatnonzero(ph <= -180.0)
    if idx.size == 0:
        return None
    i = int(idx[0])
    if i == 0:
        return float(-tab.mag_db[0])
    # linear interpolation in log(w) between the straddling samples
    f = (-180.0 - ph[i - 1]) / (ph[i] - ph[i - 1])
    mag = tab.mag_db[i - 1] + f * (tab.mag_db[i] - tab.mag_db[i - 1])
    return float(-mag)


def analyze(h: RationalFunction) -> StabilityReport:
    ugf = unity_gain_freq(h)
    poles = tuple(h.poles())
    zeros = tuple(h.zeros())
    return StabilityReport(
        dc_gain_db=20.0 * math.log10(abs(h.dc_value())),
        ugf=ugf,
        phase_margin=phase_margin(h, ugf),
        gain_margin_db=gain_margin(h),
        poles=poles,
        zeros=zeros,
        dominant_pole_ok=sum(p.magnitude < ugf for p in poles) == 1,
    )


def pole_ordering_check(report: StabilityReport) -> bool:
    """Exactly one pole below the UGF and every zero above it."""
    below = sum(p.magnitude < report.ugf for p in report.poles)
    return below == 1 and all(z.magnitude > report.ugf for z in report.zeros)


def textbook_pm(p: ProposedParams, ugf: float) -> float:
    """Phase-margin estimate from per-root (or per-pair) phase contributions."""
    ap = analytic_poles(p)
    z1, z2 = analytic_zeros(p)
    lag = math.atan(ugf / ap.p1)
    a, b = ap.p23
    if a.is_real:
        lag += math.atan(ugf / a.magnitude) + math.atan(ugf / b.magnitude)
    else:
        # second-order section: wn = |p|, zeta = -re/|p|
        wn, zeta = a.magnitude, -a.re / a.magnitude
        lag += math.atan2(2 * zeta * ugf / wn, 1 - (ugf / wn) ** 2)
    lag += math.atan(ugf / z1)  # RHP zero adds lag
    lag -= math.atan(ugf / abs(z2))  # LHP zero adds lead
    return 180.0 - math.degrees(lag)


# ---------------------------------------------------------------- load sweeps


@dataclass(frozen=True)
class SweepRow:
    il: float
    report: StabilityReport | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.report is not None


def _sweep_row(base: ProposedParams, d: DeviceModel, il: float) -> SweepRow:
    try:
        return SweepRow(il, analyze(proposed_tf(params_at_load(base, d, il))))
    except (TFError, ValueError) as exc:
        return SweepRow(il, None, f"{type(exc).__name__}: {exc}")


def load_grid(il_range: tuple[float, float], n_points: int) -> np.ndarray:
    lo, hi = il_range
    if not (0 < lo <= hi <= 1.0):
        raise ValueError(f"load range must satisfy 0 < lo <= hi <= 1 A, got {il_range!r}")
    if lo == hi:
        return np.array([lo])
    if n_points < 2:
        raise ValueError(f"n_points must be >= 2, got {n_points}")
    grid = np.geomspace(lo, hi, n_points)
    grid[0], grid[-1] = lo, hi
    return grid


def pm_sweep(
    base: ProposedParams,
    d: DeviceModel,
    il_range: tuple[float, float] = (1e-3, 0.2),
    n_points: int = 25,
    workers: int = 1,
) -> list[SweepRow]:
    """Stability report at log-spaced load currents.

    Rows are independent; a failing row records its error instead of
    aborting. Output order follows the grid regardless of ``workers``.
    """
    grid = load_grid(il_range, n_points)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda il: _sweep_row(base, d, float(il)), grid))
    return [_sweep_row(base, d, float(il)) for il in grid]


# ---------------------------------------------------------------- calibration


class CalibrationError(RuntimeError):
    """Residual stayed above the acceptance threshold; ``result`` holds the best point."""

    def __init__(self, message: str, result: "CalibrationResult"):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class CalibrationTargets:
    gain_db: float = 58.0
    pm_deg: float = 64.0
    il: float = 0.1


# where each free parameter lives
_FREE_OWNER = {
    "gm1": "proposed",
    "gm2": "proposed",
    "ro1": "proposed",
    "ro2": "proposed",
    "cp0": "device",
    "va": "device",
    "rload_ext": "device",
}

DEFAULT_FREE = ("gm1", "ro2", "cp0")
DEFAULT_BOUNDS = {
    "gm1": (1e-7, 1e-1),
    "gm2": (1e-6, 1e-1),
    "ro1": (1e3, 1e9),
    "ro2": (1.0, 1e7),
    "cp0": (1e-12, 1e-10),
    "va": (5.0, 200.0),
    "rload_ext": (1.0, 1e6),
}


@dataclass(frozen=True)
class CalibrationResult:
    params: ProposedParams
    device: DeviceModel
    residual: float
    gain_db: float
    pm_deg: float
    evaluations: int
    iterations: int
    improvement_steps: int
    free: tuple[str, ...]


def evaluate_point(base: ProposedParams, d: DeviceModel, il: float) -> tuple[float, float]:
    """(loop gain in dB, phase margin in degrees) of ``base`` biased at ``il``."""
    p = params_at_load(base, d, il)
    h = proposed_tf(p)
    return 20.0 * math.log10(dc_gain(p)), phase_margin(h)


def _get(base: ProposedParams, d: DeviceModel, name: str):
    return getattr(base if _FREE_OWNER[name] == "proposed" else d, name)


def _apply(base: ProposedParams, d: DeviceModel, free: Sequence[str], values) -> tuple[ProposedParams, DeviceModel]:
    pk = {n: float(v) for n, v in zip(free, values) if _FREE_OWNER[n] == "proposed"}
    dk = {n: float(v) for n, v in zip(free, values) if _FREE_OWNER[n] == "device"}
    return (replace(base, **pk) if pk else base), (replace(d, **dk) if dk else d)


def calibrate(
    base: ProposedParams,
    d: DeviceModel,
    targets: CalibrationTargets = CalibrationTargets(),
    free: Sequence[str] = DEFAULT_FREE,
    bounds: dict[str, tuple[float, float]] | None = None,
    seed: int = 0,
    weight: float = 1.0,
    max_evals: int = 2000,
    restarts: int = 3,
    fail_above: float = 0.25,
) -> CalibrationResult:
    """Fit the free parameters so the loop at ``targets.il`` hits the target
    gain and phase margin.

    Minimizes ``(gain_db - target)^2 + weight * (pm_deg - target)^2`` with a
    bounded Nelder-Mead simplex in log-parameter space. The first run starts
    from ``base``/``d``; each restart re-seeds the simplex around the best
    point so far from ``numpy.random.default_rng(seed)``.

    Raises
    ------
    ParameterError
        Unknown free parameter, malformed bounds, or a start value outside them.
    CalibrationError
        Residual above ``fail_above`` once ``max_evals`` is spent.
    """
    free = tuple(free)
    if not free:
        raise ParameterError("free", "at least one free parameter is required")
    bounds = {**DEFAULT_BOUNDS, **(bounds or {})}
    for name in free:
        if name not in _FREE_OWNER:
            raise ParameterError(name, f"not a calibratable parameter (choose from {sorted(_FREE_OWNER)})")
        lo, hi = bounds[name]
        if not (0 < lo < hi and math.isfinite(hi)):
            raise ParameterError(name, f"bounds must satisfy 0 < lo < hi, got ({lo!r}, {hi!r})")
    x0 = []
    for name in free:
        lo, hi = bounds[name]
        v = _get(base, d, name)
        if v is None:
            v = math.sqrt(lo * hi)
        if not lo <= v <= hi:
            raise ParameterError(name, f"start value {v!r} outside bounds ({lo!r}, {hi!r})")
        x0.append(math.log10(v))
    x0 = np.array(x0)
    log_bounds = [(math.log10(bounds[n][0]), math.log10(bounds[n][1])) for n in free]

    evals = 0
    best = {"r": math.inf, "x": x0, "m": (math.nan, math.nan)}

    def objective(x):
        nonlocal evals
        evals += 1
        p, dd = _apply(base, d, free, 10.0 ** np.asarray(x))
        try:
            gain, pm = evaluate_point(p, dd, targets.il)
        except (TFError, ValueError):
            return PENALTY
        r = (gain - targets.gain_db) ** 2 + weight * (pm - targets.pm_deg) ** 2
        if r < best["r"]:
            best.update(r=r, x=np.array(x, dtype=float), m=(gain, pm))
        return r

    r0 = objective(x0)
    improvement_steps = 0
    iterations = 0
    rng = np.random.default_rng(seed)
    if r0 >= 1e-12:
        for k in range(restarts + 1):
            remaining = max_evals - evals
            if remaining <= len(free) + 1 or best["r"] < 1e-16:
                break
            start = best["x"]
            size = 0.3 / (k + 1)
            simplex = [start]
            for i in range(len(free)):
                v = start.copy()
                v[i] += size * (1.0 if rng.random() < 0.5 else -1.0) * (0.5 + rng.random())
                lo, hi = log_bounds[i]
                v[i] = min(max(v[i], lo), hi)
                simplex.append(v)
            res = minimize(
                objective,
                start,
                method="Nelder-Mead",
                bounds=log_bounds,
                options=dict(
                    initial_simplex=np.array(simplex),
                    maxfev=remaining,
                    xatol=1e-13,
                    fatol=1e-20,
                    adaptive=len(free) > 2,
                ),
            )
            iterations += int(res.nit)
        improvement_steps = iterations

    if improvement_steps == 0:
        p, dd = base, d
    else:
        p, dd = _apply(base, d, free, 10.0 ** best["x"])
    result = CalibrationResult(
        params=p,
        device=dd,
        residual=float(best["r"]),
        gain_db=float(best["m"][0]),
        pm_deg=float(best["m"][1]),
        evaluations=evals,
        iterations=iterations,
        improvement_steps=improvement_steps,
        free=free,
    )
    if result.residual > fail_above:
        raise CalibrationError(
            f"calibration failed: residual {result.residual:.4g} > {fail_above} after {evals} evaluations",
            result,
        )
    return result
