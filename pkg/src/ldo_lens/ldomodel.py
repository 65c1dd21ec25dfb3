"""Small-signal models of the Miller-compensated three-stage LDO and the
conventional ESR-compensated LDO, plus the load-current to device mapping.

Pole locations are stored as left-half-plane complex numbers; where a single
"pole frequency" is reported (``AnalyticPoles.p1``) it is the magnitude.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, fields, replace
from typing import NamedTuple

from .tfcore import ComplexRoot, Polynomial, RationalFunction, poly_mul

__all__ = [
    "ParameterError",
    "ProposedParams",
    "ConventionalParams",
    "DeviceModel",
    "OperatingPoint",
    "AnalyticPoles",
    "NOMINAL_A",
    "proposed_tf",
    "dc_gain",
    "analytic_poles",
    "analytic_zeros",
    "conventional_tf",
    "conventional_poles_zero",
    "operating_point",
    "params_at_load",
]

CF_RANGE = (1e-11, 1e-10)


class ParameterError(ValueError):
    """A model parameter violates its invariant; ``field`` names it."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _check_positive(obj, names):
    for name in names:
        v = getattr(obj, name)
        if not isinstance(v, (int, float)) or not math.isfinite(v) or v <= 0:
            raise ParameterError(name, f"must be strictly positive and finite, got {v!r}")


@dataclass(frozen=True)
class ProposedParams:
    """Small-signal parameters of the proposed LDO.

    Attributes are SI: transconductances in S, resistances in ohm,
    capacitances in F. ``gmp``, ``ro`` and ``cp`` describe the pass device at
    one operating point (see :func:`params_at_load`).
    """

    gm1: float
    gm2: float
    gmp: float
    ro1: float
    ro2: float
    ro: float
    cm: float = 4e-12
    cp: float = 10e-12
    cf: float = 100e-12
    cf_override: bool = False

    def __post_init__(self):
        _check_positive(self, ("gm1", "gm2", "gmp", "ro1", "ro2", "ro", "cm", "cp", "cf"))
        lo, hi = CF_RANGE
        if not self.cf_override and not lo <= self.cf <= hi:
            raise ParameterError(
                "cf", f"output parasitic capacitance {self.cf!r} F outside [{lo:g}, {hi:g}] F (set cf_override)"
            )


@dataclass(frozen=True)
class ConventionalParams:
    """Conventional LDO: error-amp output (ra, ca), output node (ro, cl), ESR zero."""

    ra: float
    ca: float
    ro: float
    cl: float
    r_esr: float
    adc: float

    def __post_init__(self):
        _check_positive(self, ("ra", "ca", "ro", "cl", "r_esr", "adc"))
        if self.cl < 10 * self.ca:
            warnings.warn(
                f"load capacitor cl={self.cl:g} F is not much larger than ca={self.ca:g} F",
                RuntimeWarning,
                stacklevel=3,
            )


@dataclass(frozen=True)
class DeviceModel:
    """NPN pass-device assumptions used to map load current to small-signal values."""

    vt: float = 0.02585
    va: float = 50.0
    cp0: float = 10e-12
    rload_ext: float | None = None

    def __post_init__(self):
        _check_positive(self, ("vt", "va", "cp0"))
        if self.rload_ext is not None:
            _check_positive(self, ("rload_ext",))


@dataclass(frozen=True)
class OperatingPoint:
    il: float
    gmp: float
    ro: float
    cp: float


class AnalyticPoles(NamedTuple):
    p1: float
    p23: tuple[ComplexRoot, ComplexRoot]

    def locations(self) -> list[complex]:
        return [complex(-self.p1, 0.0)] + [r.value for r in self.p23]


NOMINAL_A = ProposedParams(
    gm1=1e-4, gm2=1e-3, gmp=1.0, ro1=1e6, ro2=1e5, ro=10.0, cm=4e-12, cp=1e-11, cf=1e-10
)


def dc_gain(p: ProposedParams) -> float:
    """Loop gain at DC: the product of the three stage gains."""
    return p.gm1 * p.gm2 * p.gmp * p.ro1 * p.ro2 * p.ro


def _dominant_time_constant(p: ProposedParams) -> float:
    return p.cm * p.ro1 * p.gm2 * p.gmp * p.ro2 * p.ro


def proposed_tf(p: ProposedParams) -> RationalFunction:
    """Loop gain H(s) of the proposed LDO in expanded coefficient form.

    ``H(s) = Adc (1 - a1 s - a2 s^2) / ((1 + t1 s)(1 + b1 s + b2 s^2))`` with
    the numerator terms set by the Miller feed-forward through ``cm`` and the
    quadratic denominator by ``cf`` and the pass-device gate capacitance.
    """
    g = p.gm2 * p.gmp
    num = Polynomial([1.0, -p.cm / (g * p.ro2), -p.cm * p.cp / g]).scale(dc_gain(p))
    dominant = Polynomial([1.0, _dominant_time_constant(p)])
    quad = Polynomial([1.0, p.cf / (g * p.ro2), p.cf * p.cp / g])
    return RationalFunction(num, poly_mul(dominant, quad))


def analytic_poles(p: ProposedParams) -> AnalyticPoles:
    """Closed-form dominant pole magnitude and non-dominant pole pair."""
    p1 = 1.0 / _dominant_time_constant(p)
    disc = p.cf**2 - 4.0 * p.cf * p.cp * p.ro2**2 * p.gm2 * p.gmp
    den = 2.0 * p.cf * p.cp * p.ro2
    if disc >= 0:
        # (-cf - sq) never cancels; the other root follows from Vieta
        sq = math.sqrt(disc)
        b = (-p.cf - sq) / den
        a = p.gm2 * p.gmp / (p.cf * p.cp) / b
        pair = (ComplexRoot(a, 0.0), ComplexRoot(b, 0.0))
    else:
        re, im = -p.cf / den, math.sqrt(-disc) / den
        pair = (ComplexRoot(re, im), ComplexRoot(re, -im))
    return AnalyticPoles(p1, pair)


def analytic_zeros(p: ProposedParams) -> tuple[float, float]:
    """Closed-form (right-half-plane, left-half-plane) zero pair."""
    disc = p.cm**2 + 4.0 * p.cm * p.cp * p.ro2**2 * p.gm2 * p.gmp
    sq = math.sqrt(disc)
    den = 2.0 * p.cm * p.cp * p.ro2
    z2 = (-p.cm - sq) / den
    # product of the roots is -gm2*gmp/(cm*cp); avoids cancellation in -cm + sq
    z1 = -p.gm2 * p.gmp / (p.cm * p.cp) / z2
    return z1, z2


def conventional_tf(c: ConventionalParams) -> RationalFunction:
    """``Adc (1 + s R_esr CL) / ((1 + s Ra Ca)(1 + s Ro CL))``."""
    num = Polynomial([c.adc, c.adc * c.r_esr * c.cl])
    den = poly_mul(Polynomial([1.0, c.ra * c.ca]), Polynomial([1.0, c.ro * c.cl]))
    return RationalFunction(num, den)


def conventional_poles_zero(c: ConventionalParams) -> tuple[float, float, float]:
    """(gate pole, output pole, ESR zero) frequencies in rad/s."""
    return 1.0 / (c.ra * c.ca), 1.0 / (c.ro * c.cl), 1.0 / (c.r_esr * c.cl)


def operating_point(il: float, d: DeviceModel) -> OperatingPoint:
    """Bias-dependent pass-device values at load current ``il``.

    NPN relations: ``gmp = il / vt`` and ``ro = va / il``, the latter in
    parallel with ``d.rload_ext`` when one is configured. The base parasitic
    ``cp`` does not depend on bias.
    """
    if not (isinstance(il, (int, float)) and math.isfinite(il) and il > 0):
        raise ParameterError("il", f"load current must be positive, got {il!r}")
    r_dev = d.va / il
    ro = r_dev if d.rload_ext is None else r_dev * d.rload_ext / (r_dev + d.rload_ext)
    return OperatingPoint(il=il, gmp=il / d.vt, ro=ro, cp=d.cp0)


def params_at_load(base: ProposedParams, d: DeviceModel, il: float) -> ProposedParams:
    """``base`` with its pass-device fields replaced by the values at ``il``."""
    op = operating_point(il, d)
    return replace(base, gmp=op.gmp, ro=op.ro, cp=op.cp)


def param_names(cls) -> list[str]:
    return [f.name for f in fields(cls)]
