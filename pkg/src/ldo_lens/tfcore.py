"""Polynomial and rational-function algebra in the Laplace variable ``s``.

Coefficient vectors are stored in *ascending* powers of ``s`` so that
``coeffs[k]`` multiplies ``s**k``. Everything here is immutable and pure, so
values may be shared freely between threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "TFError",
    "DegeneratePolynomialError",
    "RootConvergenceError",
    "PoleHitError",
    "Polynomial",
    "RationalFunction",
    "ComplexRoot",
    "BodeTable",
    "poly_mul",
    "roots",
    "eval_jw",
    "bode",
    "log_grid",
    "TOL_ROOT",
    "MAX_POLISH_ITER",
]

TOL_ROOT = 1e-9
MAX_POLISH_ITER = 500


class TFError(Exception):
    """Base class for transfer-function errors."""


class DegeneratePolynomialError(TFError):
    """Raised when root finding is asked for a zero or constant polynomial."""


class RootConvergenceError(TFError):
    """Root polishing did not reach the backward-error tolerance.

    Attributes
    ----------
    best : list of ComplexRoot
        Best iterate found before giving up.
    """

    def __init__(self, message: str, best: list["ComplexRoot"]):
        super().__init__(message)
        self.best = best


class PoleHitError(TFError):
    """Evaluation frequency coincides with a pole on the imaginary axis."""

    def __init__(self, omega: float):
        super().__init__(f"denominator vanishes at omega = {omega!r} rad/s (pole on the jw axis)")
        self.omega = omega


def _as_coeff_tuple(coeffs: Sequence[float]) -> tuple[float, ...]:
    arr = np.asarray(coeffs, dtype=float).ravel()
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"polynomial coefficients must be finite, got {arr.tolist()}")
    nz = np.flatnonzero(arr)
    if nz.size == 0:
        return ()
    return tuple(float(c) for c in arr[: nz[-1] + 1])


@dataclass(frozen=True)
class Polynomial:
    """Real polynomial in ``s`` with ascending coefficients.

    Trailing zeros are trimmed on construction. The zero polynomial has an
    empty coefficient tuple and ``degree`` is ``None`` for it.
    """

    coeffs: tuple[float, ...]

    def __init__(self, coeffs: Sequence[float]):
        object.__setattr__(self, "coeffs", _as_coeff_tuple(coeffs))

    @property
    def degree(self) -> int | None:
        return len(self.coeffs) - 1 if self.coeffs else None

    @property
    def is_zero(self) -> bool:
        return not self.coeffs

    @property
    def leading(self) -> float:
        return self.coeffs[-1] if self.coeffs else 0.0

    def __call__(self, s):
        # Horner, works for scalars and numpy arrays (real or complex)
        acc = np.zeros_like(np.asarray(s, dtype=complex)) if np.ndim(s) else 0j
        for c in reversed(self.coeffs):
            acc = acc * s + c
        return acc

    def __mul__(self, other: "Polynomial") -> "Polynomial":
        return poly_mul(self, other)

    def scale(self, k: float) -> "Polynomial":
        return Polynomial([k * c for c in self.coeffs])

    def __repr__(self) -> str:
        return f"Polynomial({list(self.coeffs)!r})"


@dataclass(frozen=True)
class ComplexRoot:
    """A root location in rad/s."""

    re: float
    im: float
    multiplicity_hint: int = 1

    @property
    def value(self) -> complex:
        return complex(self.re, self.im)

    @property
    def magnitude(self) -> float:
        return math.hypot(self.re, self.im)

    @property
    def is_real(self) -> bool:
        return self.im == 0.0

    def __complex__(self) -> complex:
        return self.value


def poly_mul(a: Polynomial, b: Polynomial) -> Polynomial:
    """Product of two polynomials (discrete convolution of coefficients)."""
    if a.is_zero or b.is_zero:
        return Polynomial([])
    return Polynomial(np.convolve(a.coeffs, b.coeffs))


def _scale_factor(c: np.ndarray) -> float:
    # geometric mean of consecutive coefficient ratios, rounded to a power of 2
    nz = np.flatnonzero(c)
    lo, hi = nz[0], nz[-1]
    if hi == lo:
        return 1.0
    log2_sigma = (math.log2(abs(c[lo])) - math.log2(abs(c[hi]))) / (hi - lo)
    return 2.0 ** round(log2_sigma)


def _residual_ok(p: Polynomial, r: complex, cmax: float, n: int, tol: float) -> bool:
    return abs(p(r)) <= tol * cmax * max(1.0, abs(r)) ** n


def _polish(p: Polynomial, dp: Polynomial, r: complex, budget: int) -> tuple[complex, int]:
    best, best_res = r, abs(p(r))
    used = 0
    while used < budget and best_res > 0.0:
        d = dp(best)
        if d == 0:
            break
        cand = best - p(best) / d
        used += 1
        res = abs(p(cand))
        if not res < best_res:
            break
        best, best_res = cand, res
    return best, used


def _pair_conjugates(vals: np.ndarray, rel_tol: float) -> np.ndarray:
    """Snap near-real roots onto the real axis and symmetrize conjugate pairs."""
    vals = vals.astype(complex).copy()
    scale = np.maximum(np.abs(vals), np.finfo(float).tiny)
    near_real = np.abs(vals.imag) <= 1e-12 * scale
    vals[near_real] = vals[near_real].real
    upper = [i for i in range(len(vals)) if vals[i].imag > 0]
    lower = [i for i in range(len(vals)) if vals[i].imag < 0]
    if len(upper) != len(lower):
        raise RootConvergenceError(
            "conjugate pairing failed for a real-coefficient polynomial",
            [ComplexRoot(v.real, v.imag) for v in vals],
        )
    used: set[int] = set()
    for i in upper:
        j = min((k for k in lower if k not in used), key=lambda k: abs(vals[k] - np.conj(vals[i])))
        if abs(vals[j] - np.conj(vals[i])) > rel_tol * scale[i]:
            raise RootConvergenceError(
                f"root {vals[i]} has no conjugate partner within tolerance",
                [ComplexRoot(v.real, v.imag) for v in vals],
            )
        used.add(j)
        re = 0.5 * (vals[i].real + vals[j].real)
        im = 0.5 * (vals[i].imag - vals[j].imag)
        vals[i], vals[j] = complex(re, im), complex(re, -im)
    return vals


def roots(p: Polynomial, tol: float = TOL_ROOT) -> list[ComplexRoot]:
    """Numeric roots of ``p`` via a scaled companion-matrix eigenproblem.

    The variable is rescaled as ``s = sigma * s'`` (``sigma`` a power of two)
    so coefficients spanning many decades stay well conditioned, then each
    eigenvalue is Newton-polished in the original scale. Every returned root
    satisfies ``|p(r)| <= tol * max|c| * max(1, |r|)**degree``.

    Raises
    ------
    DegeneratePolynomialError
        If ``p`` is the zero polynomial or a constant.
    RootConvergenceError
        If some root misses the backward-error bound after polishing.
    """
    n = p.degree
    if n is None or n < 1:
        raise DegeneratePolynomialError(f"roots() needs degree >= 1, got {p!r}")
    c = np.asarray(p.coeffs, dtype=float)
    n_zero = int(np.flatnonzero(c)[0])
    core = c[n_zero:]
    m = core.size - 1

    vals = np.zeros(n_zero, dtype=complex)
    if m >= 1:
        sigma = _scale_factor(core)
        scaled = core * sigma ** np.arange(m + 1)
        monic = scaled / scaled[-1]
        comp = np.zeros((m, m))
        comp[0, :] = -monic[-2::-1]
        if m > 1:
            comp[1:, :-1] = np.eye(m - 1)
        vals = np.concatenate([vals, np.linalg.eigvals(comp) * sigma])

    dp = Polynomial([k * ck for k, ck in enumerate(p.coeffs)][1:])
    cmax = float(np.max(np.abs(c)))
    budget = MAX_POLISH_ITER
    for i, r in enumerate(vals):
        if r == 0:
            continue
        if not _residual_ok(p, r, cmax, n, tol * 1e-3):
            vals[i], used = _polish(p, dp, complex(r), budget)
            budget -= used

    vals = _pair_conjugates(vals, rel_tol=1e-6)
    bad = [v for v in vals if not _residual_ok(p, v, cmax, n, tol)]

    order = np.lexsort((vals.imag, np.abs(vals)))
    vals = vals[order]
    out = []
    for v in vals:
        mult = int(np.sum(np.abs(vals - v) <= 1e-6 * max(abs(v), np.finfo(float).tiny)))
        out.append(ComplexRoot(float(v.real), float(v.imag), max(1, mult)))
    if bad:
        raise RootConvergenceError(
            f"{len(bad)} root(s) exceed backward error {tol:g} after {MAX_POLISH_ITER} polish steps",
            out,
        )
    return out


@dataclass(frozen=True)
class RationalFunction:
    """``num(s) / den(s)``; common factors are never cancelled implicitly."""

    num: Polynomial
    den: Polynomial

    def __post_init__(self):
        if self.den.is_zero:
            raise ValueError("denominator of a RationalFunction cannot be the zero polynomial")

    def __call__(self, s):
        return self.num(s) / self.den(s)

    def scaled(self, k: float) -> "RationalFunction":
        return RationalFunction(self.num.scale(k), self.den)

    def dc_value(self) -> float:
        return self.num.coeffs[0] / self.den.coeffs[0] if self.num.coeffs else 0.0

    def poles(self) -> list[ComplexRoot]:
        return [] if (self.den.degree or 0) < 1 else roots(self.den)

    def zeros(self) -> list[ComplexRoot]:
        return [] if self.num.is_zero or (self.num.degree or 0) < 1 else roots(self.num)

    def near_cancellations(self, rel_tol: float = 1e-6) -> list[tuple[ComplexRoot, ComplexRoot]]:
        """Pole/zero pairs closer than ``rel_tol`` relative to the pole magnitude."""
        pairs = []
        free_z = list(self.zeros())
        for pole in self.poles():
            for z in free_z:
                if abs(z.value - pole.value) <= rel_tol * max(pole.magnitude, np.finfo(float).tiny):
                    pairs.append((pole, z))
                    free_z.remove(z)
                    break
        return pairs

    def cancel(self, rel_tol: float = 1e-6) -> "RationalFunction":
        """Rebuild the function with near-cancelling pole/zero pairs removed.

        Factors are rebuilt as ``(1 - s/r)`` so the DC value is preserved.
        """
        pairs = self.near_cancellations(rel_tol)
        if not pairs:
            return self
        gone_p = [p for p, _ in pairs]
        gone_z = [z for _, z in pairs]
        keep_p = _without(self.poles(), gone_p)
        keep_z = _without(self.zeros(), gone_z)
        return RationalFunction(
            _from_roots(keep_z).scale(self.dc_value()),
            _from_roots(keep_p),
        )


def _without(items: list[ComplexRoot], drop: list[ComplexRoot]) -> list[ComplexRoot]:
    out = list(items)
    for d in drop:
        out.remove(d)
    return out


def _from_roots(rs: list[ComplexRoot]) -> Polynomial:
    # product of (1 - s/r); conjugate pairs combine into real quadratics
    poly = Polynomial([1.0])
    for r in rs:
        if r.im < 0:
            continue
        if r.im == 0:
            poly = poly_mul(poly, Polynomial([1.0, -1.0 / r.re]))
        else:
            mag2 = r.re * r.re + r.im * r.im
            poly = poly_mul(poly, Polynomial([1.0, -2.0 * r.re / mag2, 1.0 / mag2]))
    return poly


def _pole_guard(den: Polynomial, omega) -> np.ndarray:
    cmax = max(abs(c) for c in den.coeffs)
    n = den.degree or 0
    return np.finfo(float).tiny * max(1.0, cmax) * np.maximum(1.0, np.abs(omega)) ** n


def eval_jw(h: RationalFunction, omega: float) -> complex:
    """Evaluate ``H(j*omega)`` exactly as ``num(j omega) / den(j omega)``."""
    if not omega >= 0:
        raise ValueError(f"omega must be >= 0, got {omega!r}")
    s = 1j * omega
    d = h.den(s)
    if abs(d) <= _pole_guard(h.den, omega):
        raise PoleHitError(omega)
    return complex(h.num(s) / d)


class BodeTable(NamedTuple):
    omega: np.ndarray
    mag_db: np.ndarray
    phase_deg: np.ndarray


def log_grid(w_min: float, w_max: float, points_per_decade: int = 50) -> np.ndarray:
    """Log-spaced grid including both endpoints."""
    if not 0 < w_min < w_max:
        raise ValueError(f"need 0 < w_min < w_max, got {w_min!r}, {w_max!r}")
    n = max(2, int(math.ceil(math.log10(w_max / w_min) * points_per_decade)) + 1)
    return np.logspace(math.log10(w_min), math.log10(w_max), n)


def bode(h: RationalFunction, grid) -> BodeTable:
    """Magnitude (dB) and continuously unwrapped phase (degrees) on ``grid``."""
    w = np.asarray(grid, dtype=float)
    if w.ndim != 1 or w.size == 0 or np.any(w <= 0) or np.any(np.diff(w) <= 0):
        raise ValueError("bode grid must be a non-empty, strictly increasing array of positive frequencies")
    s = 1j * w
    d = h.den(s)
    hit = np.abs(d) <= _pole_guard(h.den, w)
    if np.any(hit):
        raise PoleHitError(float(w[np.argmax(hit)]))
    val = h.num(s) / d
    with np.errstate(divide="ignore"):
        mag_db = 20.0 * np.log10(np.abs(val))
    phase = np.degrees(np.unwrap(np.angle(val)))
    return BodeTable(w, mag_db, phase)
