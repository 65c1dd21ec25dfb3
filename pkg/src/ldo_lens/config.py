"""Flat ``section.key = value`` configuration files.

Every physical quantity carries its SI unit as a key suffix (``_f``, ``_ohm``,
``_s``, ``_a``, ``_v``, ``_s`` for siemens on transconductances). ``#`` starts
a comment. Unknown keys are rejected so typos fail before any computation.

Example::

    proposed.gm1_s = 1e-4
    proposed.cm_f  = 4e-12
    device.rload_ext_ohm = 12.5
    operating.il_a = 0.1     # derive gmp, ro, cp from the device model
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from .ldomodel import ConventionalParams, DeviceModel, ParameterError, ProposedParams, params_at_load
from .stability import DEFAULT_BOUNDS, DEFAULT_FREE, CalibrationTargets
from .transient import DEFAULT_BAND, I_MAX, FastPathParams, LoadStep

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config", "dump_config", "DEFAULT_TEXT"]


class ConfigError(ValueError):
    """Malformed or invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str, line: int | None = None):
        where = f" (line {line})" if line else ""
        super().__init__(f"{key}{where}: {message}")
        self.key = key
        self.line = line


# key -> (section object, attribute, kind)
_PROPOSED = {
    "gm1_s": "gm1",
    "gm2_s": "gm2",
    "gmp_s": "gmp",
    "ro1_ohm": "ro1",
    "ro2_ohm": "ro2",
    "ro_ohm": "ro",
    "cm_f": "cm",
    "cp_f": "cp",
    "cf_f": "cf",
    "cf_override": "cf_override",
}
_DEVICE = {"vt_v": "vt", "va_v": "va", "cp0_f": "cp0", "rload_ext_ohm": "rload_ext"}
_CONVENTIONAL = {
    "ra_ohm": "ra",
    "ca_f": "ca",
    "ro_ohm": "ro",
    "cl_f": "cl",
    "r_esr_ohm": "r_esr",
    "adc": "adc",
}
_FASTPATH = {
    "c1_f": "c1",
    "r_hp_ohm": "r_hp",
    "g_fast_s": "g_fast",
    "i_bias_fast_a": "i_bias_fast",
    "enabled": "enabled",
}
_STEP = {
    "i_low_a": "i_low",
    "i_high_a": "i_high",
    "t_step_s": "t_step",
    "t_rise_s": "t_rise",
    "direction": "direction",
}
_BOOL_KEYS = {"proposed.cf_override", "fastpath.enabled", "transient.ab_compare", "conventional.enabled"}
_STR_KEYS = {"transient.direction", "calibrate.free", "run.out_dir"}
_INT_KEYS = {"run.seed", "sweep.points", "bode.points_per_decade", "transient.n_samples",
             "calibrate.max_evals", "calibrate.restarts"}

_SCALAR_KEYS = {
    "operating.il_a",
    "transient.t_end_s",
    "transient.tol",
    "transient.band_v",
    "transient.c_int1_f",
    "transient.i_max_a",
    "transient.target_peak_v",
    "sweep.il_min_a",
    "sweep.il_max_a",
    "bode.omega_min_rad_s",
    "bode.omega_max_rad_s",
    "bode.il_a",
    "calibrate.target_gain_db",
    "calibrate.target_pm_deg",
    "calibrate.il_a",
    "calibrate.fail_above",
    "meta.quiescent_current_a",
    "meta.vin_v",
    "meta.v_nominal_v",
}


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved run configuration.

    ``proposed`` holds the pass-device values at ``operating_il`` when that is
    set, otherwise the literal values from the file.
    """

    proposed: ProposedParams
    device: DeviceModel
    conventional: ConventionalParams | None
    fast: FastPathParams
    step: LoadStep
    operating_il: float | None = None
    t_end: float = 100e-6
    tol: float = 1e-6
    band: float = DEFAULT_BAND
    c_int1: float | None = None
    i_max: float = I_MAX
    n_samples: int = 4001
    ab_compare: bool = True
    target_peak: float = 0.040
    sweep_range: tuple[float, float] = (1e-3, 0.2)
    sweep_points: int = 25
    bode_range: tuple[float, float] = (1e0, 1e12)
    bode_ppd: int = 50
    bode_il: float | None = None
    targets: CalibrationTargets = CalibrationTargets()
    free: tuple[str, ...] = DEFAULT_FREE
    bounds: dict = field(default_factory=dict)
    max_evals: int = 2000
    restarts: int = 3
    fail_above: float = 0.25
    seed: int = 0
    out_dir: str | None = None
    meta: dict = field(default_factory=dict)

    def at_load(self, il: float | None) -> ProposedParams:
        """Proposed parameters biased at ``il`` (or as configured when None)."""
        return self.proposed if il is None else params_at_load(self.proposed, self.device, il)


def _parse_value(key: str, raw: str, line: int):
    if key in _BOOL_KEYS:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(key, f"expected a boolean, got {raw!r}", line)
    if key in _STR_KEYS:
        return raw
    if key in _INT_KEYS:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(key, f"expected an integer, got {raw!r}", line) from None
    if key == "device.rload_ext_ohm" and raw.lower() in ("none", ""):
        return None
    if key.startswith("calibrate.bound."):
        parts = [s.strip() for s in raw.split(",")]
        if len(parts) != 2:
            raise ConfigError(key, f"expected 'lo, hi', got {raw!r}", line)
        try:
            return float(parts[0]), float(parts[1])
        except ValueError:
            raise ConfigError(key, f"expected two numbers, got {raw!r}", line) from None
    try:
        v = float(raw)
    except ValueError:
        raise ConfigError(key, f"expected a number, got {raw!r}", line) from None
    if not math.isfinite(v):
        raise ConfigError(key, f"must be finite, got {raw!r}", line)
    return v


def _known(key: str) -> bool:
    sec, _, name = key.partition(".")
    table = {
        "proposed": _PROPOSED,
        "device": _DEVICE,
        "conventional": {**_CONVENTIONAL, "enabled": None},
        "fastpath": _FASTPATH,
    }.get(sec)
    if table is not None:
        return name in table
    if sec == "transient" and name in _STEP:
        return True
    if key.startswith("calibrate.bound."):
        return key.split(".", 2)[2] in DEFAULT_BOUNDS
    return key in _SCALAR_KEYS or key in _INT_KEYS or key in _STR_KEYS or key in _BOOL_KEYS


def parse_pairs(text: str) -> dict:
    """Parse the raw text into an ordered ``{key: value}`` dict."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ConfigError(s, "expected 'key = value'", n)
        key, _, raw = s.partition("=")
        key, raw = key.strip(), raw.strip()
        if not _known(key):
            raise ConfigError(key, "unknown key", n)
        if key in out:
            raise ConfigError(key, "duplicate key", n)
        out[key] = _parse_value(key, raw, n)
    return out


def _section(kv: dict, prefix: str, mapping: dict) -> dict:
    return {attr: kv[f"{prefix}.{k}"] for k, attr in mapping.items() if f"{prefix}.{k}" in kv}


def _build(cls, kwargs, prefix, mapping):
    inverse = {v: k for k, v in mapping.items()}
    try:
        return cls(**kwargs)
    except ParameterError as exc:
        raise ConfigError(f"{prefix}.{inverse.get(exc.field, exc.field)}", str(exc)) from None
    except TypeError as exc:
        raise ConfigError(prefix, f"incomplete section: {exc}") from None


def parse_config(text: str) -> RunConfig:
    """Validate and resolve configuration text. Raises :class:`ConfigError`."""
    kv = parse_pairs(text)
    device = _build(DeviceModel, _section(kv, "device", _DEVICE), "device", _DEVICE)

    pk = _section(kv, "proposed", _PROPOSED)
    il = kv.get("operating.il_a")
    if il is not None:
        if not 0 < il <= 1.0:
            raise ConfigError("operating.il_a", f"must lie in (0, 1] A, got {il!r}")
        # placeholders; replaced by the operating point below
        for attr in ("gmp", "ro", "cp"):
            if attr in pk:
                raise ConfigError(f"proposed.{attr}", "cannot be set together with operating.il_a")
            pk[attr] = 1.0
    proposed = _build(ProposedParams, pk, "proposed", _PROPOSED)
    if il is not None:
        proposed = params_at_load(proposed, device, il)

    conventional = None
    ck = _section(kv, "conventional", _CONVENTIONAL)
    if ck and kv.get("conventional.enabled", True):
        conventional = _build(ConventionalParams, ck, "conventional", _CONVENTIONAL)

    fk = _section(kv, "fastpath", _FASTPATH)
    fk.setdefault("enabled", False)
    fast = _build(FastPathParams, fk, "fastpath", _FASTPATH)
    step = _build(LoadStep, _section(kv, "transient", _STEP), "transient", _STEP)

    def pos(key, default):
        v = kv.get(key, default)
        if v is not None and not v > 0:
            raise ConfigError(key, f"must be positive, got {v!r}")
        return v

    t_end = pos("transient.t_end_s", 100e-6)
    if not t_end > step.t_step + step.t_rise:
        raise ConfigError("transient.t_end_s", "must exceed t_step + t_rise")
    tol = kv.get("transient.tol", 1e-6)
    if not 1e-10 <= tol <= 1e-3:
        raise ConfigError("transient.tol", f"must lie in [1e-10, 1e-3], got {tol!r}")
    sweep = (pos("sweep.il_min_a", 1e-3), pos("sweep.il_max_a", 0.2))
    if sweep[0] > sweep[1] or sweep[1] > 1.0:
        raise ConfigError("sweep.il_max_a", f"need il_min <= il_max <= 1 A, got {sweep!r}")
    bode = (pos("bode.omega_min_rad_s", 1e0), pos("bode.omega_max_rad_s", 1e12))
    if not bode[0] < bode[1]:
        raise ConfigError("bode.omega_max_rad_s", "must exceed bode.omega_min_rad_s")

    free = tuple(s.strip() for s in kv.get("calibrate.free", ",".join(DEFAULT_FREE)).split(",") if s.strip())
    for name in free:
        if name not in DEFAULT_BOUNDS:
            raise ConfigError("calibrate.free", f"unknown free parameter {name!r} (choose from {sorted(DEFAULT_BOUNDS)})")
    bounds = {k.split(".", 2)[2]: v for k, v in kv.items() if k.startswith("calibrate.bound.")}
    for name, (lo, hi) in bounds.items():
        if not 0 < lo < hi:
            raise ConfigError(f"calibrate.bound.{name}", f"need 0 < lo < hi, got ({lo!r}, {hi!r})")

    for key in ("sweep.points", "bode.points_per_decade", "transient.n_samples", "calibrate.max_evals"):
        if key in kv and kv[key] < 1:
            raise ConfigError(key, f"must be >= 1, got {kv[key]!r}")
    seed = kv.get("run.seed", 0)
    if not 0 <= seed < 2**64:
        raise ConfigError("run.seed", "must be an unsigned 64-bit integer")

    return RunConfig(
        proposed=proposed,
        device=device,
        conventional=conventional,
        fast=fast,
        step=step,
        operating_il=il,
        t_end=t_end,
        tol=tol,
        band=pos("transient.band_v", DEFAULT_BAND),
        c_int1=pos("transient.c_int1_f", None),
        i_max=pos("transient.i_max_a", I_MAX),
        n_samples=kv.get("transient.n_samples", 4001),
        ab_compare=kv.get("transient.ab_compare", True),
        target_peak=pos("transient.target_peak_v", 0.040),
        sweep_range=sweep,
        sweep_points=kv.get("sweep.points", 25),
        bode_range=bode,
        bode_ppd=kv.get("bode.points_per_decade", 50),
        bode_il=pos("bode.il_a", None),
        targets=CalibrationTargets(
            gain_db=kv.get("calibrate.target_gain_db", 58.0),
            pm_deg=kv.get("calibrate.target_pm_deg", 64.0),
            il=pos("calibrate.il_a", 0.1),
        ),
        free=free,
        bounds=bounds,
        max_evals=kv.get("calibrate.max_evals", 2000),
        restarts=kv.get("calibrate.restarts", 3),
        fail_above=pos("calibrate.fail_above", 0.25),
        seed=seed,
        out_dir=kv.get("run.out_dir"),
        meta={k.split(".", 1)[1]: v for k, v in kv.items() if k.startswith("meta.")},
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def config_pairs(cfg: RunConfig) -> list[tuple[str, object]]:
    """Every resolved setting as ``(key, value)``; the config echo."""
    p = cfg.proposed
    out: list[tuple[str, object]] = []
    for k, attr in _PROPOSED.items():
        if cfg.operating_il is not None and attr in ("gmp", "ro", "cp"):
            continue
        out.append((f"proposed.{k}", getattr(p, attr)))
    if cfg.operating_il is not None:
        out.append(("operating.il_a", cfg.operating_il))
    out += [(f"device.{k}", getattr(cfg.device, a)) for k, a in _DEVICE.items()]
    if cfg.conventional is not None:
        out += [(f"conventional.{k}", getattr(cfg.conventional, a)) for k, a in _CONVENTIONAL.items()]
    out += [(f"fastpath.{k}", getattr(cfg.fast, a)) for k, a in _FASTPATH.items()]
    out += [(f"transient.{k}", getattr(cfg.step, a)) for k, a in _STEP.items()]
    out += [
        ("transient.t_end_s", cfg.t_end),
        ("transient.tol", cfg.tol),
        ("transient.band_v", cfg.band),
        ("transient.i_max_a", cfg.i_max),
        ("transient.n_samples", cfg.n_samples),
        ("transient.ab_compare", cfg.ab_compare),
        ("transient.target_peak_v", cfg.target_peak),
    ]
    if cfg.c_int1 is not None:
        out.append(("transient.c_int1_f", cfg.c_int1))
    out += [
        ("sweep.il_min_a", cfg.sweep_range[0]),
        ("sweep.il_max_a", cfg.sweep_range[1]),
        ("sweep.points", cfg.sweep_points),
        ("bode.omega_min_rad_s", cfg.bode_range[0]),
        ("bode.omega_max_rad_s", cfg.bode_range[1]),
        ("bode.points_per_decade", cfg.bode_ppd),
    ]
    if cfg.bode_il is not None:
        out.append(("bode.il_a", cfg.bode_il))
    out += [
        ("calibrate.target_gain_db", cfg.targets.gain_db),
        ("calibrate.target_pm_deg", cfg.targets.pm_deg),
        ("calibrate.il_a", cfg.targets.il),
        ("calibrate.free", ",".join(cfg.free)),
        ("calibrate.max_evals", cfg.max_evals),
        ("calibrate.restarts", cfg.restarts),
        ("calibrate.fail_above", cfg.fail_above),
    ]
    out += [(f"calibrate.bound.{k}", tuple(v)) for k, v in sorted(cfg.bounds.items())]
    out.append(("run.seed", cfg.seed))
    if cfg.out_dir is not None:
        out.append(("run.out_dir", cfg.out_dir))
    out += [(f"meta.{k}", v) for k, v in sorted(cfg.meta.items())]
    return out


def dump_config(cfg: RunConfig, header: str = "") -> str:
    """Serialize ``cfg`` so that ``parse_config(dump_config(cfg)) == cfg``."""
    lines = [f"# {h}" if h else "#" for h in header.splitlines()] if header else []
    section = None
    for key, value in config_pairs(cfg):
        sec = key.split(".", 1)[0]
        if sec != section:
            if lines:
                lines.append("")
            section = sec
        lines.append(f"{key} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


def with_updates(cfg: RunConfig, proposed: ProposedParams | None = None, device: DeviceModel | None = None,
                 fast: FastPathParams | None = None) -> RunConfig:
    """Copy of ``cfg`` with new model objects, keeping the operating-point mapping consistent."""
    device = device or cfg.device
    proposed = proposed or cfg.proposed
    if cfg.operating_il is not None:
        proposed = params_at_load(proposed, device, cfg.operating_il)
    return replace(cfg, proposed=proposed, device=device, fast=fast or cfg.fast)


DEFAULT_TEXT = """\
# default scenario; meta.* values are recorded, not simulated
proposed.gm1_s = 1e-4
proposed.gm2_s = 1e-3
proposed.ro1_ohm = 1e7
proposed.ro2_ohm = 1e3
proposed.cm_f = 4e-12
proposed.cf_f = 1e-10
operating.il_a = 0.1
device.rload_ext_ohm = 12.5
meta.quiescent_current_a = 45e-6
meta.vin_v = -15
meta.v_nominal_v = 1.25
"""
