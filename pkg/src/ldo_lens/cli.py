"""``ldo-lens`` command-line tool.

Commands: ``bode``, ``poles``, ``pm-sweep``, ``transient``, ``calibrate`` and
``compare``. Every command reads a config file, writes CSV/SVG artifacts plus
``run_report.json`` into the output directory, and maps failures to exit
codes:

    0  success
    1  unexpected internal error (also solver stiffness or divergence)
    2  configuration or I/O error
    3  model inconsistency (analytic vs numeric pole/zero mismatch)
    4  phase margin below 50 degrees somewhere in the sweep
    5  calibration failed
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, config_pairs, dump_config, load_config, with_updates
from .ldomodel import (
    ConventionalParams,
    ParameterError,
    analytic_poles,
    analytic_zeros,
    conventional_poles_zero,
    conventional_tf,
    dc_gain,
    operating_point,
    proposed_tf,
)
from .stability import CalibrationError, analyze, calibrate, pm_sweep
from .svg import Panel, Series, render
from .tfcore import TFError, bode, log_grid
from .transient import InstabilityError, StiffnessError, ab_compare, calibrate_fast_path, metrics, model_for_step, simulate

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_INCONSISTENT, EXIT_PM, EXIT_CALIBRATION = range(6)
PM_LIMIT = 50.0
POLE_RTOL = 1e-6
FMT = "%.12e"

# baseline used by ``compare`` when the config has no conventional section
DEFAULT_CONVENTIONAL = dict(ra=1e6, ca=1e-12, cl=1e-6, r_esr=1.0)


def _num(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return FMT % float(v)


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([x if isinstance(x, str) else _num(x) for x in row])


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def _root_dict(r):
    r = complex(r)
    return {"re": r.real, "im": r.imag}


# ------------------------------------------------------------------ commands


def _bode_params(cfg: RunConfig):
    return cfg.at_load(cfg.bode_il)


def cmd_bode(cfg: RunConfig, out: Path, points: int | None) -> tuple[dict, int]:
    p = _bode_params(cfg)
    h = proposed_tf(p)
    grid = log_grid(*cfg.bode_range, points or cfg.bode_ppd)
    tab = bode(h, grid)
    write_csv(
        out / "bode.csv",
        ["omega_rad_s", "freq_hz", "mag_db", "phase_deg"],
        zip(tab.omega, tab.omega / (2 * math.pi), tab.mag_db, tab.phase_deg),
    )
    rep = analyze(h)
    marks = [(r.magnitude, "p") for r in rep.poles] + [(r.magnitude, "z") for r in rep.zeros]
    marks = [(w, f"|{k}|") for w, k in marks if cfg.bode_range[0] <= w <= cfg.bode_range[1]]
    (out / "bode.svg").write_text(
        render(
            [
                Panel([Series(tab.omega, tab.mag_db, "magnitude")], "", "magnitude (dB)", xlog=True,
                      hlines=[(0.0, "0 dB")], vlines=marks),
                Panel([Series(tab.omega, tab.phase_deg, "phase", color="#d62728")], "omega (rad/s)",
                      "phase (deg)", xlog=True, vlines=[(rep.ugf, "UGF")]),
            ],
            title="Loop gain",
        )
    )
    res = {
        "dc_gain_db": rep.dc_gain_db,
        "ugf_rad_s": rep.ugf,
        "phase_margin_deg": rep.phase_margin,
        "gain_margin_db": rep.gain_margin_db,
        "dominant_pole_ok": rep.dominant_pole_ok,
        "poles": [_root_dict(r) for r in rep.poles],
        "zeros": [_root_dict(r) for r in rep.zeros],
    }
    print(f"DC gain {rep.dc_gain_db:.3f} dB, UGF {rep.ugf:.6e} rad/s, PM {rep.phase_margin:.2f} deg")
    return res, EXIT_OK


def _match(analytic: list[complex], numeric: list[complex]) -> list[tuple[complex, complex]]:
    left = list(numeric)
    pairs = []
    for a in analytic:
        k = min(range(len(left)), key=lambda i: abs(left[i] - a))
        pairs.append((a, left.pop(k)))
    return pairs


def cmd_poles(cfg: RunConfig, out: Path, points: int | None) -> tuple[dict, int]:
    p = _bode_params(cfg)
    h = proposed_tf(p)
    ap = analytic_poles(p)
    z1, z2 = analytic_zeros(p)
    rows = []
    for prefix, ana, num in (
        ("p", ap.locations(), [r.value for r in h.poles()]),
        ("z", [complex(z1), complex(z2)], [r.value for r in h.zeros()]),
    ):
        for i, (a, n) in enumerate(_match(ana, num), 1):
            rows.append((f"{prefix}{i}", a, n, abs(n - a) / abs(a)))
    worst = max(r[3] for r in rows)
    write_csv(
        out / "poles.csv",
        ["name", "analytic_re", "analytic_im", "numeric_re", "numeric_im", "rel_dev"],
        [(n, a.real, a.imag, x.real, x.imag, d) for n, a, x, d in rows],
    )
    print(f"{'':4} {'analytic':>30} {'numeric':>30} {'rel dev':>10}")
    for n, a, x, d in rows:
        print(f"{n:4} {a.real:14.6e}{a.imag:+14.6e}j {x.real:14.6e}{x.imag:+14.6e}j {d:10.2e}")
    res = {"rows": [{"name": n, "analytic": _root_dict(a), "numeric": _root_dict(x), "rel_dev": d}
                    for n, a, x, d in rows], "max_rel_dev": worst}
    if worst >= POLE_RTOL:
        print(f"model inconsistency: max relative deviation {worst:.3e} >= {POLE_RTOL:g}", file=sys.stderr)
        return res, EXIT_INCONSISTENT
    return res, EXIT_OK


def cmd_pm_sweep(cfg: RunConfig, out: Path, points: int | None) -> tuple[dict, int]:
    n = points or cfg.sweep_points
    rows = pm_sweep(cfg.proposed, cfg.device, cfg.sweep_range, n, workers=4)
    csv_rows = []
    for r in rows:
        if r.ok:
            rep = r.report
            csv_rows.append((r.il, rep.dc_gain_db, rep.ugf, rep.phase_margin, rep.dominant_pole_ok, ""))
        else:
            csv_rows.append((r.il, None, None, None, None, r.error))
    write_csv(out / "pm_sweep.csv", ["il_a", "gain_db", "ugf_rad_s", "pm_deg", "dominant_pole_ok", "error"], csv_rows)
    good = [r for r in rows if r.ok]
    il = np.array([r.il for r in good])
    pm = np.array([r.report.phase_margin for r in good])
    (out / "pm_sweep.svg").write_text(
        render(
            [Panel([Series(il, pm, "phase margin")], "load current (A)", "phase margin (deg)", xlog=True,
                   hlines=[(PM_LIMIT, "50 deg")])],
            title="Phase margin across load",
        )
    )
    failed = len(rows) - len(good)
    min_pm = float(pm.min()) if good else None
    all_dom = all(r.report.dominant_pole_ok for r in good)
    res = {"points": len(rows), "failed_rows": failed, "min_pm_deg": min_pm,
           "il_at_min_pm_a": float(il[pm.argmin()]) if good else None, "dominant_pole_ok_all": all_dom}
    print(f"min PM {min_pm if min_pm is None else round(min_pm, 3)} deg over {len(rows)} points"
          f" ({failed} failed rows), dominant pole ok everywhere: {all_dom}")
    code = EXIT_OK if (failed == 0 and min_pm is not None and min_pm > PM_LIMIT) else EXIT_PM
    return res, code


def _metrics_dict(m):
    return {"peak_dev_v": m.peak_dev, "recovery_time_s": m.recovery_time, "settling_band_v": m.settling_band,
            "settled": m.settled}


def cmd_transient(cfg: RunConfig, out: Path, points: int | None) -> tuple[dict, int]:
    n = points or cfg.n_samples
    step = cfg.step
    build = lambda f: model_for_step(cfg.proposed, cfg.device, f, step, cfg.c_int1, cfg.i_max)
    ab = cfg.ab_compare and cfg.fast.enabled
    if ab:
        r = ab_compare(build(cfg.fast), build(replace(cfg.fast, enabled=False)), step, cfg.t_end, cfg.tol,
                       cfg.band, n)
        w, m = r.wave_on, r.on
        write_csv(out / "transient_off.csv", ["t_s", "vout_dev_v", "il_a"], zip(*r.wave_off))
    else:
        w = simulate(build(cfg.fast), step, cfg.t_end, cfg.tol, n)
        m = metrics(w, step, cfg.band)
    write_csv(out / "transient.csv", ["t_s", "vout_dev_v", "il_a"], zip(*w))
    label = "fast path on" if cfg.fast.enabled else "fast path off"
    series = [Series(w.t * 1e6, w.vout * 1e3, label)]
    if ab:
        series.append(Series(r.wave_off.t * 1e6, r.wave_off.vout * 1e3, "fast path off", dash="5,3"))
    band_mv = cfg.band * 1e3
    (out / "transient.svg").write_text(
        render(
            [
                Panel(series, "", "vout deviation (mV)", hlines=[(band_mv, "band"), (-band_mv, "")]),
                Panel([Series(w.t * 1e6, w.il * 1e3, "load", color="#2ca02c")], "time (us)", "load (mA)"),
            ],
            title="Load transient",
        )
    )
    res = {"primary": _metrics_dict(m), "fast_path_enabled": cfg.fast.enabled}
    print(f"{label}: peak {m.peak_dev * 1e3:.3f} mV, recovery {m.recovery_time * 1e6:.3f} us"
          + ("" if m.settled else " (not settled)"))
    if ab:
        res["off"] = _metrics_dict(r.off)
        res["delta_peak_v"] = r.d_peak
        res["delta_recovery_s"] = r.d_recovery
        res["on_beats_off"] = r.improves
        print(f"fast path off: peak {r.off.peak_dev * 1e3:.3f} mV, recovery {r.off.recovery_time * 1e6:.3f} us"
              + ("" if r.off.settled else " (not settled)"))
    return res, EXIT_OK


def cmd_calibrate(cfg: RunConfig, out: Path, points: int | None) -> tuple[dict, int]:
    code = EXIT_OK
    banner = ""
    try:
        r = calibrate(cfg.proposed, cfg.device, cfg.targets, cfg.free, cfg.bounds, cfg.seed,
                      max_evals=cfg.max_evals, restarts=cfg.restarts, fail_above=cfg.fail_above)
    except CalibrationError as exc:
        r = exc.result
        code = EXIT_CALIBRATION
        banner = f"WARNING: calibration failed (residual {r.residual:.6e} > {cfg.fail_above:g}); best effort values\n"
    new = with_updates(cfg, proposed=r.params, device=r.device)
    res = {
        "residual": r.residual,
        "gain_db": r.gain_db,
        "pm_deg": r.pm_deg,
        "evaluations": r.evaluations,
        "iterations": r.iterations,
        "free": list(r.free),
        "values": {n: getattr(r.device if n in ("cp0", "va", "rload_ext") else r.params, n) for n in r.free},
    }
    print(f"residual {r.residual:.6e} after {r.evaluations} evaluations: gain {r.gain_db:.4f} dB,"
          f" PM {r.pm_deg:.4f} deg at {cfg.targets.il:g} A")
    if code == EXIT_OK and cfg.fast.enabled:
        fc = _calibrate_fast(new)
        if fc is not None:
            new = with_updates(new, fast=fc.fast)
            res["fast_path"] = {"g_fast_s": fc.fast.g_fast, "peak_dev_v": fc.peak_dev, "target_v": fc.target,
                                "converged": fc.converged, "evaluations": fc.evaluations}
            print(f"fast path: g_fast {fc.fast.g_fast:.6e} S gives peak {fc.peak_dev * 1e3:.3f} mV"
                  f" (target {fc.target * 1e3:.1f} mV{'' if fc.converged else ', not reached'})")
    header = banner + f"calibrated by ldo-lens {__version__}, seed {cfg.seed}"
    (out / "calibrated.cfg").write_text(dump_config(new, header))
    if banner:
        print(banner.strip(), file=sys.stderr)
    return res, code


def _calibrate_fast(cfg: RunConfig):
    step = cfg.step
    model = model_for_step(cfg.proposed, cfg.device, cfg.fast, step, cfg.c_int1, cfg.i_max)
    peak = metrics(simulate(model, step, cfg.t_end, cfg.tol), step, cfg.band).peak_dev
    if abs(peak - cfg.target_peak) <= 1e-3 * cfg.target_peak:
        return None  # already there; keep the file a fixed point
    return calibrate_fast_path(cfg.proposed, cfg.device, cfg.fast, step, cfg.target_peak,
                               t_end=cfg.t_end, tol=cfg.tol)


def _conventional(cfg: RunConfig, il: float, with_rload: bool = True) -> ConventionalParams:
    """Baseline at load ``il``: its output resistance follows the same device mapping."""
    device = cfg.device if with_rload else replace(cfg.device, rload_ext=None)
    ro = operating_point(il, device).ro
    if cfg.conventional is not None:
        return replace(cfg.conventional, ro=ro)
    p = cfg.at_load(il)
    return ConventionalParams(ro=ro, adc=dc_gain(p), **DEFAULT_CONVENTIONAL)


def output_pole_shift(cfg: RunConfig, il_lo: float = 1e-3, il_hi: float = 0.1, with_rload: bool = False) -> float:
    """Ratio of the conventional output pole at ``il_hi`` to that at ``il_lo``.

    By default only the pass device's ``va / il`` output resistance is used; a
    fixed external load resistance, when configured, pins the output pole and
    is included only with ``with_rload``.
    """
    lo = conventional_poles_zero(_conventional(cfg, il_lo, with_rload))[1]
    hi = conventional_poles_zero(_conventional(cfg, il_hi, with_rload))[1]
    return hi / lo


def cmd_compare(cfg: RunConfig, out: Path, points: int | None) -> tuple[dict, int]:
    il = cfg.bode_il or cfg.operating_il or cfg.targets.il
    hp = proposed_tf(cfg.at_load(il))
    conv = _conventional(cfg, il)
    hc = conventional_tf(conv)
    grid = log_grid(*cfg.bode_range, points or cfg.bode_ppd)
    bp, bc = bode(hp, grid), bode(hc, grid)
    write_csv(
        out / "compare.csv",
        ["omega_rad_s", "freq_hz", "mag_db_proposed", "phase_deg_proposed", "mag_db_conventional",
         "phase_deg_conventional"],
        zip(grid, grid / (2 * math.pi), bp.mag_db, bp.phase_deg, bc.mag_db, bc.phase_deg),
    )
    (out / "compare.svg").write_text(
        render(
            [
                Panel([Series(grid, bp.mag_db, "proposed"), Series(grid, bc.mag_db, "conventional", dash="5,3")],
                      "", "magnitude (dB)", xlog=True, hlines=[(0.0, "0 dB")]),
                Panel([Series(grid, bp.phase_deg, "proposed"),
                       Series(grid, bc.phase_deg, "conventional", dash="5,3")],
                      "omega (rad/s)", "phase (deg)", xlog=True),
            ],
            title=f"Proposed vs conventional loop gain at {il:g} A",
        )
    )
    rp = analyze(hp)
    res = {"il_a": il, "proposed_pm_deg": rp.phase_margin, "proposed_ugf_rad_s": rp.ugf,
           "conventional_output_pole_shift_1ma_100ma": output_pole_shift(cfg),
           "conventional_output_pole_shift_1ma_100ma_with_rload": output_pole_shift(cfg, with_rload=True)}
    try:
        rc = analyze(hc)
        res.update(conventional_pm_deg=rc.phase_margin, conventional_ugf_rad_s=rc.ugf)
    except TFError as exc:
        res["conventional_error"] = str(exc)
    print(f"proposed PM {rp.phase_margin:.2f} deg; conventional output pole moves "
          f"{res['conventional_output_pole_shift_1ma_100ma']:.2f}x from 1 mA to 100 mA"
          f" ({res['conventional_output_pole_shift_1ma_100ma_with_rload']:.2f}x with the external load)")
    return res, EXIT_OK


COMMANDS = {
    "bode": cmd_bode,
    "poles": cmd_poles,
    "pm-sweep": cmd_pm_sweep,
    "transient": cmd_transient,
    "calibrate": cmd_calibrate,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ldo-lens", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="path to a key = value config file")
    ap.add_argument("--out", help="output directory (default: run.out_dir or the current directory)")
    ap.add_argument("--seed", type=int, help="calibration seed (overrides run.seed)")
    ap.add_argument("--points", type=int, help="grid size: sweep points, points per decade, or samples")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed", "must be an unsigned 64-bit integer")
            cfg = replace(cfg, seed=args.seed)
        if args.points is not None and args.points < 1:
            raise ConfigError("--points", f"must be >= 1, got {args.points}")
        out = Path(args.out or cfg.out_dir or ".")
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError("--out", f"cannot create output directory {out}: {exc.strerror}") from None
    except (ConfigError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    t_cfg = time.perf_counter()
    try:
        res, code = COMMANDS[args.command](cfg, out, args.points)
    except (ParameterError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc.filename or out}: {exc.strerror}", file=sys.stderr)
        return EXIT_CONFIG
    except (StiffnessError, InstabilityError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except TFError as exc:
        print(f"model error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    report = {
        "tool": "ldo-lens",
        "version": __version__,
        "command": args.command,
        "exit_code": code,
        "config_text": dump_config(cfg),
        "config": dict(cfg_pairs(cfg)),
        "results": res,
        "timings_s": {"config": t_cfg - t0, "command": time.perf_counter() - t_cfg},
    }
    try:
        (out / "run_report.json").write_text(json.dumps(_jsonable(report), indent=2, allow_nan=False) + "\n")
    except OSError as exc:
        print(f"I/O error: {out / 'run_report.json'}: {exc.strerror}", file=sys.stderr)
        return EXIT_CONFIG
    return code


def cfg_pairs(cfg: RunConfig):
    return [(k, list(v) if isinstance(v, tuple) else v) for k, v in config_pairs(cfg)]


def main(argv=None) -> None:
    try:
        code = run(argv)
    except SystemExit:
        raise
    except Exception as exc:  # last-resort mapping to the documented exit code
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = EXIT_INTERNAL
    sys.exit(code)


if __name__ == "__main__":
    main()
