"""Command-line front end: simulate, calibrate, idealize, analyze.

Settings come from, in increasing precedence: built-in defaults, a
``key = value`` config file (``--config``), ``--set key=value`` options,
and dedicated flags such as ``--seed`` or ``--homogeneous``.

Exit codes: 0 success, 2 input error, 3 calibration error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import EventFilter, EventTable, extract_events, gating_summary
from .errors import IdealizationError, InputError
from .io import (
    CalibrationCache,
    calibration_key,
    idealization_from_json,
    idealization_to_json,
    read_record,
    read_trace,
    write_manifest,
    write_trace_binary,
    write_trace_csv,
)
from .pipeline import RunConfig, default_cache, idealize, long_critical_values, long_params, short_critical_values, short_params
from .scenarios import PRESETS, simulate_preset

log = logging.getLogger("ionideal")

_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig) if f.name != "extra"}


def _coerce(key: str, value: str):
    default = RunConfig.__dataclass_fields__[key].default
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise InputError(f"{key}: expected a boolean, got {value!r}")
    try:
        return type(default)(value)
    except ValueError:
        raise InputError(f"{key}: cannot parse {value!r} as {type(default).__name__}") from None


def _split_settings(pairs: dict) -> tuple[dict, dict]:
    run, extra = {}, {}
    for key, value in pairs.items():
        if key in _FIELDS:
            run[key] = _coerce(key, value)
        else:
            extra[key] = value
    return run, extra


def load_config(args) -> tuple[RunConfig, dict]:
    """Merge defaults, config file and overrides into a :class:`RunConfig`."""
    pairs: dict = {}
    if getattr(args, "config", None):
        pairs.update(read_record(Path(args.config).read_text()))
        pairs.pop("format_version", None)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise InputError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        pairs["seed"] = str(args.seed)
    if getattr(args, "homogeneous", False):
        pairs["homogeneous"] = "true"
    run, extra = _split_settings(pairs)
    return RunConfig(**run), extra


def _cache(extra: dict, args) -> CalibrationCache:
    path = getattr(args, "cache", None) or extra.get("cache_dir")
    return CalibrationCache(path) if path else default_cache()


def _preset_params(name: str, extra: dict) -> dict:
    out = {}
    for key, value in extra.items():
        if key in PRESETS[name]:
            default = PRESETS[name][key]
            out[key] = value if isinstance(default, str) else type(default)(value)
    return out


def cmd_simulate(args) -> int:
    cfg, extra = load_config(args)
    k = cfg.kernel()
    params = _preset_params(args.preset, extra)
    tr, truth = simulate_preset(args.preset, k, cfg.seed, **params)
    out = Path(args.out)
    if args.binary:
        write_trace_binary(tr, out)
    else:
        write_trace_csv(tr, out)
    write_manifest(str(out) + ".manifest", {
        "command": "simulate", "preset": args.preset, "preset_params": {**PRESETS[args.preset], **params},
        "config": cfg.as_dict(), "seed": cfg.seed, "kernel": k.fingerprint, "version": __version__,
        "truth_change_times": truth.change_times, "truth_levels": truth.levels, "truth_sds": truth.sds,
    })
    print(f"wrote {tr.n} samples to {out}")
    return 0


def cmd_calibrate(args) -> int:
    cfg, extra = load_config(args)
    k = cfg.kernel()
    cache = _cache(extra, args)
    cv_long = long_critical_values(args.n, k, cfg, cache)
    cv_short = short_critical_values(k, cfg, cache)
    for name, cv, params in (("long", cv_long, long_params(args.n, k, cfg)), ("short", cv_short, short_params(k, cfg))):
        print(f"{name}: key {calibration_key(**params)} achieved level {cv.mc_meta.get('achieved')}")
    return 0


def cmd_idealize(args) -> int:
    cfg, extra = load_config(args)
    k = cfg.kernel()
    tr = read_trace(args.trace)
    cache = _cache(extra, args)
    q_long = long_critical_values(tr.n, k, cfg, cache)
    q_short = short_critical_values(k, cfg, cache)
    res = idealize(tr, k, q_long, q_short, cfg, variance=args.variance)
    out = Path(args.out)
    extra_doc = {"kernel": k.fingerprint, "n_events": len(res.events)}
    out.write_text(idealization_to_json(res.final, res.variance, extra_doc))
    write_manifest(str(out) + ".manifest", {
        "command": "idealize", "trace": str(args.trace), "trace_provenance": tr.provenance, "config": cfg.as_dict(),
        "kernel": k.fingerprint, "version": __version__,
        "calibration_long": calibration_key(**long_params(tr.n, k, cfg)),
        "calibration_short": calibration_key(**short_params(k, cfg)),
    })
    print(f"{res.final.n_changes} changes ({len(res.events)} short events) written to {out}")
    return 0


def _window(extra: dict, key: str, default):
    if key not in extra:
        return default
    parts = [float(v) for v in extra[key].split(",")]
    if len(parts) != 2:
        raise InputError(f"{key}: expected 'lower,upper'")
    return tuple(parts)


def cmd_analyze(args) -> int:
    _, extra = load_config(args)
    d = EventFilter()
    filt = EventFilter(
        _window(extra, "open_window", d.open_window),
        _window(extra, "closed_window", d.closed_window),
        _window(extra, "amplitude_window", d.amplitude_window),
        _window(extra, "dwell_window", d.dwell_window),
    )
    table = EventTable()
    for path in args.idealization:
        table = table.extend(extract_events(idealization_from_json(Path(path).read_text()), filt))
    summary = gating_summary(table)
    outdir = Path(args.out_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    for name, values in (("amplitudes", table.amplitudes), ("open_dwells", table.open_dwells),
                         ("closed_dwells", table.closed_dwells)):
        np.savetxt(outdir / f"{name}.csv", values, header=f"format_version: 1\n{name}", delimiter=",", fmt="%.10g")
    with open(outdir / "rates.csv", "w") as fh:
        fh.write("# format_version: 1\nname,rate_hz,se_hz,count\n")
        for name in ("closed_short", "closed_long", "open"):
            fh.write(f"{name},{summary[f'rate_{name}']},{summary[f'se_{name}']},{summary[f'count_{name}']}\n")
    (outdir / "summary.json").write_text(json.dumps({"format_version": 1, **summary}, indent=1, sort_keys=True))
    if not table.open_dwells.size and not table.closed_dwells.size:
        print("no events found; empty tables written")
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ionideal", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value settings file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")

    sp = sub.add_parser("simulate", help="simulate a trace from a named design")
    common(sp)
    sp.add_argument("--preset", required=True, choices=sorted(PRESETS))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--binary", action="store_true", help="write little-endian float64 plus sidecar")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("calibrate", help="compute and cache critical values")
    common(sp)
    sp.add_argument("--n", type=int, required=True, help="trace length for the multiresolution step")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--homogeneous", action="store_true")
    sp.add_argument("--cache", help="cache directory")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("idealize", help="idealize a trace")
    common(sp)
    sp.add_argument("trace")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--homogeneous", action="store_true", help="homogeneous-noise local test statistic")
    sp.add_argument("--variance", action="store_true", help="also idealize the noise variance")
    sp.add_argument("--cache", help="cache directory")
    sp.set_defaults(func=cmd_idealize)

    sp = sub.add_parser("analyze", help="gating analysis of idealizations")
    common(sp)
    sp.add_argument("idealization", nargs="+")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except IdealizationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return InputError.exit_code


if __name__ == "__main__":
    sys.exit(main())
