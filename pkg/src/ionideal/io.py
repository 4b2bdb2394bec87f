"""Versioned file formats and the calibration cache."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np

from .detect_long import CriticalValues, Idealization
from .errors import InputError
from .model import PiecewiseSignal, Trace

log = logging.getLogger(__name__)

__all__ = [
    "FORMAT_VERSION",
    "write_trace_csv",
    "read_trace_csv",
    "write_trace_binary",
    "read_trace_binary",
    "read_trace",
    "critical_values_to_record",
    "critical_values_from_record",
    "idealization_to_json",
    "idealization_from_json",
    "write_manifest",
    "read_record",
    "calibration_key",
    "CalibrationCache",
]

FORMAT_VERSION = 1


def read_record(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment line."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise InputError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = s.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _check_version(fields: dict, what: str) -> None:
    if fields.get("format_version") != str(FORMAT_VERSION):
        raise InputError(f"{what}: unsupported or missing format_version {fields.get('format_version')!r}")


# --------------------------------------------------------------------------
# traces


def write_trace_csv(tr: Trace, path) -> None:
    """CSV with a version comment, a ``time,conductance`` header and one row per sample."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# format_version: {FORMAT_VERSION}\n")
        fh.write(f"# sample_rate: {tr.sample_rate!r}\n")
        if tr.provenance:
            fh.write(f"# provenance: {tr.provenance}\n")
        fh.write("time,conductance\n")
        np.savetxt(fh, np.column_stack([tr.times, tr.samples]), delimiter=",", fmt="%.17g")


def read_trace_csv(path) -> Trace:
    """Inverse of :func:`write_trace_csv`.

    Errors name the byte offset of the offending line.
    """
    raw = Path(path).read_bytes()
    meta = {}
    offset = 0
    lines = raw.split(b"\n")
    times, values = [], []
    header_seen = False
    for line in lines:
        start = offset
        offset += len(line) + 1
        s = line.strip()
        if not s:
            continue
        if s.startswith(b"#"):
            key, _, value = s[1:].decode(errors="replace").partition(":")
            meta[key.strip()] = value.strip()
            continue
        if not header_seen:
            if s.decode(errors="replace").replace(" ", "") != "time,conductance":
                raise InputError(f"{path}: byte {start}: expected header 'time,conductance'")
            header_seen = True
            continue
        parts = s.split(b",")
        try:
            if len(parts) != 2:
                raise ValueError
            t, v = float(parts[0]), float(parts[1])
        except ValueError:
            raise InputError(f"{path}: byte {start}: malformed row {s[:60]!r}") from None
        times.append(t)
        values.append(v)
    if meta.get("format_version") != str(FORMAT_VERSION):
        raise InputError(f"{path}: byte 0: missing or unsupported format_version")
    if not values:
        raise InputError(f"{path}: no samples")
    if "sample_rate" in meta:
        fs = float(meta["sample_rate"])
    elif len(times) > 1:
        fs = 1.0 / float(np.median(np.diff(times)))
    else:
        raise InputError(f"{path}: sample rate unknown")
    return Trace(np.array(values), fs, meta.get("provenance", ""))


def write_trace_binary(tr: Trace, path) -> None:
    """Little-endian float64 samples plus a ``<path>.meta`` sidecar record."""
    np.asarray(tr.samples, dtype="<f8").tofile(path)
    lines = [f"format_version = {FORMAT_VERSION}", "dtype = <f8", f"n = {tr.n}", f"sample_rate = {tr.sample_rate!r}"]
    if tr.provenance:
        lines.append(f"provenance = {tr.provenance}")
    Path(str(path) + ".meta").write_text("\n".join(lines) + "\n")


def read_trace_binary(path) -> Trace:
    side = Path(str(path) + ".meta")
    if not side.exists():
        raise InputError(f"{path}: sidecar {side.name} missing")
    meta = read_record(side.read_text())
    _check_version(meta, str(side))
    if meta.get("dtype") != "<f8":
        raise InputError(f"{side}: unsupported dtype {meta.get('dtype')!r}")
    size = os.path.getsize(path)
    if size % 8:
        raise InputError(f"{path}: byte {size - size % 8}: trailing partial value")
    y = np.fromfile(path, dtype="<f8")
    if "n" in meta and int(meta["n"]) != y.size:
        raise InputError(f"{path}: byte {8 * min(y.size, int(meta['n']))}: sample count differs from sidecar")
    return Trace(y, float(meta["sample_rate"]), meta.get("provenance", ""))


def read_trace(path) -> Trace:
    """Dispatch on the presence of a binary sidecar."""
    if Path(str(path) + ".meta").exists():
        return read_trace_binary(path)
    return read_trace_csv(path)


# --------------------------------------------------------------------------
# critical values


def _floats(a) -> str:
    return ",".join(repr(float(x)) for x in a)


def critical_values_to_record(cv: CriticalValues) -> str:
    lines = [
        f"format_version = {FORMAT_VERSION}",
        "kind = critical_values",
        f"alpha = {cv.alpha!r}",
        f"scales = {','.join(str(int(s)) for s in cv.scales)}",
        f"q = {_floats(cv.q)}",
        f"weights = {_floats(cv.weights)}",
    ]
    for key in sorted(cv.mc_meta):
        lines.append(f"meta.{key} = {json.dumps(cv.mc_meta[key])}")
    return "\n".join(lines) + "\n"


def critical_values_from_record(text: str) -> CriticalValues:
    f = read_record(text)
    _check_version(f, "critical values")
    if f.get("kind") != "critical_values":
        raise InputError("record is not a critical-values record")
    meta = {k[5:]: json.loads(v) for k, v in f.items() if k.startswith("meta.")}
    return CriticalValues(
        np.array([int(s) for s in f["scales"].split(",")]),
        np.array([float(s) for s in f["q"].split(",")]),
        float(f["alpha"]),
        np.array([float(s) for s in f["weights"].split(",")]),
        meta,
    )


def calibration_key(**params) -> str:
    """Stable short hash of the calibration parameters."""
    text = json.dumps(params, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


class CalibrationCache:
    """Directory of critical-value records named by their calibration key."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def path(self, key: str) -> Path:
        return self.directory / f"cv-{key}.txt"

    def get(self, key: str, params: dict) -> CriticalValues | None:
        p = self.path(key)
        if not p.exists():
            return None
        try:
            cv = critical_values_from_record(p.read_text())
        except (InputError, KeyError, ValueError) as exc:
            log.warning("unreadable cache entry %s (%s); recomputing", p, exc)
            return None
        if cv.mc_meta.get("key") != key or cv.mc_meta.get("params") != json.loads(json.dumps(params, default=str)):
            log.warning("cache entry %s does not match its key; recomputing", p)
            return None
        return cv

    def put(self, key: str, params: dict, cv: CriticalValues) -> CriticalValues:
        meta = {**cv.mc_meta, "key": key, "params": json.loads(json.dumps(params, default=str))}
        cv = CriticalValues(cv.scales, cv.q, cv.alpha, cv.weights, meta)
        self.directory.mkdir(parents=True, exist_ok=True)
        tmp = self.path(key).with_suffix(".tmp")
        tmp.write_text(critical_values_to_record(cv))
        tmp.replace(self.path(key))
        return cv

    def get_or_compute(self, params: dict, compute) -> CriticalValues:
        key = calibration_key(**params)
        cv = self.get(key, params)
        if cv is None:
            cv = self.put(key, params, compute())
        return cv


# --------------------------------------------------------------------------
# idealizations and manifests


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def idealization_to_json(ideal: Idealization, variance: PiecewiseSignal | None = None, extra: dict | None = None) -> str:
    """Segments with start, end, level, sd and the origin of the change opening each segment."""
    sig = ideal.signal
    fs = ideal.diagnostics.get("sample_rate")
    starts = np.concatenate([[0.0], sig.change_times])
    ends = np.concatenate([sig.change_times, [sig.end_time]])
    segments = []
    for s in range(sig.levels.size):
        seg = {
            "start_s": float(starts[s]),
            "end_s": float(ends[s]),
            "level_nS": float(sig.levels[s]),
            "sd_nS": float(sig.sds[s]),
            "origin": None if s == 0 else ideal.origins[s - 1],
        }
        if s > 0:
            seg["anchor"] = float(ideal.anchors[s - 1])
        if variance is not None:
            seg["variance_nS2"] = float(variance.levels[s])
        segments.append(seg)
    doc = {
        "format_version": FORMAT_VERSION,
        "sample_rate": fs,
        "end_s": float(sig.end_time),
        "segments": segments,
        "diagnostics": _jsonable(ideal.diagnostics),
    }
    if extra:
        doc.update(_jsonable(extra))
    return json.dumps(doc, indent=1, sort_keys=True)


def idealization_from_json(text: str) -> Idealization:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"idealization JSON: byte {exc.pos}: {exc.msg}") from None
    if doc.get("format_version") != FORMAT_VERSION:
        raise InputError("idealization JSON: unsupported format_version")
    segs = doc["segments"]
    if not segs:
        raise InputError("idealization JSON: no segments")
    times = [s["start_s"] for s in segs[1:]]
    sig = PiecewiseSignal(times, [s["level_nS"] for s in segs], [s["sd_nS"] for s in segs], doc["end_s"])
    fs = doc.get("sample_rate")
    anchors = [s.get("anchor", s["start_s"] * (fs or np.nan)) for s in segs[1:]]
    diag = dict(doc.get("diagnostics") or {})
    if fs is not None:
        diag["sample_rate"] = fs
    return Idealization(sig, tuple(s["origin"] for s in segs[1:]), np.array(anchors, dtype=float), diag)


def write_manifest(path, entries: dict) -> None:
    """Key-value manifest sufficient to regenerate an output."""
    lines = [f"format_version = {FORMAT_VERSION}"]
    for key in sorted(entries):
        lines.append(f"{key} = {json.dumps(_jsonable(entries[key]), sort_keys=True)}")
    Path(path).write_text("\n".join(lines) + "\n")
