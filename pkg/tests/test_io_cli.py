import json

import numpy as np
import pytest

from ionideal.cli import main
from ionideal.detect_long import LOCAL_TEST, MULTIRESOLUTION, CriticalValues, Idealization
from ionideal.errors import InputError
from ionideal.io import (
    CalibrationCache,
    calibration_key,
    critical_values_from_record,
    critical_values_to_record,
    idealization_from_json,
    idealization_to_json,
    read_trace,
    read_trace_csv,
    write_trace_binary,
    write_trace_csv,
)
from ionideal.model import PiecewiseSignal, Trace
from ionideal.pipeline import RunConfig

# coarse calibration so the CLI tests run in seconds
SMALL = ["--set", "alpha=0.2", "--set", "alpha1=0.1", "--set", "alpha2=0.1", "--set", "l_max=10",
         "--set", "R_long=60", "--set", "R_short=20", "--set", "short_n=3000"]


def test_csv_roundtrip_exact(tmp_path, rng):
    tr = Trace(rng.standard_normal(100) * 1e-3, 10000.0, "unit test")
    write_trace_csv(tr, tmp_path / "t.csv")
    back = read_trace_csv(tmp_path / "t.csv")
    assert np.array_equal(back.samples, tr.samples)
    assert back.sample_rate == tr.sample_rate and back.provenance == "unit test"


def test_binary_roundtrip_exact(tmp_path, rng):
    tr = Trace(rng.standard_normal(100), 20000.0)
    write_trace_binary(tr, tmp_path / "t.bin")
    back = read_trace(tmp_path / "t.bin")
    assert np.array_equal(back.samples, tr.samples) and back.sample_rate == 20000.0


def test_csv_errors_report_byte_offset(tmp_path):
    p = tmp_path / "bad.csv"
    good = "# format_version: 1\n# sample_rate: 10000\ntime,conductance\n0,1\n"
    p.write_text(good + "0.0001,abc\n")
    with pytest.raises(InputError, match=f"byte {len(good)}:"):
        read_trace_csv(p)
    p.write_text("time,conductance\n0,1\n")
    with pytest.raises(InputError, match="format_version"):
        read_trace_csv(p)
    p.write_text("# format_version: 1\n# sample_rate: 10000\ntime,conductance\n")
    with pytest.raises(InputError, match="no samples"):
        read_trace_csv(p)


def test_binary_size_mismatch(tmp_path):
    tr = Trace(np.arange(10.0), 10000.0)
    write_trace_binary(tr, tmp_path / "t.bin")
    with open(tmp_path / "t.bin", "ab") as fh:
        fh.write(b"\0\0\0")
    with pytest.raises(InputError, match="partial"):
        read_trace(tmp_path / "t.bin")


def test_critical_values_record_roundtrip():
    cv = CriticalValues([16, 32], [3.25, 1.0 / 3.0], 0.01, [0.5, 0.5], {"R": 10, "kernel": "abc"})
    back = critical_values_from_record(critical_values_to_record(cv))
    assert np.array_equal(back.q, cv.q) and np.array_equal(back.scales, cv.scales)
    assert back.mc_meta == cv.mc_meta


def test_calibration_cache(tmp_path):
    cache = CalibrationCache(tmp_path)
    params = {"n": 10, "seed": 1}
    calls = []

    def compute():
        calls.append(1)
        return CriticalValues([16], [2.0], 0.05, [1.0])

    a = cache.get_or_compute(params, compute)
    b = cache.get_or_compute(params, compute)
    assert len(calls) == 1 and np.array_equal(a.q, b.q)
    key = calibration_key(**params)
    assert cache.get(key, {"n": 11, "seed": 1}) is None
    cache.path(key).write_text("garbage")
    assert cache.get(key, params) is None


def test_idealization_json_roundtrip():
    sig = PiecewiseSignal([0.01, 0.0105], [0.0, 0.32, 0.0], [0.008, 0.03, 0.008], 0.02)
    ide = Idealization(sig, (LOCAL_TEST, MULTIRESOLUTION), np.array([100.0, 105.0]), {"sample_rate": 1e4})
    back = idealization_from_json(idealization_to_json(ide))
    assert np.array_equal(back.signal.change_times, sig.change_times)
    assert np.array_equal(back.signal.levels, sig.levels)
    assert back.origins == ide.origins and np.array_equal(back.anchors, ide.anchors)
    with pytest.raises(InputError, match="byte"):
        idealization_from_json("{not json")


def test_alpha_split_must_add_up():
    with pytest.raises(InputError):
        RunConfig(alpha=0.05, alpha1=0.02, alpha2=0.02)


def test_cli_end_to_end_and_determinism(tmp_path, capsys):
    trace = tmp_path / "peak.csv"
    assert main(["simulate", "--preset", "peak", "--seed", "3", "--out", str(trace)]) == 0
    assert (tmp_path / "peak.csv.manifest").exists()
    outs = []
    for r in range(2):
        out = tmp_path / f"ideal{r}.json"
        code = main(["idealize", str(trace), "--out", str(out), "--cache", str(tmp_path / "cache"), "--variance", *SMALL])
        assert code == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    doc = json.loads(outs[0])
    assert doc["format_version"] == 1 and "variance_nS2" in doc["segments"][0]
    assert main(["analyze", str(tmp_path / "ideal0.json"), "--out-dir", str(tmp_path / "an")]) == 0
    summary = json.loads((tmp_path / "an" / "summary.json").read_text())
    assert summary["format_version"] == 1
    for name in ("amplitudes", "open_dwells", "closed_dwells", "rates"):
        assert (tmp_path / "an" / f"{name}.csv").exists()


def test_cli_simulate_deterministic(tmp_path):
    for r in range(2):
        assert main(["simulate", "--preset", "two-peak", "--seed", "7", "--set", "d=20",
                     "--out", str(tmp_path / f"s{r}.bin"), "--binary"]) == 0
    assert (tmp_path / "s0.bin").read_bytes() == (tmp_path / "s1.bin").read_bytes()


def test_cli_config_file_and_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("format_version = 1\nseed = 5\nR_long = 60\n")
    out = tmp_path / "a.csv"
    assert main(["simulate", "--preset", "peak", "--config", str(cfg), "--seed", "9", "--out", str(out)]) == 0
    assert "seed=9" in read_trace(out).provenance


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["idealize", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "x.json")]) == 2
    assert main(["simulate", "--preset", "peak", "--set", "alpha1=0.03", "--out", str(tmp_path / "y.csv")]) == 2
    assert main(["simulate", "--preset", "peak", "--set", "alpha=0.05", "--set", "alpha1=0.03",
                 "--out", str(tmp_path / "y.csv")]) == 2
    empty = tmp_path / "empty.csv"
    empty.write_text("# format_version: 1\n# sample_rate: 10000\ntime,conductance\n")
    assert main(["idealize", str(empty), "--out", str(tmp_path / "z.json")]) == 2
    assert main(["simulate", "--preset", "peak", "--set", "length=0", "--out", str(tmp_path / "w.csv")]) == 2
    err = capsys.readouterr().err
    assert "error:" in err


def test_cli_bad_alpha_calibration_fails(tmp_path):
    code = main(["calibrate", "--n", "4000", "--cache", str(tmp_path), "--set", "R_long=10",
                 "--set", "alpha=0.002", "--set", "alpha1=0.001", "--set", "alpha2=0.001"])
    assert code == 3
