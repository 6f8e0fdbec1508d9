import csv
import io
import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from declab import cli
from declab.freqsets import FrequencySet, RetryExhausted, lattice_annulus, lattice_sphere
from declab.io import (fmt_cell, freqset_from_dict, freqset_to_dict, plain, rows_to_csv,
                       spec_hash)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def only(tmp_path, suffix):
    files = sorted(tmp_path.glob(f"*{suffix}"))
    assert len(files) == 1, files
    return files[0]


# --- serialization -------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1,
                max_size=20))
def test_csv_float_roundtrip(xs):
    text = rows_to_csv([{"v": x} for x in xs])
    back = [float(r["v"]) for r in csv.DictReader(io.StringIO(text))]
    assert [x.hex() for x in back] == [float(x).hex() for x in xs]


def test_freqset_json_roundtrip():
    for fs in (lattice_sphere(26, 3), lattice_annulus(12.5),
               FrequencySet.build(np.random.default_rng(0).random((30, 3)), "rand")):
        d = json.loads(json.dumps(freqset_to_dict(fs)))
        back = freqset_from_dict(d)
        assert back.points.tobytes() == fs.points.tobytes()
        assert back.label == fs.label
        if fs.raw is not None:
            assert np.array_equal(back.raw, fs.raw)


def test_cells_and_hash():
    assert fmt_cell(None) == "" and fmt_cell(True) == "true"
    assert fmt_cell(np.float64(0.1)) == "0.1"
    assert fmt_cell(Fraction(3, 4)) == "3/4"
    assert plain(np.arange(3)) == [0, 1, 2]
    assert spec_hash({"a": 1, "b": [2]}) == spec_hash({"b": [2], "a": 1})
    assert spec_hash({"a": 1}) != spec_hash({"a": 2})
    text = rows_to_csv([{"a": 1}, {"b": 2}])
    assert text == "a,b\n1,\n,2\n"


# --- spec handling -------------------------------------------------------

def test_resolve_spec():
    s = cli.resolve_spec("partition", {"R": 6, "M": 3})
    assert s["seed"] == 0 and s["params"]["op"] == "count"
    s = cli.resolve_spec("norm", {"kind": "norm", "seed": 5, "params": {"plan": {"count": 2000}}})
    assert s["seed"] == 5 and s["params"]["plan"]["stratification"] == "auto"
    for bad in ({"bogus": 1}, {"kind": "gen"}, {"seed": -1}, {"seed": 1.5},
                {"plan": {"cnt": 1}}):
        with pytest.raises(cli.SpecError):
            cli.resolve_spec("norm", bad)
    assert cli.parse_assignment("plan.count=2000") == ("plan.count", 2000)
    assert cli.parse_assignment("shape=strips") == ("shape", "strips")


# --- command line --------------------------------------------------------

def test_partition_count(tmp_path, capsys):
    assert cli.main(["partition", "--set", "R=4", "--set", "M=2", "--out", str(tmp_path)]) == 0
    rows = read_csv(only(tmp_path, ".csv"))
    assert rows[0]["value"] == "3" and rows[0]["seed"] == "0"
    side = json.loads(only(tmp_path, ".json").read_text())
    assert rows[0]["spec_hash"] == side["spec_hash"] == spec_hash(side["spec"])
    assert "value" in capsys.readouterr().out


def test_gen_sphere_json(tmp_path):
    rc = cli.main(["gen", "--set", "surface=sphere", "--set", "N=1", "--set", "d=3",
                   "--format", "json", "--out", str(tmp_path), "-q"])
    assert rc == 0
    side = json.loads(only(tmp_path, ".json").read_text())
    assert len(side["payload"]["points"]) == 6 == side["summary"]["count"]
    assert not list(tmp_path.glob("*.csv"))


@pytest.mark.parametrize("args", [
    ["partition", "--set", "R=5", "--set", "M=2"],
    ["partition", "--set", "colour=red"],
    ["norm", "--set", "p=-1"],
    ["decouple", "--set", "shape=blobs"],
    ["scan", "--set", "R_list=[64,128]"],
    ["tubes", "--set", "op=nothing"],
    ["gen", "--seed", "-3"],
    ["gen", "--threads", "0"],
])
def test_invalid_specs_exit_2(tmp_path, args):
    assert cli.main(args + ["--out", str(tmp_path)]) == 2
    assert not list(tmp_path.iterdir())


def test_missing_spec_file(tmp_path):
    assert cli.main(["gen", "--spec", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2


def test_nyquist_exit_3(tmp_path):
    args = ["norm", "--set", 'domain={"kind": "torus", "size": null}', "--set",
            'plan={"method": "grid", "spacing": 0.5}', "--set", 'set={"surface": "sphere", "N": 9, "d": 3}',
            "--out", str(tmp_path)]
    assert cli.main(args) == 3
    assert not list(tmp_path.iterdir())


def test_retry_exhausted_exit_4(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RetryExhausted("no acceptable draw")
    monkeypatch.setattr(cli.freqsets, "tight_random_select", boom)
    assert cli.main(["tight", "--set", "R=16", "--out", str(tmp_path)]) == 4
    assert not list(tmp_path.iterdir())


def test_spec_file_and_env(tmp_path, monkeypatch):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"kind": "partition", "seed": 3,
                                "params": {"R": 6, "M": 3, "op": "cohabiting"}}))
    out = tmp_path / "env-out"
    monkeypatch.setenv("DECLAB_OUT", str(out))
    assert cli.main(["partition", "--spec", str(spec), "-q"]) == 0
    rows = read_csv(only(out, ".csv"))
    assert rows[0]["value"] == "4" and rows[0]["seed"] == "3"
    assert cli.main(["gen", "--spec", str(spec), "-q"]) == 2


def test_scan_synthetic_slope(tmp_path):
    assert cli.main(["scan", "--set", "shape=synthetic", "--set", "R_list=[4,16,64,256]",
                     "--out", str(tmp_path), "-q"]) == 0
    fit = [r for r in read_csv(only(tmp_path, ".csv")) if r["row"] == "fit"][0]
    assert float(fit["slope"]) == pytest.approx(2.0, abs=1e-12)


def test_partition_ops(tmp_path):
    def one(*sets):
        argv = ["partition", "--out", str(tmp_path), "-q"]
        for s in sets:
            argv += ["--set", s]
        rec = cli.run(cli.resolve_spec("partition", dict(cli.parse_assignment(s) for s in sets)))
        assert cli.main(argv) == 0
        return rec.rows
    assert one("R=4", "M=2", "op=enumerate")[0]["partition"] == "12|34"
    assert one("R=4", "M=2", "op=l2")[0]["equal"] is True
    assert one("R=4", "M=2", "op=l4")[0]["average"] == "32/1"
    r = one("R=8", "M=2", "op=elp", "p=3", "weights=signs", "family=sampled", "draws=50")[0]
    assert r["draws"] == 50


def test_small_runs_every_kind(tmp_path):
    small = '{"method": "monte-carlo", "count": 2000, "spacing": null, "stratification": "auto", "strata": null}'
    cases = [
        ["norm", "--set", "set.R=16", "--set", f"plan={small}"],
        ["decouple", "--set", "R=16", "--set", f"plan={small}"],
        ["recouple", "--set", "R=16", "--set", "K=2", "--set", f"plan={small}"],
        ["tubes", "--set", "R=16", "--set", f"plan={small}"],
        ["tubes", "--set", "R=16", "--set", "op=profile", "--set", f"plan={small}"],
        ["tight", "--set", "R=16", "--set", "measure=true", "--set", f"plan={small}"],
    ]
    for args in cases:
        assert cli.main(args + ["--out", str(tmp_path), "-q"]) == 0, args


def test_determinism_across_threads(tmp_path):
    base = ["decouple", "--set", "R=64", "--set", "field=random-phase", "--set",
            "plan.count=40000", "--seed", "11", "-q"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(base + ["--threads", "1", "--out", str(a)]) == 0
    assert cli.main(base + ["--threads", "3", "--out", str(b)]) == 0
    assert only(a, ".csv").read_bytes() == only(b, ".csv").read_bytes()
    assert only(a, ".csv").name == only(b, ".csv").name
