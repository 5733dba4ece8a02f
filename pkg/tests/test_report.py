import csv
import json
import math
import statistics

from hypothesis import given
from hypothesis import strategies as st

from push0.harness.report import ExperimentReport, describe, merge, percentile


@given(st.lists(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False), min_size=1, max_size=200))
def test_percentile_matches_statistics_quantiles(xs):
    assert percentile(xs, 0) == min(xs)
    assert percentile(xs, 100) == max(xs)
    if len(xs) > 1:
        # statistics' "inclusive" method is the same linear interpolation.
        cuts = statistics.quantiles(xs, n=100, method="inclusive")
        assert math.isclose(percentile(xs, 50), cuts[49], rel_tol=1e-9, abs_tol=1e-6)


def test_describe_empty_and_single():
    assert describe([])["n"] == 0 and math.isnan(describe([])["p50"])
    d = describe([2.0])
    assert d["p50"] == d["p99"] == 2.0 and d["std"] == 0.0


def test_report_roundtrip(tmp_path):
    r = ExperimentReport("demo", {"k": 4})
    r.samples = [{"a": 1, "b": [1, 2]}, {"a": 2, "c": "x"}]
    r.check("ok", True)
    assert r.passed and r.line().startswith("PASS demo")
    r.check("bad", False)
    assert not r.passed and "failed=['bad']" in r.line()
    r.write(tmp_path)
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["verdicts"] == {"ok": True, "bad": False} and data["passed"] is False
    rows = list(csv.DictReader(open(tmp_path / "report.csv")))
    assert [row["a"] for row in rows] == ["1", "2"] and rows[0]["b"] == "[1, 2]"


def test_merge_prefixes_verdicts():
    a, b = ExperimentReport("a"), ExperimentReport("b")
    a.check("x", True)
    b.check("x", False)
    a.samples.append({"v": 1})
    m = merge("both", [a, b])
    assert m.verdicts == {"a.x": True, "b.x": False}
    assert m.samples == [{"experiment": "a", "v": 1}]
