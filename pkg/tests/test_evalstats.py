import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import special, stats

from antloc.evalstats import (CHI3_MEAN, INTER_RATER_MM, INTRA_RATER_MM, EvalReport, betainc_regularized,
                              format_row, mre, paired_ttest, radial_errors, rater_variability, reference_table,
                              render_table, sdr, simulate_rater, student_t_two_sided_p, timing_harness)
from antloc.volume import Landmark


def test_radial_errors_examples(rng):
    t = {"a:right": (0, 0, 0), "a:left": (1, 1, 1)}
    assert radial_errors(t, t).tolist() == [0.0, 0.0]
    p = {"a:left": (1, 5, 1), "a:right": (3, 0, 0)}
    e = radial_errors(p, t)
    assert e.tolist() == [3.0, 4.0]
    assert mre(e)[0] == 3.5
    a, b = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
    oracle = [math.sqrt(sum((x - y) ** 2 for x, y in zip(u, v))) for u, v in zip(a, b)]
    np.testing.assert_allclose(radial_errors(a, b), oracle, atol=1e-9)


def test_radial_errors_rejects_unmatched_and_voxel_frame():
    with pytest.raises(ValueError):
        radial_errors({"a": (0, 0, 0)}, {"b": (0, 0, 0)})
    with pytest.raises(ValueError):
        radial_errors([(0, 0, 0)], [(0, 0, 0), (1, 1, 1)])
    with pytest.raises(ValueError):
        radial_errors([Landmark("p", "voxel", (0, 0, 0))], [(0, 0, 0)])


def test_sdr_examples():
    assert sdr([1.5, 3.0, 5.0, 7.0]).tolist() == [25.0, 50.0, 75.0]
    assert sdr([0.0, 0.0]).tolist() == [100.0, 100.0, 100.0]
    assert sdr([2.0, 4.0, 6.0]).tolist() == pytest.approx([100 / 3, 200 / 3, 100.0])
    with pytest.raises(ValueError):
        sdr([])


def test_sdr_monotone_over_random_lists(rng):
    for _ in range(1000):
        e = rng.exponential(3.0, size=rng.integers(1, 40))
        s = sdr(e)
        assert np.all(np.diff(s) >= 0) and s.min() >= 0 and s.max() <= 100


def test_mre_sample_std():
    m, s = mre([1.0, 2.0, 3.0, 4.0])
    assert m == 2.5
    assert s == pytest.approx(math.sqrt(5 / 3))
    assert mre([2.0]) == (2.0, 0.0)


def test_rater_variability():
    pts = {"a": (1, 2, 3), "b": (4, 5, 6)}
    assert rater_variability(pts, pts) == (0.0, 0.0)
    assert (INTRA_RATER_MM, INTER_RATER_MM) == ((2.04, 0.87), (2.42, 1.17))


def test_simulated_raters_chi3_mean(rng):
    truths = {f"c{i}": rng.normal(size=3) * 20 for i in range(2000)}
    a = simulate_rater(truths, 1.0, rng)
    # truth vs one rater: chi(3) scaled by sigma
    assert mre(radial_errors(a, truths))[0] == pytest.approx(CHI3_MEAN, rel=0.05)
    assert CHI3_MEAN == pytest.approx(1.5958, abs=1e-4)


@pytest.mark.parametrize("a,b,x", [(1.0, 0.5, 0.3), (2.5, 0.5, 0.9), (10.0, 0.5, 0.99), (0.5, 0.5, 0.5),
                                   (50.0, 0.5, 0.2), (3.0, 7.0, 0.0), (3.0, 7.0, 1.0)])
def test_betainc_matches_scipy(a, b, x):
    assert betainc_regularized(a, b, x) == pytest.approx(special.betainc(a, b, x), abs=1e-12)


@given(st.floats(-20, 20), st.integers(1, 200))
def test_t_pvalue_matches_scipy(t, df):
    assert student_t_two_sided_p(t, df) == pytest.approx(2 * stats.t.sf(abs(t), df), abs=1e-10)


def test_ttest_table_example():
    r = paired_ttest([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
    assert r.t == pytest.approx(3.4641, abs=1e-4)
    assert r.df == 2
    assert r.p == pytest.approx(0.0742, abs=1e-4)
    assert r.decision() == "not significant"
    assert r.to_dict()["decision"] == "not significant"


def test_ttest_degenerate_and_antisymmetric(rng):
    a = rng.random(10)
    r = paired_ttest(a, a)
    assert r.degenerate and r.p is None and r.decision() == "degenerate"
    b = rng.random(10)
    assert paired_ttest(a, b).t == pytest.approx(-paired_ttest(b, a).t)
    with pytest.raises(ValueError):
        paired_ttest([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        paired_ttest([1], [2])


def test_timing_harness_constant_method():
    out = timing_harness({"const": lambda roi: (0, 0, 0)}, [None] * 3)
    t = out["const"]["median_seconds"]
    assert 0 < t < 1 and math.isfinite(t) and len(out["const"]["repeats"]) == 5
    with pytest.raises(ValueError):
        timing_harness({"const": lambda roi: 0}, [None], repeats=3)


def test_report_and_table():
    rep = EvalReport("hm", 1.0, {"a:right": 1.5, "a:left": 3.0, "b:right": 5.0, "b:left": 7.0}, 0.01)
    d = rep.to_dict()
    assert d["mre_mm"] == 4.125 and d["sdr_percent"] == [25.0, 50.0, 75.0]
    assert format_row({1.0: (2.344, 1.118)}, {1.0: (42.2, 92.4, 100.0)}) == "2.34±1.12 | 42, 92, 100"
    table = render_table([("HM", {1.0: (2.34, 1.12), 0.5: (2.5, 1.0)}, {1.0: (42, 92, 100)}, 0.005)])
    lines = table.splitlines()
    header = [c.strip() for c in lines[0].split("|")]
    assert header == ["Method", "MRE 100%", "MRE 50%", "MRE 25%", "SDR 100%", "SDR 50%", "SDR 25%", "Time (s)"]
    row = [c.strip() for c in lines[2].split(" | ")]
    assert row[:5] == ["HM", "2.34±1.12", "2.50±1.00", "-", "42, 92, 100"] and row[-1] == "0.005"
    assert len({len(line.split(" | ")) for line in (lines[0], lines[2])}) == 1


def test_reference_table_renders():
    text = reference_table()
    assert "2.34±1.12" in text and text.count("\n") >= 7
