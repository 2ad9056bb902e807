import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import delong_by_hand, naive_edit_distance, pair_auc, trapezoid_auc
from speechdep.metrics import (MetricsReport, SingleClassError, UndefinedCorrelationError, auc,
                               cer, classification_report, corpus_cer, delong_components, delong_test,
                               edit_distance, eer_point, read_scores, regression_metrics,
                               regression_report, render_report, report_from_dict, write_scores)

scored_sets = st.integers(2, 30).flatmap(lambda n: st.tuples(
    st.lists(st.integers(-5, 5).map(float), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
)).filter(lambda t: 0 < sum(t[1]) < len(t[1]))


# AUC ----------------------------------------------------------------------------

def test_auc_examples():
    assert auc([0.9, 0.3, 0.7, 0.1], [1, 1, 0, 0]) == 0.75
    assert auc([2, 1], [1, 0]) == 1.0
    assert auc([1, 2], [1, 0]) == 0.0
    assert auc([1, 1, 1], [1, 0, 1]) == 0.5


def test_auc_single_class():
    with pytest.raises(SingleClassError):
        auc([0.1, 0.2], [1, 1])


@settings(max_examples=200, deadline=None)
@given(scored_sets)
def test_auc_matches_pair_count_and_trapezoid(data):
    s, y = data
    a = auc(s, y)
    assert a == pytest.approx(pair_auc(s, y), abs=1e-12)
    assert a == pytest.approx(trapezoid_auc(s, y), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(scored_sets)
def test_auc_invariant_under_monotone_maps(data):
    s, y = data
    s = np.array(s)
    assert auc(np.exp(s / 3) * 2 + 1, y) == auc(s, y)
    assert auc(-s, y) == pytest.approx(1 - auc(s, y), abs=1e-12)


# EER ----------------------------------------------------------------------------

def test_eer_examples():
    pt = eer_point([0.9, 0.3, 0.7, 0.1], [1, 1, 0, 0])
    assert (pt.sensitivity, pt.specificity) == pytest.approx((0.75, 0.75), abs=1e-12)
    sep = eer_point([3, 4, 1, 2], [1, 1, 0, 0])
    assert (sep.sensitivity, sep.specificity) == (1.0, 1.0)
    tied = eer_point([1, 1, 1, 1], [1, 0, 1, 0])
    assert (tied.sensitivity, tied.specificity) == pytest.approx((0.5, 0.5))


@settings(max_examples=150, deadline=None)
@given(scored_sets)
def test_eer_point_is_balanced(data):
    s, y = data
    pt = eer_point(s, y)
    assert abs(pt.sensitivity - pt.specificity) < 1e-9
    assert 0.0 <= pt.eer <= 1.0
    # the hull dominates the empirical curve, so balanced accuracy is at least chance
    assert pt.sensitivity >= 0.5 - 1e-12 or auc(s, y) < 0.5


# DeLong ------------------------------------------------------------------------

def test_delong_self_comparison():
    rng = np.random.default_rng(0)
    y = np.r_[np.ones(5), np.zeros(7)]
    s = rng.normal(size=12)
    r = delong_test(s, s, y)
    assert r.p == 1.0 and r.z == 0.0


def test_delong_hand_case():
    y = [1, 1, 1, 0, 0, 0]
    a = [0.9, 0.8, 0.35, 0.4, 0.3, 0.1]
    b = [0.7, 0.2, 0.6, 0.5, 0.65, 0.1]
    got = delong_test(a, b, y)
    ref = delong_by_hand(a, b, y)
    for g, r in zip((got.auc_a, got.auc_b, got.z, got.p), ref):
        assert g == pytest.approx(r, abs=1e-10)


def test_delong_components_mean_is_auc():
    s, y = [0.9, 0.3, 0.7, 0.1, 0.5], [1, 1, 0, 0, 1]
    v10, v01 = delong_components(s, y)
    assert v10.mean() == pytest.approx(auc(s, y)) and v01.mean() == pytest.approx(auc(s, y))


@settings(max_examples=60, deadline=None)
@given(scored_sets, st.integers(0, 2**31 - 1))
def test_delong_antisymmetric(data, seed):
    s, y = data
    other = np.random.default_rng(seed).permutation(s)
    ab, ba = delong_test(s, other, y), delong_test(other, s, y)
    assert ab.z == -ba.z and ab.p == ba.p


def test_delong_degenerate_variance():
    y = [1, 0]
    r = delong_test([1.0, 0.0], [0.0, 1.0], y)
    assert r.degenerate and r.p == 0.0


def test_delong_requires_same_labels():
    with pytest.raises(ValueError):
        delong_test([1, 0], [1, 0], [1, 0], labels_b=[0, 1])


# regression ---------------------------------------------------------------------

def test_regression_examples():
    r = regression_metrics([1, 2, 3], [2, 2, 5])
    assert r.rmse == pytest.approx(math.sqrt(5 / 3)) and r.mae == 1.0
    assert regression_metrics([1, 2, 3], [2, 4, 6]).pcc == pytest.approx(1.0)
    assert regression_metrics([1, 2, 3], [3, 2, 1]).pcc == pytest.approx(-1.0)


def test_regression_constant_input():
    with pytest.raises(UndefinedCorrelationError) as e:
        regression_metrics([4, 4, 4], [1, 2, 3])
    assert e.value.mae == pytest.approx(2.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-24, 24), min_size=2, max_size=20))
def test_rmse_at_least_mae(vals):
    p = np.array(vals)
    try:
        r = regression_metrics(p, np.arange(p.size, dtype=float))
        rmse, mae = r.rmse, r.mae
    except UndefinedCorrelationError:
        rmse, mae = math.nan, math.nan
    assert not rmse < mae - 1e-12


# CER ------------------------------------------------------------------------------

def test_cer_examples():
    assert cer("abc", "abc") == 0.0
    assert cer("a", "abcd") == 3.0
    assert cer("ab", "b") == 0.5
    with pytest.raises(ValueError):
        cer("", "a")
    assert corpus_cer(["ab", "cd"], ["ab", "c"]) == 0.25


@settings(max_examples=200, deadline=None)
@given(st.text("abc", max_size=8), st.text("abc", max_size=8), st.text("abc", max_size=8))
def test_edit_distance_oracle_and_triangle(a, b, c):
    assert edit_distance(a, b) == naive_edit_distance(a, b)
    assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)


# reports ------------------------------------------------------------------------------

def _reports():
    a = classification_report("EH-AC/test", [0.9, 0.3, 0.7, 0.1], [1, 1, 0, 0], "abc")
    b = classification_report("EH-AC+TL-1/test", [0.9, 0.8, 0.7, 0.1], [1, 1, 0, 0], "abc")
    return [a, b]


def test_render_is_deterministic():
    for fmt in ("table", "csv", "json"):
        assert render_report(_reports(), fmt) == render_report(_reports(), fmt)
    assert render_report(_reports(), "csv").decode().splitlines()[1] == "EH-AC/test,0.75,0.75,0.75"


def test_json_roundtrip():
    reports = _reports() + [regression_report("reg", [1, 2, 3], [2, 2, 5])]
    back = [report_from_dict(d) for d in json.loads(render_report(reports, "json"))]
    assert back == reports


def test_report_validation():
    MetricsReport(auc=0.5).validate()
    with pytest.raises(ValueError):
        MetricsReport(auc=1.2).validate()
    with pytest.raises(ValueError):
        MetricsReport(rmse=-1).validate()


def test_score_file_roundtrip(tmp_path):
    p = tmp_path / "scores.csv"
    write_scores(p, ["s1", "s2", "s3"], [1, 0, 1], [0.25, 0.5, 1 / 3], [0.1, 0.2, 0.3])
    sf = read_scores(p)
    assert sf.session_ids == ["s1", "s2", "s3"]
    np.testing.assert_array_equal(sf.scores_a, [0.25, 0.5, 1 / 3])
    assert delong_test(sf.scores_a, sf.scores_b, sf.labels).auc_b == 0.5
    write_scores(p, ["s1"], [1], [0.3])
    assert read_scores(p).scores_b is None
