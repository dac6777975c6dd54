import math
import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dannage import evaluation as ev
from dannage.errors import DegenerateCvError, StratifyError


# -- regression and stability -------------------------------------------------

def test_regression_metrics_perfect_and_offset():
    m = ev.regression_metrics([1, 2, 3], [1, 2, 3])
    assert m.mae == 0.0 and m.r2 == 1.0
    m = ev.regression_metrics([1, 2, 3], [2, 3, 4])
    assert m.mae == 1.0 and m.r2 == pytest.approx(-0.5)


def test_regression_metrics_constant_truth():
    with pytest.warns(RuntimeWarning):
        m = ev.regression_metrics([5, 5], [4, 6])
    assert math.isnan(m.r2) and m.mae == 1.0


def test_cv_values():
    assert ev.cross_dataset_cv([2, 4, 6]) == pytest.approx(40.824829046, abs=1e-6)
    assert ev.cross_dataset_cv([3, 3, 3]) == 0.0
    assert ev.cross_dataset_cv([2, 4, 6], ddof=1) == pytest.approx(50.0)
    with pytest.raises(DegenerateCvError):
        ev.cross_dataset_cv([-1, 1])


def test_stability_report_averages_folds():
    folds = [ev.FoldResult("A", 0, ("a1", "a2"), np.array([1.0, 3.0]), np.array([2.0, 3.0])),
             ev.FoldResult("A", 1, ("a1", "a2"), np.array([1.0, 3.0]), np.array([1.0, 6.0])),
             ev.FoldResult("B", 0, ("b1", "b2"), np.array([1.0, 3.0]), np.array([1.0, 4.0]))]
    rep = ev.stability_report(folds, alpha=1.0)
    assert rep.datasets == ("A", "B")
    assert rep.mae == (pytest.approx(1.0), pytest.approx(0.5))
    assert rep.cv_mae == pytest.approx(100 * np.std([1.0, 0.5]) / 0.75)


def test_tissue_bias_variance():
    res = [1.0, 3.0, 2.0, 2.0]
    assert ev.tissue_bias_variance(res, ["a", "a", "b", "b"]) == 0.0
    assert ev.tissue_bias_variance([1.0, 3.0], ["a", "b"]) == 1.0
    assert ev.tissue_bias_variance([1.0, 3.0], ["a", "a"]) is None


def test_fold_averaged_residuals():
    folds = [ev.FoldResult("A", 0, ("s",), np.array([10.0]), np.array([12.0]), ("liver",)),
             ev.FoldResult("A", 1, ("s",), np.array([10.0]), np.array([6.0]), ("liver",))]
    ids, res, tissues = ev.fold_averaged_residuals(folds)
    assert ids == ("s",) and res[0] == 1.0 and tissues == ("liver",)


# -- attribute r2 -------------------------------------------------------------

def test_attribute_r2_examples():
    onehot = np.eye(3)[[0, 1, 2, 0]]
    assert ev.attribute_r2(onehot, onehot) == pytest.approx(1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert ev.attribute_r2(np.full((4, 3), 1 / 3), onehot) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_attribute_r2_matches_pearson(seed):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(3), size=30)
    onehot = np.eye(3)[rng.integers(0, 3, 30)]
    onehot[:3] = np.eye(3)
    r2, _ = ev.attribute_r2_per_class(probs, onehot)
    for k in range(3):
        assert r2[k] == pytest.approx(np.corrcoef(probs[:, k], onehot[:, k])[0, 1] ** 2, abs=1e-12)
        assert 0.0 <= r2[k] <= 1.0


# -- probe and divergence -----------------------------------------------------

def test_stratified_split_and_errors():
    labels = ["a"] * 10 + ["b"] * 10
    tr, te = ev.stratified_split(labels, 0.3, seed=0)
    assert len(te) == 6 and len(set(tr) | set(te)) == 20
    assert sum(labels[i] == "a" for i in te) == 3
    with pytest.raises(StratifyError):
        ev.stratified_split(["a"] * 5, 0.3)
    with pytest.raises(StratifyError):
        ev.stratified_split(["a"] * 5 + ["b"], 0.3)


def test_probe_separable_and_random():
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(4), 50)
    f_sep = rng.normal(size=(200, 5)) + 5 * np.eye(4, 5)[y]
    rep = ev.probe_attribute(f_sep, y, seed=0)
    assert rep.balanced_accuracy == 1.0
    assert rep.permutation_accuracy < 0.5
    f_noise = rng.normal(size=(200, 5))
    assert ev.probe_attribute(f_noise, y, seed=0).balanced_accuracy < 0.45


def test_softmax_regression_matches_reference_optimum():
    # the gradient-descent solution satisfies the stationarity condition
    rng = np.random.default_rng(1)
    x = rng.normal(size=(60, 3))
    y = (x[:, 0] + 0.5 * rng.normal(size=60) > 0).astype(int)
    clf = ev.SoftmaxRegression(l2=1e-2, tol=1e-8, max_iter=100000).fit(x, y, 2)
    xs = clf._design(x)
    p = np.exp(xs @ clf.w)
    p /= p.sum(axis=1, keepdims=True)
    reg = np.ones((4, 1))
    reg[-1] = 0
    grad = xs.T @ (p - np.eye(2)[y]) / 60 + 2e-2 * reg * clf.w
    assert np.abs(grad).max() < 1e-8


def test_proxy_divergence_extremes():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(100, 4))
    assert ev.proxy_divergence(a, a + 10.0) == 2.0
    assert ev.proxy_divergence(a[:50], a[50:]) < 0.5
    assert 0.0 <= ev.proxy_divergence(a[:50], a[50:]) <= 2.0


def test_mean_pairwise_divergence():
    rng = np.random.default_rng(0)
    f = np.vstack([rng.normal(size=(40, 2)) + [10 * k, 0] for k in range(3)])
    dom = np.repeat(["x", "y", "z"], 40)
    assert ev.mean_pairwise_divergence(f, dom) == 2.0


# -- Welch and BH -------------------------------------------------------------

def test_welch_reference_example():
    r = ev.welch_t_test([1, 2, 3], [2, 3, 4])
    assert r.t == pytest.approx(-1.224745, abs=1e-6)
    assert r.df == pytest.approx(4.0, abs=1e-9)
    assert r.p == pytest.approx(0.2879, abs=1e-3)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 12), st.integers(2, 12))
def test_welch_matches_scipy(seed, na, nb):
    rng = np.random.default_rng(seed)
    a = rng.normal(0, rng.uniform(0.2, 3), na)
    b = rng.normal(rng.normal(), rng.uniform(0.2, 3), nb)
    ours = ev.welch_t_test(a, b)
    ref = stats.ttest_ind(a, b, equal_var=False)
    assert ours.t == pytest.approx(ref.statistic, rel=1e-9, abs=1e-12)
    assert ours.p == pytest.approx(ref.pvalue, rel=1e-7, abs=1e-12)


def test_welch_zero_variance():
    assert ev.welch_t_test([1, 1], [1, 1]).p == 1.0
    r = ev.welch_t_test([1, 1], [2, 2])
    assert r.p == 0.0 and r.t == -math.inf


@settings(max_examples=60, deadline=None)
@given(st.floats(0.5, 40), st.floats(0.5, 40), st.floats(0.001, 0.999))
def test_incomplete_beta_matches_scipy(a, b, x):
    from scipy.special import betainc
    assert ev.regularized_incomplete_beta(a, b, x) == pytest.approx(betainc(a, b, x), rel=1e-9,
                                                                   abs=1e-13)


def test_bh_examples():
    assert ev.bh_adjust([0.01, 0.02, 0.04]).tolist() == [0.03, 0.03, 0.04]
    np.testing.assert_allclose(ev.bh_adjust([0.04, 0.01, 0.5]), [0.06, 0.03, 0.5])
    assert ev.bh_adjust([]).size == 0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_bh_properties(p):
    p = np.array(p)
    adj = ev.bh_adjust(p)
    assert np.all(adj >= p - 1e-15) and np.all(adj <= 1.0)
    order = np.argsort(p, kind="mergesort")
    assert np.all(np.diff(adj[order]) >= -1e-15)
    ref = stats.false_discovery_control(p, method="bh")
    np.testing.assert_allclose(adj, ref, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("p,stars", [(0.0005, "***"), (0.001, "**"), (0.005, "**"),
                                     (0.01, "*"), (0.049, "*"), (0.05, "ns"), (0.7, "ns")])
def test_stars(p, stars):
    assert ev.significance_stars(p) == stars


# -- group comparison ---------------------------------------------------------

def group_table(shift, n=8, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for age in ("9", "25"):
        for grp in ("Control", "ELAM"):
            mu = shift if (grp == "ELAM" and age == "25") else 0.0
            for v in rng.normal(mu, 1.0, n):
                rows.append(dict(model="m", tissue="liver", sex="F", age=age, group=grp,
                                 predicted_age=v))
    return pd.DataFrame(rows)


def test_compare_groups_control_vs_treated():
    rows = ev.compare_groups(group_table(shift=4.0))
    assert [r.age for r in rows] == ["9", "25"]
    assert rows[1].p_adj < 0.05 and rows[1].stars != "ns"
    raw = [r.p for r in rows]
    np.testing.assert_allclose([r.p_adj for r in rows], ev.bh_adjust(raw))


def test_compare_groups_young_vs_old():
    t = group_table(0.0)
    t.loc[t.age == "25", "predicted_age"] += 5
    (row,) = ev.compare_groups(t, contrast="young-vs-old")
    assert row.age == "9-vs-25" and row.p_adj < 0.001


def test_compare_groups_skips_incomplete_stratum():
    t = group_table(0.0)
    t = t[~((t.age == "9") & (t.group == "ELAM"))]
    with pytest.warns(UserWarning, match="skipping"):
        rows = ev.compare_groups(t)
    assert [r.age for r in rows] == ["25"]
