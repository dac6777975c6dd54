"""Evaluation statistics: regression metrics, cross-dataset stability,
attribute diagnostics, post-hoc probes and group comparisons."""

import math
import warnings
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .errors import DegenerateCvError, ShapeError, StratifyError

# -- regression and stability ------------------------------------------------


class RegressionMetrics(NamedTuple):
    mae: float
    r2: float


def regression_metrics(y_true, y_pred):
    """Mean absolute error and coefficient of determination.

    When ``y_true`` has zero variance R² is undefined and returned as NaN
    (with a RuntimeWarning).
    """
    y = np.asarray(y_true, dtype=np.float64).reshape(-1)
    p = np.asarray(y_pred, dtype=np.float64).reshape(-1)
    if y.size == 0 or y.shape != p.shape:
        raise ShapeError("need equal, nonempty true and predicted vectors")
    mae = float(np.mean(np.abs(p - y)))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        warnings.warn("R2 undefined: true ages have zero variance", RuntimeWarning, stacklevel=2)
        return RegressionMetrics(mae, float("nan"))
    return RegressionMetrics(mae, 1.0 - float(np.sum((y - p) ** 2)) / ss_tot)


def cross_dataset_cv(values, ddof=0):
    """Coefficient of variation in percent, ``100 * sd / mean``.

    ``ddof=0`` (population sd) is the default; pass 1 for the sample form.
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size < 2:
        raise ValueError("need metric values from at least two datasets")
    mu = float(v.mean())
    if mu == 0.0:
        raise DegenerateCvError("mean of dataset-level metrics is zero")
    return 100.0 * float(v.std(ddof=ddof)) / mu


@dataclass
class FoldResult:
    dataset_id: str
    fold: int
    sample_ids: tuple
    y_true: np.ndarray
    y_pred: np.ndarray
    tissues: tuple = ()

    @property
    def metrics(self):
        return regression_metrics(self.y_true, self.y_pred)


@dataclass
class StabilityReport:
    alpha: float
    datasets: tuple
    mae: tuple  # fold-averaged per dataset
    r2: tuple
    cv_mae: float
    cv_r2: float

    def rows(self):
        return [
            {"alpha": self.alpha, "metric": "MAE", "cv_percent": self.cv_mae,
             **{f"mean_{d}": m for d, m in zip(self.datasets, self.mae)}},
            {"alpha": self.alpha, "metric": "R2", "cv_percent": self.cv_r2,
             **{f"mean_{d}": m for d, m in zip(self.datasets, self.r2)}},
        ]


def stability_report(folds, alpha, ddof=0):
    by_ds = {}
    for f in folds:
        by_ds.setdefault(f.dataset_id, []).append(f.metrics)
    datasets = tuple(sorted(by_ds))
    mae = tuple(float(np.mean([m.mae for m in by_ds[d]])) for d in datasets)
    r2 = tuple(float(np.mean([m.r2 for m in by_ds[d]])) for d in datasets)

    def cv(vals):
        try:
            return cross_dataset_cv(vals, ddof)
        except (ValueError, DegenerateCvError):
            return float("nan")

    return StabilityReport(alpha, datasets, mae, r2, cv(mae), cv(r2))


def fold_averaged_residuals(folds):
    """Average each sample's predictions over folds; return ids, |residual|, tissue."""
    acc = {}
    for f in folds:
        tissues = f.tissues or ("",) * len(f.sample_ids)
        for s, y, p, t in zip(f.sample_ids, f.y_true, f.y_pred, tissues):
            rec = acc.setdefault(s, [y, [], t])
            rec[1].append(p)
    ids = tuple(sorted(acc))
    res = np.array([abs(float(np.mean(acc[s][1])) - acc[s][0]) for s in ids])
    return ids, res, tuple(acc[s][2] for s in ids)


def tissue_bias_variance(abs_residuals, tissues, ddof=0):
    """Variance across tissues of the per-tissue mean absolute residual.

    Returns None when fewer than two tissues are present.
    """
    r = np.asarray(abs_residuals, dtype=np.float64)
    groups = {}
    for v, t in zip(r, tissues):
        groups.setdefault(t, []).append(v)
    if len(groups) < 2:
        return None
    means = np.array([np.mean(groups[t]) for t in sorted(groups)])
    return float(means.var(ddof=ddof))


# -- attribute correlation ---------------------------------------------------

def attribute_r2_per_class(probs, onehot):
    """Squared Pearson correlation per class; zero-variance classes give 0."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(onehot, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 2:
        raise ShapeError("probabilities and one-hot labels must share a (n, K) shape")
    out = np.zeros(p.shape[1])
    degenerate = []
    for k in range(p.shape[1]):
        a, b = y[:, k] - y[:, k].mean(), p[:, k] - p[:, k].mean()
        den = math.sqrt(float(a @ a) * float(b @ b))
        if den == 0.0:
            degenerate.append(k)
            continue
        out[k] = (float(a @ b) / den) ** 2
    return out, tuple(degenerate)


def attribute_r2(probs, onehot):
    r2, _ = attribute_r2_per_class(probs, onehot)
    return float(r2.mean())


# -- linear probe ------------------------------------------------------------

@dataclass
class ProbeReport:
    attribute: str
    balanced_accuracy: float
    permutation_accuracy: float
    n_classes: int
    n_train: int
    n_test: int

    def as_dict(self):
        return asdict(self)


def stratified_split(labels, test_frac=0.3, seed=0):
    """Per-class shuffled split; returns (train_idx, test_idx) sorted."""
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    if len(classes) < 2:
        raise StratifyError(f"need at least two classes, found {len(classes)}")
    rng = np.random.Generator(np.random.PCG64(seed))
    train, test = [], []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        if idx.size < 2:
            raise StratifyError(f"class {c!r} has {idx.size} sample(s); need 2")
        idx = rng.permutation(idx)
        n_test = min(idx.size - 1, max(1, int(round(test_frac * idx.size))))
        test.extend(idx[:n_test].tolist())
        train.extend(idx[n_test:].tolist())
    return np.array(sorted(train)), np.array(sorted(test))


class SoftmaxRegression:
    """Multinomial logistic regression fit by full-batch gradient descent.

    Features are standardized with training statistics; the step size is
    the inverse of a Lipschitz bound on the loss gradient.
    """

    def __init__(self, l2=1e-4, tol=1e-6, max_iter=5000):
        self.l2, self.tol, self.max_iter = l2, tol, max_iter

    def fit(self, x, y, n_classes):
        x = np.asarray(x, dtype=np.float64)
        self.mu = x.mean(axis=0)
        sd = x.std(axis=0)
        self.sd = np.where(sd < 1e-12, 1.0, sd)
        xs = self._design(x)
        n, p = xs.shape
        onehot = np.zeros((n, n_classes))
        onehot[np.arange(n), y] = 1.0
        lip = 0.5 * np.linalg.norm(xs, 2) ** 2 / n + 2.0 * self.l2
        step = 1.0 / lip
        w = np.zeros((p, n_classes))
        reg = np.ones((p, 1))
        reg[-1] = 0.0  # intercept is not penalized
        self.n_iter = 0
        for self.n_iter in range(1, self.max_iter + 1):
            z = xs @ w
            z -= z.max(axis=1, keepdims=True)
            prob = np.exp(z)
            prob /= prob.sum(axis=1, keepdims=True)
            grad = xs.T @ (prob - onehot) / n + 2.0 * self.l2 * reg * w
            if np.max(np.abs(grad)) < self.tol:
                break
            w -= step * grad
        self.w = w
        return self

    def _design(self, x):
        xs = (x - self.mu) / self.sd
        return np.hstack([xs, np.ones((xs.shape[0], 1))])

    def predict(self, x):
        return np.argmax(self._design(np.asarray(x, dtype=np.float64)) @ self.w, axis=1)


def balanced_accuracy(y_true, y_pred):
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    recalls = [np.mean(y_pred[y_true == c] == c) for c in np.unique(y_true)]
    return float(np.mean(recalls))


def _encode_labels(labels):
    classes = sorted(set(np.asarray(labels).tolist()))
    lookup = {c: i for i, c in enumerate(classes)}
    return np.array([lookup[v] for v in np.asarray(labels).tolist()]), classes


def _probe_once(features, y, k, seed, test_frac, **fit_kw):
    tr, te = stratified_split(y, test_frac, seed)
    clf = SoftmaxRegression(**fit_kw).fit(features[tr], y[tr], k)
    pred = clf.predict(features[te])
    return pred, y[te], len(tr), len(te)


def probe_attribute(features, labels, seed=0, attribute="attribute", test_frac=0.3,
                    l2=1e-4, tol=1e-6, max_iter=5000):
    """Balanced accuracy of a linear probe predicting ``labels`` from ``features``.

    The permutation baseline reruns the identical procedure after shuffling
    the labels once with ``seed``.
    """
    f = np.asarray(features, dtype=np.float64)
    y, classes = _encode_labels(labels)
    if f.shape[0] != y.size:
        raise ShapeError("one label per feature row expected")
    k = len(classes)
    kw = dict(l2=l2, tol=tol, max_iter=max_iter)
    pred, truth, n_tr, n_te = _probe_once(f, y, k, seed, test_frac, **kw)
    bal = balanced_accuracy(truth, pred)
    perm = np.random.Generator(np.random.PCG64(seed + 1)).permutation(y)
    ppred, ptruth, _, _ = _probe_once(f, perm, k, seed, test_frac, **kw)
    return ProbeReport(attribute, bal, balanced_accuracy(ptruth, ppred), k, n_tr, n_te)


def proxy_divergence(f_source, f_target, seed=0, test_frac=0.3, l2=1e-4, tol=1e-6,
                     max_iter=5000):
    """Domain-classifier proxy for the divergence between two feature sets.

    A linear probe separates source from target rows; with held-out error
    ``err`` the estimate is ``2 * (1 - 2 * err)`` clamped to ``[0, 2]``.
    """
    a = np.asarray(f_source, dtype=np.float64)
    b = np.asarray(f_target, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both domains need samples")
    x = np.vstack([a, b])
    y = np.concatenate([np.zeros(len(a), dtype=int), np.ones(len(b), dtype=int)])
    pred, truth, _, _ = _probe_once(x, y, 2, seed, test_frac, l2=l2, tol=tol, max_iter=max_iter)
    err = float(np.mean(pred != truth))
    return min(2.0, max(0.0, 2.0 * (1.0 - 2.0 * err)))


def mean_pairwise_divergence(features, domains, seed=0, **kw):
    """Average ``proxy_divergence`` over all pairs of domain labels."""
    features = np.asarray(features, dtype=np.float64)
    domains = np.asarray(domains)
    levels = sorted(set(domains.tolist()))
    vals = []
    for i, a in enumerate(levels):
        for b in levels[i + 1:]:
            vals.append(proxy_divergence(features[domains == a], features[domains == b], seed, **kw))
    return float(np.mean(vals))


# -- Welch t-test and multiple testing ---------------------------------------

def _betacf(a, b, x, eps=1e-16, max_iter=2000):
    # modified Lentz evaluation of the incomplete beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a, b, x):
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t, df):
    if math.isinf(t):
        return 0.0
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


class WelchResult(NamedTuple):
    t: float
    df: float
    p: float


def welch_t_test(a, b):
    """Two-sided unequal-variance t-test with Welch-Satterthwaite df."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each group needs at least two samples")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = float(a.mean() - b.mean())
    se2 = va + vb
    if se2 == 0.0:
        if diff == 0.0:
            return WelchResult(0.0, float(a.size + b.size - 2), 1.0)
        return WelchResult(math.copysign(math.inf, diff), float(a.size + b.size - 2), 0.0)
    t = diff / math.sqrt(se2)
    df = se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    return WelchResult(t, df, t_two_sided_p(t, df))


def bh_adjust(pvalues):
    """Benjamini-Hochberg step-up adjusted p-values, in input order."""
    p = np.asarray(pvalues, dtype=np.float64).reshape(-1)
    if p.size == 0:
        return p
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="mergesort")
    scaled = p[order] * m / np.arange(1, m + 1)
    adj = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(adj, 1.0)
    return out


def significance_stars(p_adj):
    if p_adj < 0.001:
        return "***"
    if p_adj < 0.01:
        return "**"
    if p_adj < 0.05:
        return "*"
    return "ns"


@dataclass
class GroupComparison:
    model: str
    tissue: str
    sex: str
    age: str
    group_a: str
    group_b: str
    n_a: int
    n_b: int
    mean_a: float
    mean_b: float
    t: float
    df: float
    p: float
    p_adj: float = float("nan")
    stars: str = ""

    def as_dict(self):
        return asdict(self)


def _age_key(v):
    try:
        return (0, float(v), str(v))
    except (TypeError, ValueError):
        return (1, 0.0, str(v))


def compare_groups(table, contrast="control-vs-treated", value="predicted_age",
                   control="Control", treated="ELAM"):
    """Welch tests per stratum with BH adjustment inside each tissue x sex family.

    ``table`` is a DataFrame (or anything with a ``to_dict("records")``) with
    columns ``model, tissue, sex, age, group`` and the ``value`` column.
    ``control-vs-treated`` compares ``control`` against ``treated`` in every
    tissue x sex x age stratum; ``young-vs-old`` compares the youngest with the
    oldest age level among ``control`` samples in every tissue x sex stratum.
    Strata lacking one of the groups are skipped with a warning.
    """
    records = table.to_dict("records") if hasattr(table, "to_dict") else list(table)
    cells = {}
    for r in records:
        key = (str(r["model"]), str(r["tissue"]), str(r["sex"]))
        cells.setdefault(key, []).append(r)

    rows = []
    for (model, tissue, sex), recs in sorted(cells.items()):
        if contrast == "control-vs-treated":
            for age in sorted({str(r["age"]) for r in recs}, key=_age_key):
                a = [r[value] for r in recs if str(r["age"]) == age and str(r["group"]) == control]
                b = [r[value] for r in recs if str(r["age"]) == age and str(r["group"]) == treated]
                rows.append(_compare(model, tissue, sex, age, control, treated, a, b))
        elif contrast == "young-vs-old":
            ctrl = [r for r in recs if str(r["group"]) == control]
            ages = sorted({str(r["age"]) for r in ctrl}, key=_age_key)
            young, old = (ages[0], ages[-1]) if ages else ("", "")
            a = [r[value] for r in ctrl if str(r["age"]) == young]
            b = [r[value] for r in ctrl if str(r["age"]) == old]
            rows.append(_compare(model, tissue, sex, f"{young}-vs-{old}", young, old,
                                 a if young != old else [], b))
        else:
            raise ValueError(f"unknown contrast {contrast!r}")
    rows = [r for r in rows if r is not None]

    families = {}
    for r in rows:
        families.setdefault((r.tissue, r.sex), []).append(r)
    for fam in families.values():
        for r, padj in zip(fam, bh_adjust([r.p for r in fam])):
            r.p_adj = float(padj)
            r.stars = significance_stars(r.p_adj)
    return rows


def _compare(model, tissue, sex, age, label_a, label_b, a, b):
    if len(a) < 2 or len(b) < 2:
        warnings.warn(f"skipping stratum {model}/{tissue}/{sex}/{age}: "
                      f"groups {label_a!r} (n={len(a)}) and {label_b!r} (n={len(b)})",
                      stacklevel=3)
        return None
    res = welch_t_test(a, b)
    return GroupComparison(model, tissue, sex, age, label_a, label_b, len(a), len(b),
                           float(np.mean(a)), float(np.mean(b)), res.t, res.df, res.p)
