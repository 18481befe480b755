"""Metrics plus the standard (episodic) and real-world (all-way) protocols."""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ltfsl.errors import InvalidArgument, UndefinedRecall

Z95 = 1.96


def top1_accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise InvalidArgument("preds and labels must be equal-length 1-D sequences")
    if preds.size == 0:
        raise InvalidArgument("need at least one prediction")
    return float(np.mean(preds == labels))


def confusion_matrix(true, pred, n_classes) -> np.ndarray:
    """Counts with rows indexed by true class, columns by predicted class."""
    true = np.asarray(true, dtype=np.intp)
    pred = np.asarray(pred, dtype=np.intp)
    if true.shape != pred.shape:
        raise InvalidArgument("true and pred lengths differ")
    flat = np.bincount(true * n_classes + pred, minlength=n_classes * n_classes)
    return flat.reshape(n_classes, n_classes).astype(np.int64)


def per_class_recall(cm) -> np.ndarray:
    """Diagonal over row sums; NaN for empty rows."""
    cm = np.asarray(cm)
    rows = cm.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(rows > 0, np.diag(cm) / np.where(rows > 0, rows, 1), np.nan)


def balanced_accuracy(cm, class_subset=None) -> float:
    """Mean recall over ``class_subset`` (all classes by default).

    An empty row inside the subset raises :class:`UndefinedRecall`.
    """
    cm = np.asarray(cm)
    subset = list(range(cm.shape[0])) if class_subset is None else list(class_subset)
    if not subset:
        raise InvalidArgument("empty class subset")
    rows = cm.sum(axis=1)
    empty = [c for c in subset if rows[c] == 0]
    if empty:
        raise UndefinedRecall(f"class index {empty[0]} has no test examples")
    return float(np.mean([cm[c, c] / rows[c] for c in subset]))


def ci_halfwidth(sigma, n) -> float:
    return Z95 * sigma / math.sqrt(n)


def confidence_interval(values):
    """``(mean, 1.96 * s / sqrt(E))`` with the sample standard deviation ``s``.

    Normal approximation over per-run or per-episode accuracies.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise InvalidArgument("confidence interval needs at least two values")
    if np.all(v == v[0]):
        # the mean of equal values can round away from them; spread is exactly 0
        return float(v[0]), 0.0
    return float(v.mean()), ci_halfwidth(float(v.std(ddof=1)), v.size)


# ----------------------------------------------------------- report type

METRICS = (("top1_accuracy", "all"), ("balanced_accuracy", "all"),
           ("balanced_accuracy", "common"), ("balanced_accuracy", "rare"))


@dataclass(frozen=True)
class MetricReport:
    top1_accuracy: float
    balanced_accuracy_all: float
    balanced_accuracy_common: float | None = None
    balanced_accuracy_rare: float | None = None
    per_class_recall: dict = field(default_factory=dict)
    E: int = 1
    ci_halfwidth: dict = field(default_factory=dict)

    def value(self, metric, group):
        if metric == "top1_accuracy":
            return self.top1_accuracy
        if metric == "balanced_accuracy":
            return getattr(self, f"balanced_accuracy_{group}")
        if metric == "recall":
            return self.per_class_recall[group]
        raise InvalidArgument(f"unknown metric {metric!r}")

    def rows(self):
        """``(metric, group, value, ci_halfwidth, E)`` tuples in a fixed order."""
        out = []
        for metric, group in METRICS:
            val = self.value(metric, group)
            if val is not None:
                out.append((metric, group, val, self.ci_halfwidth.get((metric, group)), self.E))
        for label, rec in self.per_class_recall.items():
            out.append(("recall", label, rec, self.ci_halfwidth.get(("recall", label)), self.E))
        return out

    def to_dict(self):
        return {
            "top1_accuracy": self.top1_accuracy,
            "balanced_accuracy_all": self.balanced_accuracy_all,
            "balanced_accuracy_common": self.balanced_accuracy_common,
            "balanced_accuracy_rare": self.balanced_accuracy_rare,
            "per_class_recall": dict(self.per_class_recall),
            "E": self.E,
            "ci_halfwidth": {f"{m}/{g}": v for (m, g), v in self.ci_halfwidth.items()},
        }


def fmt_float(v):
    return "" if v is None else repr(float(v))


def report_to_csv(report: MetricReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "group", "value", "ci_halfwidth", "E"])
    for metric, group, val, ci, e in report.rows():
        w.writerow([metric, group, fmt_float(val), fmt_float(ci), e])
    return buf.getvalue()


def aggregate_reports(reports) -> MetricReport:
    """Mean over runs with a CI halfwidth per metric (when E >= 2)."""
    reports = list(reports)
    if not reports:
        raise InvalidArgument("nothing to aggregate")
    if len(reports) == 1:
        return reports[0]

    def agg(vals):
        if any(v is None for v in vals):
            return None, None
        return confidence_interval(vals)

    ci = {}
    means = {}
    for metric, group in METRICS:
        m, h = agg([r.value(metric, group) for r in reports])
        means[(metric, group)] = m
        if h is not None:
            ci[(metric, group)] = h
    recalls = {}
    for label in reports[0].per_class_recall:
        m, h = agg([r.per_class_recall[label] for r in reports])
        recalls[label] = m
        ci[("recall", label)] = h
    return MetricReport(means[("top1_accuracy", "all")], means[("balanced_accuracy", "all")],
                        means[("balanced_accuracy", "common")], means[("balanced_accuracy", "rare")],
                        recalls, len(reports), ci)


# ------------------------------------------------------------- protocols

def _labels_from(out):
    if hasattr(out, "labels"):
        return np.asarray(out.labels)
    arr = np.asarray(out)
    return arr if arr.ndim == 1 else np.argmax(arr, axis=1)


def run_realworld_eval(predictor, test, registry) -> MetricReport:
    """Score ``predictor`` on every test example, over all registry classes.

    ``predictor`` maps a feature batch (n, D) to a batched ModelOutput
    (or an array of labels / logits).
    """
    if len(test) == 0:
        raise InvalidArgument("test set is empty")
    y = registry.encode(test.labels)
    preds = _labels_from(predictor(test.features))
    return report_from_predictions(y, preds, registry)


def report_from_predictions(y, preds, registry) -> MetricReport:
    from ltfsl.data import COMMON, RARE

    cm = confusion_matrix(y, preds, registry.n_classes)
    rows = cm.sum(axis=1)
    expected = [registry.test_counts.get(c, 0) > 0 for c in registry.classes]
    present = [i for i, ok in enumerate(expected) if ok]
    for i in present:
        if rows[i] == 0:
            raise UndefinedRecall(f"class {registry.classes[i]!r} expected in test but absent")
    if not present:
        present = [i for i in range(registry.n_classes) if rows[i] > 0]
    recalls = per_class_recall(cm)

    def group_ba(group):
        idx = [i for i in present if registry.groups[registry.classes[i]] == group]
        return balanced_accuracy(cm, idx) if idx else None

    return MetricReport(
        top1_accuracy=top1_accuracy(preds, y),
        balanced_accuracy_all=balanced_accuracy(cm, present),
        balanced_accuracy_common=group_ba(COMMON),
        balanced_accuracy_rare=group_ba(RARE),
        per_class_recall={registry.classes[i]: float(recalls[i]) for i in present},
    )


def episode_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def run_standard_eval(predictor, source, test_pool, eval_spec, episodes=600, seed=0, threads=1,
                      return_accuracies=False):
    """Mean N-way-k-shot episode accuracy with its 95% CI over ``episodes`` runs.

    ``predictor`` is a MetaModel (anything with ``episode_predict``) or a
    callable ``(support_x, support_y, n_way, query_x) -> logits or labels``.
    Episode ``i`` draws from its own RNG stream ``(seed, i)``.
    """
    from ltfsl.data import sample_episode

    fn = predictor.episode_predict if hasattr(predictor, "episode_predict") else predictor

    def one(i):
        ep = sample_episode(source, eval_spec, test_pool, episode_rng(seed, i))
        out = fn(ep.support_x, ep.support_y, ep.n_way, ep.query_x)
        return top1_accuracy(_labels_from(out), ep.query_y)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            accs = list(pool.map(one, range(episodes)))
    else:
        accs = [one(i) for i in range(episodes)]
    if episodes >= 2:
        mean, half = confidence_interval(accs)
        ci = {("top1_accuracy", "all"): half, ("balanced_accuracy", "all"): half}
    else:
        mean, ci = accs[0], {}
    # every class has q queries, so balanced accuracy equals accuracy
    report = MetricReport(mean, mean, E=episodes, ci_halfwidth=ci)
    return (report, np.asarray(accs)) if return_accuracies else report
