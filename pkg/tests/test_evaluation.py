import numpy as np
import pytest

from ltfsl import data as D, evaluation as ev, numerics as nx
from ltfsl.errors import InvalidArgument, UndefinedRecall

from conftest import blobs


def test_top1():
    assert ev.top1_accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert ev.top1_accuracy([0, 0], [1, 1]) == 0.0
    assert ev.top1_accuracy([0, 1, 1, 1], [0, 1, 1, 0]) == 0.75
    with pytest.raises(InvalidArgument):
        ev.top1_accuracy([], [])


def test_balanced_accuracy_cases():
    assert ev.balanced_accuracy(np.diag([3, 4, 5])) == 1.0
    cm = np.array([[2, 0], [1, 1]])
    assert ev.balanced_accuracy(cm) == 0.75
    cm3 = ev.confusion_matrix([0, 0, 0, 1, 1, 2, 2, 2, 2], [0, 1, 0, 1, 2, 2, 2, 0, 2], 3)
    assert ev.balanced_accuracy(cm3) == pytest.approx((2 / 3 + 1 / 2 + 3 / 4) / 3, abs=1e-15)
    assert ev.balanced_accuracy(cm3, [1, 2]) == pytest.approx((1 / 2 + 3 / 4) / 2, abs=1e-15)
    with pytest.raises(UndefinedRecall):
        ev.balanced_accuracy(np.array([[1, 0], [0, 0]]))
    with pytest.raises(InvalidArgument):
        ev.balanced_accuracy(cm, [])


def test_uniform_counts_equal_top1(rng):
    y = np.repeat(np.arange(5), 12)
    p = rng.integers(0, 5, y.size)
    assert ev.balanced_accuracy(ev.confusion_matrix(y, p, 5)) == pytest.approx(
        ev.top1_accuracy(p, y), abs=1e-12)


def test_ci():
    assert round(ev.ci_halfwidth(0.1, 100), 10) == 0.0196
    assert ev.confidence_interval([0.4, 0.4, 0.4])[1] == 0.0
    assert ev.ci_halfwidth(0.2, 400) == pytest.approx(ev.ci_halfwidth(0.2, 100) / 2, rel=1e-15)
    with pytest.raises(InvalidArgument):
        ev.confidence_interval([0.5])


def _registry():
    classes = ("a", "b", "r")
    return D.ClassRegistry(classes, {"a": D.COMMON, "b": D.COMMON, "r": D.RARE},
                           {c: 100 for c in classes}, {"a": 3, "b": 2, "r": 2})


def _test_set():
    from conftest import make_dataset
    return make_dataset(["a", "a", "a", "b", "b", "r", "r"], np.arange(7.0))


def test_realworld_perfect_and_constant():
    reg, test = _registry(), _test_set()
    y = reg.encode(test.labels)
    perfect = ev.run_realworld_eval(lambda x: y, test, reg)
    assert (perfect.top1_accuracy, perfect.balanced_accuracy_all, perfect.balanced_accuracy_common,
            perfect.balanced_accuracy_rare) == (1.0, 1.0, 1.0, 1.0)
    const = ev.run_realworld_eval(lambda x: np.zeros(len(x), dtype=int), test, reg)
    assert const.balanced_accuracy_rare == 0.0
    assert const.balanced_accuracy_common == 0.5
    assert const.per_class_recall == {"a": 1.0, "b": 0.0, "r": 0.0}


def test_realworld_accepts_model_output():
    reg, test = _registry(), _test_set()
    logits = np.eye(3)[reg.encode(test.labels)]
    rep = ev.run_realworld_eval(lambda x: nx.ModelOutput.from_logits(logits), test, reg)
    assert rep.balanced_accuracy_all == 1.0


def test_report_csv_format():
    reg, test = _registry(), _test_set()
    rep = ev.run_realworld_eval(lambda x: np.zeros(len(x), dtype=int), test, reg)
    lines = ev.report_to_csv(rep).splitlines()
    assert lines[0] == "metric,group,value,ci_halfwidth,E"
    assert lines[1] == "top1_accuracy,all,0.42857142857142855,,1"
    assert lines[3] == "balanced_accuracy,common,0.5,,1"
    assert lines[-1] == "recall,r,0.0,,1"


def test_aggregate_reports():
    reg, test = _registry(), _test_set()
    y = reg.encode(test.labels)
    reps = [ev.run_realworld_eval(lambda x: y, test, reg),
            ev.run_realworld_eval(lambda x: np.zeros(len(x), dtype=int), test, reg)]
    agg = ev.aggregate_reports(reps)
    assert agg.E == 2
    assert agg.balanced_accuracy_rare == 0.5
    s = np.std([1.0, 0.0], ddof=1)
    assert agg.ci_halfwidth[("balanced_accuracy", "rare")] == pytest.approx(1.96 * s / np.sqrt(2))


def test_standard_eval_oracles(rng):
    ds = blobs(np.eye(6) * 5, 30, 0.1, rng)
    spec = D.EpisodeSpec(5, 5, 10)

    def oracle(sx, sy, n, qx):
        protos = np.stack([sx[sy == c].mean(axis=0) for c in range(n)])
        return np.argmin(((qx[:, None] - protos[None]) ** 2).sum(-1), axis=1)
    rep = ev.run_standard_eval(oracle, ds, ds.label_set, spec, episodes=20, seed=1)
    assert rep.top1_accuracy == 1.0 and rep.ci_halfwidth[("top1_accuracy", "all")] == 0.0

    def uniform(sx, sy, n, qx, r=np.random.default_rng(7)):
        return r.integers(0, n, len(qx))
    rep, accs = ev.run_standard_eval(uniform, ds, ds.label_set, spec, episodes=600, seed=2,
                                     return_accuracies=True)
    half = rep.ci_halfwidth[("top1_accuracy", "all")]
    assert abs(rep.top1_accuracy - 0.2) <= 2 * half
    assert accs.shape == (600,)


def test_standard_eval_threads_match_serial(rng):
    ds = blobs(np.eye(6) * 2, 30, 1.0, rng)
    spec = D.EpisodeSpec(5, 2, 3)

    def nearest_support(sx, sy, n, qx):
        return sy[np.argmin(((qx[:, None] - sx[None]) ** 2).sum(-1), axis=1)]
    a = ev.run_standard_eval(nearest_support, ds, ds.label_set, spec, episodes=30, seed=4)
    b = ev.run_standard_eval(nearest_support, ds, ds.label_set, spec, episodes=30, seed=4, threads=3)
    assert a == b
