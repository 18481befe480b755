"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are echoed in the terminal summary too, so they survive output
capture.
"""
import contextlib
import time
from importlib.resources import files

import numpy as np
import pytest

from ltfsl import cli, csl, data as D, ensemble as E, evaluation as ev, fsl, numerics as nx
from ltfsl.config import load_config
from ltfsl.pipeline import run_experiment

from conftest import ACCEPTANCE_LINES

CONFIGS = files("ltfsl") / "configs"


@contextlib.contextmanager
def criterion(label, detail=lambda: ""):
    t0 = time.perf_counter()
    try:
        yield
    except BaseException:
        line = f"FAIL  {label}  ({time.perf_counter() - t0:.1f}s) {detail()}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        raise
    line = f"PASS  {label}  ({time.perf_counter() - t0:.1f}s) {detail()}"
    print(line)
    ACCEPTANCE_LINES.append(line)


def flat(tree):
    return np.concatenate([leaf.ravel() for leaf in nx.tree_leaves(tree)])


# --------------------------------------------------------------- 1

def test_c01_gradients_match_finite_differences():
    worst = [0.0]
    with criterion("1 gradient check", lambda: f"max rel err {worst[0]:.2e}"):
        t0 = time.perf_counter()
        for seed in range(10):
            r = np.random.default_rng(seed)
            n_classes = 5
            params = nx.init_mlp((6, 8, 8, n_classes), r)
            batch = (r.standard_normal((12, 6)), r.integers(0, n_classes, 12))
            alpha = r.uniform(0.5, 2.0, n_classes)
            losses = [nx.ClassifierLoss("ce"), nx.ClassifierLoss("ce", alpha=alpha)]
            losses += [nx.ClassifierLoss("focal", alpha=alpha, gamma=g) for g in (0.0, 1.0, 2.0)]
            for loss in losses:
                a = flat(nx.gradients(loss, params, batch))
                f = flat(nx.finite_diff_gradients(loss, params, 1e-5, batch))
                scale = np.maximum(np.abs(a), np.abs(f))
                # entries that are exactly zero on both sides (dead units) agree trivially
                rel = np.divide(np.abs(a - f), scale, out=np.zeros_like(a), where=scale > 0)
                worst[0] = max(worst[0], float(rel.max()))
        assert worst[0] < 1e-4
        assert time.perf_counter() - t0 < 60


# --------------------------------------------------------------- 2

def test_c02_ensemble_algebra():
    worst = [0.0]
    with criterion("2 ensemble algebra", lambda: f"max |diff| {worst[0]:.2e}"):
        t0 = time.perf_counter()
        r = np.random.default_rng(2)
        for _ in range(1000):
            m, c = int(r.integers(1, 5)), int(r.integers(2, 70))
            logits = [r.standard_normal(c) * r.uniform(0.1, 10.0) for _ in range(m)]
            a = nx.softmax(E.ensemble_logits(logits))
            b = E.ensemble_probs_geomean([nx.softmax(f) for f in logits])
            worst[0] = max(worst[0], float(np.max(np.abs(a - b))))
        assert worst[0] <= 1e-9
        assert time.perf_counter() - t0 < 10


# --------------------------------------------------------------- 3

def test_c03_prototypical_oracle():
    agree = [0, 0]
    with criterion("3 prototypical oracle", lambda: f"{agree[0]}/{agree[1]} queries agree"):
        t0 = time.perf_counter()
        r = np.random.default_rng(3)
        for _ in range(500):
            n, k, q, d = (int(v) for v in (r.integers(2, 11), r.integers(1, 6),
                                            r.integers(1, 11), r.integers(1, 17)))
            emb = nx.init_mlp((d, 12, 8), r)
            sx, sy = r.standard_normal((n * k, d)), np.repeat(np.arange(n), k)
            qx = r.standard_normal((n * q, d))
            got = fsl.proto_predict(fsl.index_from_arrays(emb, sx, sy, n), qx).labels
            es, eq = nx.mlp_apply(emb, sx), nx.mlp_apply(emb, qx)
            means = [es[sy == c].mean(axis=0) for c in range(n)]
            for i, e in enumerate(eq):
                dists = [float(np.sum((e - mu) ** 2)) for mu in means]
                agree[0] += int(got[i] == dists.index(min(dists)))
                agree[1] += 1
        assert agree[0] == agree[1]
        assert time.perf_counter() - t0 < 30


# --------------------------------------------------------------- 4

def test_c04_proto_maml_init_equivalence():
    stats = {"argmax": 0, "spread": 0.0}
    with criterion("4 proto-MAML init", lambda: f"argmax agree {stats['argmax']}/1000, "
                   f"max offset spread {stats['spread']:.2e}"):
        r = np.random.default_rng(4)
        emb = nx.init_mlp((10, 16, 8), r)
        sx, sy = r.standard_normal((25, 10)), np.repeat(np.arange(5), 5)
        idx = fsl.index_from_arrays(emb, sx, sy, 5)
        head = fsl.proto_maml_head_init(idx)
        qx = r.standard_normal((1000, 10))
        lin = nx.mlp_apply(head, fsl.embed(emb, qx))
        proto = fsl.proto_predict(idx, qx).logits
        stats["argmax"] = int(np.sum(np.argmax(lin, 1) == np.argmax(proto, 1)))
        diff = lin - proto
        stats["spread"] = float(np.max(np.abs(diff - diff[:, :1])))
        assert stats["argmax"] == 1000
        assert stats["spread"] <= 1e-9


# --------------------------------------------------------------- 5

def test_c05_focal_gamma0_equals_ce_trajectory():
    worst = [np.inf]
    with criterion("5 focal reduction", lambda: f"max |loss diff| {worst[0]:.2e}"):
        ds = D.generate_synthetic(D.SyntheticSpec(classes=12, max_count=200), 5)
        dev, test = D.temporal_split(ds, 0.75)
        reg, dev, _ = D.build_class_registry(dev, test, D.Thresholds(40, 10, 2))
        train, val = D.stratified_train_val_split(dev, 0.1, 5)
        base = dict(steps=300, hidden=(32,), eval_every=50)
        focal = csl.train_csl(train, val, reg, csl.CslConfig({"focal"}, gamma=0.0, **base), 11)
        plain = csl.train_csl(train, val, reg, csl.CslConfig(frozenset(), **base), 11)
        assert len(focal.loss_history) == len(plain.loss_history) > 0
        worst[0] = float(np.max(np.abs(np.subtract(focal.loss_history, plain.loss_history))))
        assert worst[0] <= 1e-12
        # and at the loss level with an explicit unit alpha
        ones = np.ones(reg.n_classes)
        fl = nx.ClassifierLoss("focal", alpha=ones, gamma=0.0)
        ce = nx.ClassifierLoss("ce")
        params = nx.init_mlp((ds.dim, 8, reg.n_classes), np.random.default_rng(0))
        y = reg.encode(train.labels)
        for _ in range(50):
            lf, gf = fl.value_and_grad(params, (train.features, y))
            lc, gc = ce.value_and_grad(params, (train.features, y))
            assert abs(lf - lc) <= 1e-12
            params = nx.MlpParams(*(tuple(p - 0.5 * g for p, g in zip(ps, gs))
                                    for ps, gs in ((params.weights, gc.weights),
                                                   (params.biases, gc.biases))))


# --------------------------------------------------------------- 6

def test_c06_protocol_invariants():
    violations = [0, 0]
    with criterion("6 protocol invariants", lambda: f"{violations[0]} violations in "
                   f"{violations[1]} checks"):
        ds = D.generate_synthetic(D.SyntheticSpec(), 6)
        dev, test = D.temporal_split(ds, 0.75)
        reg, dev, test = D.build_class_registry(dev, test, D.Thresholds())

        def check(ok):
            violations[1] += 1
            violations[0] += 0 if ok else 1

        train_pool, val_pool = D.realworld_class_pools(reg)
        check(not set(train_pool) & set(val_pool))
        pools = D.standard_class_pools(ds, 15)
        for i in range(3):
            for j in range(i + 1, 3):
                check(not set(pools[i]) & set(pools[j]))
        r = np.random.default_rng(6)
        specs = [D.EpisodeSpec(5, 5, 10), D.EpisodeSpec(3, 1, 4), D.EpisodeSpec(4, 2, 3)]
        for t in range(10_000):
            spec = specs[t % 3]
            source, pool = (ds, pools[t % 3]) if t % 2 else (dev, train_pool)
            pool = D.feasible_classes(source, pool, spec.k_shot + spec.q_query)
            ep = D.sample_episode(source, spec, pool, r)
            check(len(ep.classes) == spec.n_way == len(set(ep.classes)))
            check(set(ep.classes) <= set(pool))
            check(np.array_equal(np.bincount(ep.support_y, minlength=spec.n_way),
                                 [spec.k_shot] * spec.n_way))
            check(np.array_equal(np.bincount(ep.query_y, minlength=spec.n_way),
                                 [spec.q_query] * spec.n_way))
            check(not set(ep.support_idx.tolist()) & set(ep.query_idx.tolist()))
            labels = np.asarray(source.labels, dtype=object)
            check(all(labels[i] == ep.classes[c] for i, c in zip(ep.support_idx, ep.support_y)))
            check(all(labels[i] == ep.classes[c] for i, c in zip(ep.query_idx, ep.query_y)))
        assert violations[0] == 0


# --------------------------------------------------------------- 7

def test_c07_metric_identities():
    worst = [0.0]
    with criterion("7 metric identities", lambda: f"max |BA diff| {worst[0]:.2e}"):
        r = np.random.default_rng(7)
        for _ in range(500):
            c = int(r.integers(2, 30))
            cm = r.integers(0, 50, (c, c))
            cm[np.arange(c), r.integers(0, c, c)] += 1  # every row non-empty
            recalls = []
            for i in range(c):
                total = 0
                for j in range(c):
                    total += cm[i, j]
                recalls.append(cm[i, i] / total)
            brute = sum(recalls) / c
            worst[0] = max(worst[0], abs(ev.balanced_accuracy(cm) - brute))
        assert worst[0] <= 1e-12
        for _ in range(100):
            c, per = int(r.integers(2, 20)), int(r.integers(1, 30))
            y = np.repeat(np.arange(c), per)
            p = r.integers(0, c, y.size)
            assert abs(ev.balanced_accuracy(ev.confusion_matrix(y, p, c))
                       - ev.top1_accuracy(p, y)) <= 1e-12
        assert ev.ci_halfwidth(0.1, 100) == pytest.approx(0.0196, rel=0, abs=1e-15)


# --------------------------------------------------------------- 8

@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    t0 = time.perf_counter()
    run = run_experiment(load_config(CONFIGS / "benchmark.cfg"), tmp_path_factory.mktemp("bench"))
    return run, time.perf_counter() - t0


def ba(run, series, group):
    return run.reports[series].value("balanced_accuracy", group)


def test_c08a_flifw_rare_gain(benchmark):
    run, secs = benchmark
    flifw, base = ba(run, "flifw", "rare"), ba(run, "baseline", "rare")
    with criterion("8(a) FL/IFW rare BA >= baseline + 0.05",
                   lambda: f"flifw {flifw:.4f} vs baseline {base:.4f}"):
        assert flifw >= base + 0.05
        assert secs < 600


def test_c08b_prior_correction_gain(benchmark):
    run, _ = benchmark
    prior, base = ba(run, "prior", "all"), ba(run, "baseline", "all")
    with criterion("8(b) prior correction raises all-class BA",
                   lambda: f"prior {prior:.4f} vs baseline {base:.4f}"):
        assert prior > base


def test_c08c_routed_ensemble_beats_members(benchmark):
    run, _ = benchmark
    ensemble = ba(run, "four_model", "all")
    members = {m: ba(run, m, "all") for m in ("proto", "upsampling", "biifw", "flifw")}
    with criterion("8(c) routed ensemble BA >= each member",
                   lambda: f"four_model {ensemble:.4f} vs "
                   + ", ".join(f"{m} {v:.4f}" for m, v in members.items())):
        best = max(members.values())
        assert ensemble >= best


def test_c08d_upsampling_common_gain(benchmark):
    run, _ = benchmark
    up, base = ba(run, "upsampling", "common"), ba(run, "baseline", "common")
    with criterion("8(d) upsampling raises common BA",
                   lambda: f"upsampling {up:.4f} vs baseline {base:.4f}"):
        assert up > base


# --------------------------------------------------------------- 9

def test_c09_standard_eval_sanity():
    res = {}
    with criterion("9 standard 5-way 5-shot", lambda: ", ".join(f"{k} {v:.4f}"
                                                                for k, v in res.items())):
        t0 = time.perf_counter()
        ds = D.generate_synthetic(D.SyntheticSpec(spread=0.15), 9)
        train, val, test = D.standard_class_pools(ds, 15)
        spec = D.EpisodeSpec(5, 5, 10)
        model = fsl.meta_train(fsl.FslConfig("proto"), ds, train, val, seed=1)
        rep = ev.run_standard_eval(model, ds, test, spec, episodes=600, seed=2)
        rng = np.random.default_rng(3)

        def uniform(sx, sy, n, qx):
            return rng.integers(0, n, len(qx))
        rnd = ev.run_standard_eval(uniform, ds, test, spec, episodes=600, seed=2)
        half = rnd.ci_halfwidth[("top1_accuracy", "all")]
        res.update(proto=rep.top1_accuracy, uniform=rnd.top1_accuracy, uniform_ci=half)
        assert rep.E == rnd.E == 600
        assert rep.top1_accuracy >= 0.80
        assert abs(rnd.top1_accuracy - 0.20) <= half
        assert time.perf_counter() - t0 < 300


# --------------------------------------------------------------- 10

def test_c10_demo_determinism(tmp_path):
    with criterion("10 demo determinism"):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert cli.main(["run", "--config", str(CONFIGS / "demo.cfg"), "--out", str(out),
                             "-q"]) == 0
            outs.append((out / "metrics.csv").read_bytes())
        assert outs[0] == outs[1] and len(outs[0]) > 0
