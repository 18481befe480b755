"""Config-driven experiment runner.

Seeds: every random draw descends from ``experiment.seed`` through
:func:`stage_seed` with a named stream and an index:

=================  =====  ============================================
stream             index  used for
=================  =====  ============================================
``data``           0      synthetic dataset
``csl``            run    CSL init and batch order (shared by all CSL
                          models of a run, so techniques are compared
                          from the same start)
``fsl``            run    episodic / batch FSL training
``support.NAME``   run    capped all-way support sets
``standard``       run    FSL training on the standard class pools
``episodes``       run    standard evaluation episodes
=================  =====  ============================================

Outputs are written to a staging directory and moved into place only
when every requested stage succeeded, so a failed run leaves no partial
files behind. Trained models are cached in ``models/`` with a key
derived from the config sections they depend on.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import shutil
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ltfsl import __version__, csl as csl_mod, data as D, ensemble as en, evaluation as ev
from ltfsl import fsl as fsl_mod, kernels, serialize
from ltfsl.config import ExperimentConfig
from ltfsl.errors import InvalidArgument, LtfslError, OutputLocked, StageError

STAGES = ("synth", "split", "train-csl", "meta-train", "eval-standard", "eval-realworld",
          "ensemble", "report")
LOCK_NAME = ".ltfsl.lock"
STAGING_NAME = ".partial"
METRICS_HEADER = ("series", "metric", "group", "value", "ci_halfwidth", "E")
PLOT_HEADER = ("series", "group", "value", "ci_halfwidth")
PLOT_KINDS = ("grouped-bars", "per-class-recall")

# which stages each CLI command runs
COMMAND_STAGES = {
    "synth": ("synth",),
    "split": ("synth", "split"),
    "train-csl": ("synth", "split", "train-csl"),
    "meta-train": ("synth", "split", "meta-train"),
    "eval-standard": ("synth", "eval-standard"),
    "eval-realworld": ("synth", "split", "train-csl", "meta-train", "eval-realworld"),
    "ensemble": ("synth", "split", "train-csl", "meta-train", "eval-realworld", "ensemble"),
    "report": ("report",),
    "run": STAGES,
}


def stage_seed(master, stream, index=0) -> int:
    ss = np.random.SeedSequence([int(master), zlib.crc32(stream.encode()), int(index)])
    return int(ss.generate_state(1, np.uint32)[0])


# ------------------------------------------------------------ run report

@dataclass
class RunReport:
    config_hash: str
    reports: dict = field(default_factory=dict)   # series -> MetricReport
    kinds: dict = field(default_factory=dict)     # series -> csl|fsl|ensemble|standard
    seeds: dict = field(default_factory=dict)     # series -> per-run seeds
    routes: dict = field(default_factory=dict)    # ensemble -> {route: count}
    wall_clock: float = 0.0

    def add(self, series, kind, report, seeds):
        self.reports[series] = report
        self.kinds[series] = kind
        self.seeds[series] = list(seeds)

    def realworld_series(self):
        return [s for s in self.reports if self.kinds[s] != "standard"]

    def to_json(self):
        return json.dumps({
            "config_hash": self.config_hash,
            "version": __version__,
            "backend": kernels.BACKEND,
            "wall_clock_s": self.wall_clock,
            "series": [{"name": s, "kind": self.kinds[s], "seeds": self.seeds[s],
                        "report": self.reports[s].to_dict()} for s in self.reports],
            "routes": self.routes,
        }, indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        rr = cls(doc["config_hash"], routes=doc.get("routes", {}),
                 wall_clock=doc.get("wall_clock_s", 0.0))
        for entry in doc["series"]:
            rr.add(entry["name"], entry["kind"], report_from_dict(entry["report"]), entry["seeds"])
        return rr


def report_from_dict(d) -> ev.MetricReport:
    ci = {}
    for key, val in d.get("ci_halfwidth", {}).items():
        metric, group = key.split("/", 1)
        ci[(metric, group)] = val
    return ev.MetricReport(d["top1_accuracy"], d["balanced_accuracy_all"],
                           d["balanced_accuracy_common"], d["balanced_accuracy_rare"],
                           dict(d["per_class_recall"]), d["E"], ci)


def metrics_csv(run: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for series, report in run.reports.items():
        for metric, group, val, ci, e in report.rows():
            w.writerow([series, metric, group, ev.fmt_float(val), ev.fmt_float(ci), e])
    return buf.getvalue()


def emit_plot_data(reports, kind) -> str:
    """Tidy ``series,group,value,ci_halfwidth`` CSV from ``{series: MetricReport}``.

    ``grouped-bars`` has one row per series and group (common, rare, all)
    holding balanced accuracy; ``per-class-recall`` one row per series and
    class.
    """
    if kind not in PLOT_KINDS:
        raise InvalidArgument(f"unknown plot kind {kind!r}")
    if isinstance(reports, RunReport):
        reports = {s: reports.reports[s] for s in reports.realworld_series()}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PLOT_HEADER)
    for series, rep in reports.items():
        if kind == "grouped-bars":
            for group in ("common", "rare", "all"):
                val = rep.value("balanced_accuracy", group)
                if val is None:
                    raise InvalidArgument(f"{series}: no balanced accuracy for group {group!r}")
                ci = rep.ci_halfwidth.get(("balanced_accuracy", group))
                w.writerow([series, group, ev.fmt_float(val), ev.fmt_float(ci)])
        else:
            if not rep.per_class_recall:
                raise InvalidArgument(f"{series}: no per-class recall")
            for label, val in rep.per_class_recall.items():
                ci = rep.ci_halfwidth.get(("recall", label))
                w.writerow([series, label, ev.fmt_float(val), ev.fmt_float(ci)])
    return buf.getvalue()


def parse_plot_csv(text):
    """Inverse of :func:`emit_plot_data`: list of ``(series, group, value, ci)``."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != PLOT_HEADER:
        raise InvalidArgument("not a plot CSV")
    return [(s, g, float(v), float(c) if c else None) for s, g, v, c in rows[1:]]


# ---------------------------------------------------------- directory IO

class OutputLock:
    """Exclusive ownership of an output directory via an O_EXCL lock file."""

    def __init__(self, out_dir):
        self.path = Path(out_dir) / LOCK_NAME
        self._fd = None

    def __enter__(self):
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise OutputLocked(f"output directory is locked ({self.path}); "
                               "remove the lock file if no other run is active") from None
        os.write(self._fd, f"{os.getpid()}\n".encode())
        return self

    def __exit__(self, *exc):
        os.close(self._fd)
        self.path.unlink(missing_ok=True)
        return False


def _commit(staging: Path, out: Path):
    for src in sorted(staging.rglob("*")):
        if src.is_file():
            dst = out / src.relative_to(staging)
            dst.parent.mkdir(parents=True, exist_ok=True)
            os.replace(src, dst)
    shutil.rmtree(staging)


# ---------------------------------------------------------------- runner

class _Runner:
    def __init__(self, config: ExperimentConfig, out: Path, staging: Path, threads, log):
        self.cfg = config
        self.out = out
        self.staging = staging
        self.threads = threads or config.threads
        self.log = log or (lambda msg: None)
        self.run = RunReport(config.config_hash)
        self.ds = self.dev = self.test = self.registry = None
        self.train = self.val = None
        self.csl_models = {}   # (name, r) -> CslModel
        self.fsl_models = {}   # (name, r) -> MetaModel
        self.predictors = {}   # (name, r) -> callable on feature batches
        self._trained = {}     # cache key -> model, dedupes identical trainings

    # -- helpers
    def write(self, rel, text):
        path = self.staging / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        return path

    def _base_key(self):
        return self.cfg.section_hash("experiment.seed", "data", "split", "registry")

    def _cached(self, rel, key, loader, trainer, saver):
        """Reuse ``out/rel`` when its cache key matches, else train and stage it."""
        if key in self._trained:
            model = self._trained[key]
        else:
            model = None
            existing = self.out / rel
            if serialize.read_cache_key(existing) == key:
                model, _ = loader(existing)
                self.log(f"cache hit {rel}")
            if model is None:
                model = trainer()
            self._trained[key] = model
        target = self.staging / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        saver(model, target, key)
        return model

    # -- stages
    def synth(self):
        cfg = self.cfg
        if cfg.data_source == "csv":
            self.ds = D.ingest_csv(cfg.data_path)
        else:
            self.ds = D.generate_synthetic(cfg.synthetic, stage_seed(cfg.seed, "data"))
            buf = self.staging / "data.csv"
            D.export_csv(self.ds, buf)
        self.log(f"data: {len(self.ds)} examples, {len(self.ds.label_set)} classes")

    def split(self):
        cfg = self.cfg
        dev, test = D.temporal_split(self.ds, cfg.dev_fraction)
        self.registry, self.dev, self.test = D.build_class_registry(dev, test, cfg.thresholds)
        if cfg.val_fraction > 0:
            self.train, self.val = D.stratified_train_val_split(
                self.dev, cfg.val_fraction, cfg.min_train_per_class)
        else:
            self.train, self.val = self.dev, self.dev.take(np.zeros(0, dtype=np.intp))
        D.export_csv(self.dev, self.staging / "dev.csv")
        D.export_csv(self.test, self.staging / "test.csv")
        self.write("registry.txt", self.registry.to_text())
        reg = self.registry
        self.log(f"registry: {reg.n_classes} classes "
                 f"({len(reg.group_indices(D.COMMON))} common, {len(reg.group_indices(D.RARE))} rare)")

    def train_csl(self):
        for r in range(self.cfg.runs):
            seed = stage_seed(self.cfg.seed, "csl", r)
            for name, ccfg in self.cfg.csl.items():
                key = hashlib.sha256(
                    f"{self._base_key()}|{ccfg.training_key()}|{seed}"
                    f"|{self.registry.digest()}".encode()).hexdigest()[:16]
                pc = "prior_correction" in ccfg.techniques
                model = self._cached(
                    f"models/{name}-r{r}.txt", key, serialize.load_csl,
                    lambda: csl_mod.train_csl(self.train, self.val, self.registry, ccfg, seed),
                    lambda m, p, k: serialize.save_csl(csl_mod.with_prior_correction(m, pc), p, k))
                model = csl_mod.with_prior_correction(model, pc)
                self.csl_models[(name, r)] = model
                self.predictors[(name, r)] = lambda x, m=model: csl_mod.predict_csl(m, x)
                self.log(f"csl {name} run {r}: best step {model.best_step}")

    def meta_train(self):
        train_pool, val_pool = D.realworld_class_pools(self.registry)
        for r in range(self.cfg.runs):
            seed = stage_seed(self.cfg.seed, "fsl", r)
            for name, entry in self.cfg.fsl.items():
                fcfg = entry.config
                spec = fcfg.episode_spec()
                need = spec.k_shot + spec.q_query
                pool = D.feasible_classes(self.dev, train_pool, need)
                if fcfg.method in fsl_mod.BATCH_METHODS:
                    pool = list(train_pool)
                key = hashlib.sha256(
                    f"{self._base_key()}|{fcfg.training_key()}|{seed}"
                    f"|{self.registry.digest()}".encode()).hexdigest()[:16]
                model = self._cached(
                    f"models/{name}-r{r}.txt", key, serialize.load_meta,
                    lambda: fsl_mod.train_fsl(fcfg, self.dev, pool, val_pool, seed),
                    lambda m, p, k: serialize.save_meta(m, p, k))
                self.fsl_models[(name, r)] = model
                if entry.support_shots is None:
                    support = D.build_support_set(self.dev, self.registry)
                else:
                    rng = np.random.default_rng(stage_seed(self.cfg.seed, f"support.{name}", r))
                    support = D.build_support_set(self.dev, self.registry, entry.support_shots, rng)
                self.predictors[(name, r)] = fsl_mod.fsl_all_way_predictor(
                    model, support, self.registry)
                self.log(f"fsl {name} run {r}: best step {model.best_step}")

    def eval_standard(self):
        st = self.cfg.standard
        if not st["enabled"]:
            self.log("standard evaluation disabled")
            return
        eval_spec = D.EpisodeSpec(st["n_way"], st["k_shot"], st["q_query"])
        for name, entry in self.cfg.fsl.items():
            fcfg = entry.config
            spec = fcfg.episode_spec()
            need = max(spec.k_shot + spec.q_query, eval_spec.k_shot + eval_spec.q_query)
            train_pool, val_pool, test_pool = D.standard_class_pools(self.ds, need)
            reports, seeds = [], []
            for r in range(self.cfg.runs):
                seed = stage_seed(self.cfg.seed, "standard", r)
                key = hashlib.sha256(
                    f"{self.cfg.section_hash('experiment.seed', 'data')}|std|{fcfg.training_key()}"
                    f"|{seed}|{need}".encode()).hexdigest()[:16]
                model = self._cached(
                    f"models/standard-{name}-r{r}.txt", key, serialize.load_meta,
                    lambda: fsl_mod.train_fsl(fcfg, self.ds, train_pool, val_pool, seed),
                    lambda m, p, k: serialize.save_meta(m, p, k))
                ep_seed = stage_seed(self.cfg.seed, "episodes", r)
                reports.append(ev.run_standard_eval(model, self.ds, test_pool, eval_spec,
                                                    st["episodes"], ep_seed, self.threads))
                seeds.append([seed, ep_seed])
            rep = reports[0] if len(reports) == 1 else _aggregate_standard(reports)
            self.run.add(f"standard/{name}", "standard", rep, seeds)
            self.log(f"standard {name}: {rep.top1_accuracy:.4f}")

    def eval_realworld(self):
        for name in list(self.cfg.csl) + list(self.cfg.fsl):
            kind = "csl" if name in self.cfg.csl else "fsl"
            reports = [ev.run_realworld_eval(self.predictors[(name, r)], self.test, self.registry)
                       for r in range(self.cfg.runs)]
            seeds = [stage_seed(self.cfg.seed, kind, r) for r in range(self.cfg.runs)]
            rep = ev.aggregate_reports(reports)
            self.run.add(name, kind, rep, seeds)
            self.log(f"{name}: BA {rep.balanced_accuracy_all:.4f}")

    def ensemble(self):
        for name, entry in self.cfg.ensembles.items():
            reports, routes = [], {}
            for r in range(self.cfg.runs):
                members = tuple(en.EnsembleMember(m, self.cfg.member_kind(m), self.predictors[(m, r)])
                                for m in entry.members)
                pred = en.EnsemblePredictor(en.EnsembleSpec(members, entry.routing), self.registry)
                reports.append(ev.run_realworld_eval(pred, self.test, self.registry))
                for route in pred.last_routes:
                    routes[route] = routes.get(route, 0) + 1
            seeds = sorted({s for m in entry.members for s in self.run.seeds.get(m, [])})
            rep = ev.aggregate_reports(reports)
            self.run.add(name, "ensemble", rep, seeds)
            self.run.routes[name] = dict(sorted(routes.items()))
            self.log(f"{name}: BA {rep.balanced_accuracy_all:.4f}")

    def report(self):
        if not self.run.reports:
            src = self.out / "report.json"
            if not src.exists():
                raise InvalidArgument(f"no results to report: {src} does not exist")
            self.run = RunReport.from_json(src.read_text(encoding="utf-8"))

    def finish(self, wrote_results):
        if not wrote_results:
            return
        self.write("metrics.csv", metrics_csv(self.run))
        self.write("report.json", self.run.to_json())
        realworld = {s: self.run.reports[s] for s in self.run.realworld_series()}
        if realworld:
            self.write("plots/grouped_bars.csv", emit_plot_data(realworld, "grouped-bars"))
            self.write("plots/per_class_recall.csv", emit_plot_data(realworld, "per-class-recall"))


def _aggregate_standard(reports):
    mean, half = ev.confidence_interval([r.top1_accuracy for r in reports])
    ci = {("top1_accuracy", "all"): half, ("balanced_accuracy", "all"): half}
    return ev.MetricReport(mean, mean, E=len(reports), ci_halfwidth=ci)


_RESULT_STAGES = ("eval-standard", "eval-realworld", "ensemble", "report")


def run_experiment(config: ExperimentConfig, out_dir, stages=STAGES, threads=None,
                   log=None) -> RunReport:
    """Run ``stages`` in pipeline order and write their outputs under ``out_dir``."""
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise InvalidArgument(f"unknown stage(s): {sorted(unknown)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    with OutputLock(out):
        staging = out / STAGING_NAME
        if staging.exists():
            shutil.rmtree(staging)
        staging.mkdir()
        runner = _Runner(config, out, staging, threads, log)
        current = "setup"
        try:
            for stage in STAGES:
                if stage in stages:
                    current = stage
                    getattr(runner, stage.replace("-", "_"))()
            current = "report"
            runner.run.wall_clock = round(time.perf_counter() - t0, 3)
            runner.finish(any(s in stages for s in _RESULT_STAGES))
        except BaseException as exc:
            shutil.rmtree(staging, ignore_errors=True)
            if isinstance(exc, (LtfslError, ValueError, ArithmeticError, OSError, KeyError)):
                raise StageError(current, exc) from exc
            raise
        _commit(staging, out)
    return runner.run
