import shutil
import subprocess
import sys
from importlib.resources import files

import numpy as np
import pytest

from ltfsl import cli, evaluation as ev, pipeline as P
from ltfsl.config import load_config, parse_config
from ltfsl.errors import InvalidArgument, OutputLocked, StageError

DEMO = str(files("ltfsl") / "configs" / "demo.cfg")


def run_cli(*args):
    return cli.main(list(args) + ["-q"])


@pytest.fixture(scope="module")
def demo_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo")
    assert run_cli("run", "--config", DEMO, "--out", str(out)) == 0
    return out


def test_demo_outputs(demo_run):
    for rel in ("data.csv", "dev.csv", "test.csv", "registry.txt", "metrics.csv", "report.json",
                "models/flifw-r0.txt", "models/proto-r0.txt", "models/standard-proto-r0.txt",
                "plots/grouped_bars.csv", "plots/per_class_recall.csv"):
        assert (demo_run / rel).is_file(), rel
    assert not (demo_run / P.STAGING_NAME).exists()
    assert not (demo_run / P.LOCK_NAME).exists()
    lines = (demo_run / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(P.METRICS_HEADER)
    series = {ln.split(",")[0] for ln in lines[1:]}
    assert series == {"flifw", "proto", "proto_flifw", "standard/proto"}
    assert (demo_run / "data.csv").read_text().startswith("id,label,timestamp,dim=16\n")
    run = P.RunReport.from_json((demo_run / "report.json").read_text())
    assert P.metrics_csv(run) == (demo_run / "metrics.csv").read_text()
    assert sum(run.routes["proto_flifw"].values()) == len(
        (demo_run / "test.csv").read_text().splitlines()) - 1


def test_demo_byte_identical_in_fresh_dir(demo_run, tmp_path):
    assert run_cli("run", "--config", DEMO, "--out", str(tmp_path)) == 0
    for rel in ("metrics.csv", "models/flifw-r0.txt", "models/proto-r0.txt",
                "plots/grouped_bars.csv", "data.csv"):
        assert (tmp_path / rel).read_bytes() == (demo_run / rel).read_bytes(), rel


def test_cache_hits_on_rerun(demo_run, tmp_path):
    out = tmp_path / "o"
    shutil.copytree(demo_run, out)
    before = (out / "metrics.csv").read_bytes()
    msgs = []
    P.run_experiment(load_config(DEMO), out, log=msgs.append)
    assert sum(m.startswith("cache hit") for m in msgs) == 3
    assert (out / "metrics.csv").read_bytes() == before


def test_cache_invalidated_by_section_change(demo_run, tmp_path):
    out = tmp_path / "o"
    shutil.copytree(demo_run, out)
    text = open(DEMO).read().replace("csl.flifw.steps=600", "csl.flifw.steps=50")
    msgs = []
    P.run_experiment(parse_config(text), out, log=msgs.append)
    hits = [m for m in msgs if m.startswith("cache hit")]
    assert len(hits) == 2 and not any("flifw" in m for m in hits)


def test_seed_override_changes_results(demo_run, tmp_path):
    assert run_cli("train-csl", "--config", DEMO, "--out", str(tmp_path), "--seed", "4") == 0
    assert (tmp_path / "data.csv").read_bytes() != (demo_run / "data.csv").read_bytes()


@pytest.mark.parametrize("command, present, absent", [
    ("synth", ["data.csv"], ["dev.csv", "metrics.csv"]),
    ("split", ["dev.csv", "test.csv", "registry.txt"], ["models", "metrics.csv"]),
    ("train-csl", ["models/flifw-r0.txt"], ["models/proto-r0.txt", "metrics.csv"]),
    ("meta-train", ["models/proto-r0.txt"], ["models/flifw-r0.txt", "metrics.csv"]),
    ("eval-standard", ["metrics.csv", "models/standard-proto-r0.txt"], ["dev.csv"]),
    ("eval-realworld", ["metrics.csv", "plots/grouped_bars.csv"], []),
    ("ensemble", ["metrics.csv"], []),
])
def test_each_subcommand(command, present, absent, tmp_path):
    assert run_cli(command, "--config", DEMO, "--out", str(tmp_path), "--threads", "2") == 0
    for rel in present:
        assert (tmp_path / rel).exists(), rel
    for rel in absent:
        assert not (tmp_path / rel).exists(), rel
    if command in ("eval-realworld", "ensemble"):
        series = {ln.split(",")[0] for ln in (tmp_path / "metrics.csv").read_text().splitlines()[1:]}
        assert ("proto_flifw" in series) == (command == "ensemble")
        assert "standard/proto" not in series
    if command == "eval-standard":
        series = {ln.split(",")[0] for ln in (tmp_path / "metrics.csv").read_text().splitlines()[1:]}
        assert series == {"standard/proto"}


def test_report_subcommand(demo_run, tmp_path):
    out = tmp_path / "o"
    shutil.copytree(demo_run, out)
    (out / "metrics.csv").unlink()
    shutil.rmtree(out / "plots")
    assert run_cli("report", "--out", str(out)) == 0
    assert (out / "metrics.csv").read_bytes() == (demo_run / "metrics.csv").read_bytes()
    assert (out / "plots/grouped_bars.csv").read_bytes() == \
        (demo_run / "plots/grouped_bars.csv").read_bytes()
    assert run_cli("report", "--out", str(tmp_path / "empty")) == 3


def test_exit_code_config_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("experiment.seed=1\nexperiment.colour=blue\n")
    assert run_cli("run", "--config", str(bad), "--out", str(tmp_path / "o")) == 2
    assert run_cli("run", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)) == 2
    assert run_cli("run", "--config", DEMO, "--out", str(tmp_path), "--threads", "0") == 2
    assert not (tmp_path / "o").exists()


def test_exit_code_runtime_error_and_cleanup(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"data.source=csv\ndata.path={tmp_path / 'nope.csv'}\n"
                   "csl.a.techniques=none\n")
    out = tmp_path / "o"
    assert run_cli("run", "--config", str(cfg), "--out", str(out)) == 3
    assert sorted(p.name for p in out.iterdir()) == []


def test_failure_mid_pipeline_leaves_no_partial_files(tmp_path):
    # standard pools are infeasible for 20-way episodes, so eval-standard fails late
    text = open(DEMO).read() + "standard.n_way=20\n"
    with pytest.raises(StageError) as info:
        P.run_experiment(parse_config(text), tmp_path)
    assert info.value.stage == "eval-standard"
    assert list(tmp_path.iterdir()) == []


def test_locked_directory(tmp_path):
    (tmp_path / P.LOCK_NAME).write_text("123\n")
    assert run_cli("synth", "--config", DEMO, "--out", str(tmp_path)) == 3
    with pytest.raises(OutputLocked):
        P.run_experiment(load_config(DEMO), tmp_path, ("synth",))
    assert (tmp_path / P.LOCK_NAME).exists()


def test_csv_source_round_trip(demo_run, tmp_path):
    text = open(DEMO).read().replace("data.source=synthetic",
                                     f"data.source=csv\ndata.path={demo_run / 'data.csv'}")
    P.run_experiment(parse_config(text), tmp_path)
    a = (tmp_path / "metrics.csv").read_text().splitlines()
    b = (demo_run / "metrics.csv").read_text().splitlines()
    assert a == b


def test_console_script_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-c", "import sys; from ltfsl.cli import main; "
                          "sys.exit(main(sys.argv[1:]))", "synth", "--config", DEMO,
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0 and "data:" in res.stderr
    assert (tmp_path / "data.csv").exists()


def test_stage_seed_streams():
    assert P.stage_seed(7, "csl", 0) == P.stage_seed(7, "csl", 0)
    seeds = {P.stage_seed(7, s, i) for s in ("data", "csl", "fsl") for i in range(3)}
    assert len(seeds) == 9


# ------------------------------------------------------------ plot data

def _report(ba, ci=0.01):
    groups = {"all": ba, "common": ba + 0.1, "rare": ba - 0.1}
    return ev.MetricReport(ba, ba, groups["common"], groups["rare"], {"x": ba, "y": 1.0}, E=5,
                           ci_halfwidth={("balanced_accuracy", g): ci for g in groups})


def test_grouped_bars():
    reps = {"a": _report(0.5), "b": _report(0.6, 0.02), "c": _report(0.7)}
    text = P.emit_plot_data(reps, "grouped-bars")
    rows = P.parse_plot_csv(text)
    assert text.splitlines()[0] == "series,group,value,ci_halfwidth"
    assert len(rows) == 9
    assert ("b", "rare", 0.5, 0.02) in rows
    got = {(s, g): v for s, g, v, _ in rows}
    for s, rep in reps.items():
        for g in ("common", "rare", "all"):
            assert got[(s, g)] == rep.value("balanced_accuracy", g)


def test_per_class_recall_plot():
    rows = P.parse_plot_csv(P.emit_plot_data({"a": _report(0.5)}, "per-class-recall"))
    assert rows == [("a", "x", 0.5, None), ("a", "y", 1.0, None)]


def test_plot_errors():
    with pytest.raises(InvalidArgument):
        P.emit_plot_data({"a": _report(0.5)}, "pie")
    with pytest.raises(InvalidArgument):
        P.emit_plot_data({"a": ev.MetricReport(0.5, 0.5)}, "grouped-bars")
    with pytest.raises(InvalidArgument):
        P.parse_plot_csv("a,b\n")


def test_run_report_json_round_trip():
    run = P.RunReport("h")
    run.add("s", "csl", _report(0.5), [1])
    run.routes["e"] = {"x": 3}
    back = P.RunReport.from_json(run.to_json())
    assert P.metrics_csv(back) == P.metrics_csv(run) and back.routes == run.routes
    assert np.isclose(back.reports["s"].balanced_accuracy_rare, 0.4)
