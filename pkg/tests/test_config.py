import pytest

from ltfsl.config import GLOBAL_KEYS, load_config, parse_config
from ltfsl.errors import ConfigError

BASE = """
# a comment
experiment.seed=4
csl.base.techniques=none
csl.fl.techniques=focal, ifw
csl.fl.gamma=1.5
fsl.p.method=proto
fsl.p.hidden=
fsl.p.support_shots=10
ensemble.mix.members=p,fl
ensemble.mix.routing=true
"""


def test_parse_valid():
    cfg = parse_config(BASE)
    assert cfg.seed == 4 and cfg.runs == 1
    assert cfg.csl["base"].techniques == frozenset()
    assert cfg.csl["fl"].techniques == frozenset({"focal", "ifw"}) and cfg.csl["fl"].gamma == 1.5
    assert cfg.fsl["p"].config.hidden == () and cfg.fsl["p"].support_shots == 10
    assert cfg.ensembles["mix"].members == ("p", "fl") and cfg.ensembles["mix"].routing
    assert cfg.member_kind("p") == "fsl" and cfg.member_kind("fl") == "csl"
    assert cfg.standard["n_way"] == GLOBAL_KEYS["standard.n_way"][1]


def test_defaults_for_empty_text():
    cfg = parse_config("")
    assert cfg.csl == {} and cfg.fsl == {} and cfg.thresholds.common_dev == 100


def test_support_shots_all():
    assert parse_config("fsl.p.method=knn\nfsl.p.support_shots=ALL").fsl["p"].support_shots is None


@pytest.mark.parametrize("text, line, match", [
    ("experiment.seed=1\nexperiment.sed=2", 2, "unknown key"),
    ("csl.a.techniques=none\ncsl.a.colour=red", 2, "unknown key"),
    ("bogus=1", 1, "unknown key"),
    ("experiment.seed=1\nexperiment.seed=2", 2, "duplicate"),
    ("experiment.seed=abc", 1, "bad value"),
    ("standard.enabled=maybe", 1, "bad value"),
    ("no equals sign", 1, "key=value"),
    ("csl.9x.techniques=none", 1, "section name"),
    ("fsl.p.method=proto\nfsl.p.support_shots=0", 2, "bad value"),
])
def test_rejections_with_line_numbers(text, line, match):
    with pytest.raises(ConfigError, match=match) as info:
        parse_config(text)
    assert f"line {line}:" in str(info.value)


@pytest.mark.parametrize("text, match", [
    ("csl.a.gamma=2", "techniques is required"),
    ("csl.a.techniques=magic", "unknown technique"),
    ("fsl.p.hidden=4", "method is required"),
    ("fsl.p.method=svm", "method"),
    ("csl.a.techniques=none\nfsl.a.method=proto", "more than one"),
    ("csl.a.techniques=none\nensemble.e.members=a,zz", "no model"),
    ("csl.a.techniques=none\ncsl.b.techniques=none\nensemble.e.members=a,b\nensemble.e.routing=1",
     "routing"),
    ("ensemble.e.routing=0", "at least one"),
    ("data.source=csv", "data.path"),
    ("data.source=parquet", "data.source"),
    ("standard.enabled=true", "fsl"),
    ("experiment.runs=0", "runs"),
    ("split.dev_fraction=1.5", "fractions"),
    ("data.classes=0", None),
    ("csl.a.techniques=none\ncsl.a.steps=-1", None),
])
def test_semantic_rejections(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_hashes_and_seed_override():
    a = parse_config(BASE)
    b = parse_config(BASE.replace("csl.fl.gamma=1.5", "csl.fl.gamma=2"))
    assert a.section_hash("fsl") == b.section_hash("fsl")
    assert a.section_hash("csl.fl") != b.section_hash("csl.fl")
    assert a.section_hash("csl.base") == b.section_hash("csl.base")
    assert a.config_hash != b.config_hash
    # line order and comments do not matter
    shuffled = "\n".join(reversed([ln for ln in BASE.splitlines() if ln and ln[0] != "#"]))
    assert parse_config(shuffled).config_hash == a.config_hash
    c = a.with_seed(11)
    assert c.seed == 11 and dict(c.items)["experiment.seed"] == "11"
    assert c.config_hash != a.config_hash and c.csl == a.csl


def test_load_config(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.cfg")
    (tmp_path / "x.cfg").write_text(BASE)
    assert load_config(tmp_path / "x.cfg").seed == 4


def test_shipped_configs_parse():
    from importlib.resources import files
    for name in ("demo.cfg", "benchmark.cfg"):
        load_config(files("ltfsl") / "configs" / name)
