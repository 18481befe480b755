"""Experiment configuration: flat ``key=value`` text with dotted keys.

Global keys live under ``experiment.``, ``data.``, ``split.``,
``registry.`` and ``standard.``. Models are declared in named sections::

    csl.flifw.techniques=focal,ifw
    fsl.proto.method=proto
    fsl.proto.hidden=
    ensemble.mix.members=proto,flifw
    ensemble.mix.routing=true

Blank lines and ``#`` comments are ignored. Unknown keys, duplicate keys
and malformed values are rejected with the offending line number.
"""
from __future__ import annotations

import dataclasses
import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

from ltfsl.csl import TECHNIQUES, CslConfig
from ltfsl.data import SyntheticSpec, Thresholds
from ltfsl.errors import ConfigError, InvalidArgument
from ltfsl.fsl import FslConfig

_NAME_RE = re.compile(r"^[A-Za-z][A-Za-z0-9_]*$")


# --------------------------------------------------------- value parsers

def _int(raw):
    return int(raw)


def _float(raw):
    return float(raw)


def _bool(raw):
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _ints(raw):
    return tuple(int(t) for t in raw.split(",") if t.strip()) if raw.strip() else ()


def _words(raw):
    return tuple(t.strip() for t in raw.split(",") if t.strip())


def _str(raw):
    if not raw:
        raise ValueError("empty value")
    return raw


def _shots(raw):
    if raw.lower() == "all":
        return None
    n = int(raw)
    if n < 1:
        raise ValueError("shots must be >= 1 or 'all'")
    return n


def _techniques(raw):
    if raw.strip().lower() in ("", "none", "baseline"):
        return frozenset()
    return frozenset(_words(raw))


GLOBAL_KEYS = {
    "experiment.seed": (_int, 0),
    "experiment.runs": (_int, 1),
    "experiment.threads": (_int, 1),
    "data.source": (_str, "synthetic"),
    "data.path": (_str, None),
    "data.classes": (_int, 50),
    "data.dim": (_int, 16),
    "data.zipf": (_float, 1.2),
    "data.max_count": (_int, 900),
    "data.spread": (_float, 0.35),
    "data.noise": (_float, 0.0),
    "split.dev_fraction": (_float, 0.75),
    "split.val_fraction": (_float, 0.1),
    "split.min_train_per_class": (_int, 10),
    "registry.common_min_dev": (_int, 100),
    "registry.rare_min_dev": (_int, 20),
    "registry.rare_min_test": (_int, 5),
    "standard.enabled": (_bool, False),
    "standard.episodes": (_int, 600),
    "standard.n_way": (_int, 5),
    "standard.k_shot": (_int, 5),
    "standard.q_query": (_int, 10),
}

_CSL_FIELDS = {
    "techniques": _techniques, "gamma": _float, "steps": _int, "batch_size": _int,
    "hidden": _ints, "lr": _float, "decay_factor": _float, "decay_every": _int,
    "eval_every": _int, "patience": _int,
}


def _fsl_parsers():
    out = {}
    for f in dataclasses.fields(FslConfig):
        ref = f.default
        out[f.name] = _str if isinstance(ref, str) else _ints if isinstance(ref, tuple) \
            else _int if isinstance(ref, int) else _float
    out["support_shots"] = _shots
    return out


_FSL_FIELDS = _fsl_parsers()
_ENSEMBLE_FIELDS = {"members": _words, "routing": _bool}
SECTIONS = {"csl": _CSL_FIELDS, "fsl": _FSL_FIELDS, "ensemble": _ENSEMBLE_FIELDS}


# ------------------------------------------------------------ config types

@dataclass(frozen=True)
class FslEntry:
    config: FslConfig
    support_shots: int | None = None  # None means every dev example


@dataclass(frozen=True)
class EnsembleEntry:
    members: tuple
    routing: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    runs: int = 1
    threads: int = 1
    data_source: str = "synthetic"
    data_path: str | None = None
    synthetic: SyntheticSpec = SyntheticSpec()
    dev_fraction: float = 0.75
    val_fraction: float = 0.1
    min_train_per_class: int = 10
    thresholds: Thresholds = Thresholds()
    standard: dict = field(default_factory=dict)
    csl: dict = field(default_factory=dict)
    fsl: dict = field(default_factory=dict)
    ensembles: dict = field(default_factory=dict)
    items: tuple = ()  # normalized (key, raw value) pairs, sorted

    def section_text(self, *prefixes):
        """Canonical text of every item whose key starts with one of ``prefixes``."""
        return "\n".join(f"{k}={v}" for k, v in self.items
                         if any(k == p or k.startswith(p + ".") for p in prefixes))

    def section_hash(self, *prefixes):
        return hashlib.sha256(self.section_text(*prefixes).encode()).hexdigest()[:16]

    @property
    def config_hash(self):
        text = "\n".join(f"{k}={v}" for k, v in self.items)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def with_seed(self, seed):
        items = tuple(sorted({**dict(self.items), "experiment.seed": str(int(seed))}.items()))
        return dataclasses.replace(self, seed=int(seed), items=items)

    def member_kind(self, name):
        if name in self.csl:
            return "csl"
        if name in self.fsl:
            return "fsl"
        raise InvalidArgument(f"no model named {name!r}")


# ----------------------------------------------------------------- parsing

def _split_lines(text):
    seen = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, val = stripped.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} (first on line {seen[key][0]})")
        seen[key] = (lineno, val)
    return seen


def _convert(parser, key, lineno, raw):
    try:
        return parser(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None


def parse_config(text) -> ExperimentConfig:
    entries = _split_lines(text)
    glob = {k: default for k, (_, default) in GLOBAL_KEYS.items()}
    sections = {kind: {} for kind in SECTIONS}
    for key, (lineno, raw) in entries.items():
        if key in GLOBAL_KEYS:
            glob[key] = _convert(GLOBAL_KEYS[key][0], key, lineno, raw)
            continue
        parts = key.split(".")
        if len(parts) != 3 or parts[0] not in SECTIONS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kind, name, fname = parts
        if not _NAME_RE.match(name):
            raise ConfigError(f"line {lineno}: bad section name {name!r}")
        fields = SECTIONS[kind]
        if fname not in fields:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        sections[kind].setdefault(name, {})[fname] = _convert(fields[fname], key, lineno, raw)

    names = [n for kind in SECTIONS for n in sections[kind]]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ConfigError(f"section name {dupes[0]!r} used by more than one model kind")
    items = tuple(sorted((k, v) for k, (_, v) in entries.items()))
    try:
        return _build(glob, sections, items)
    except ConfigError:
        raise
    except InvalidArgument as exc:
        raise ConfigError(str(exc)) from None


def _build(glob, sections, items):
    if glob["data.source"] not in ("synthetic", "csv"):
        raise ConfigError(f"data.source must be 'synthetic' or 'csv', got {glob['data.source']!r}")
    if glob["data.source"] == "csv" and not glob["data.path"]:
        raise ConfigError("data.source=csv needs data.path")
    if glob["experiment.runs"] < 1 or glob["experiment.threads"] < 1:
        raise ConfigError("experiment.runs and experiment.threads must be >= 1")
    if not 0 < glob["split.dev_fraction"] < 1 or not 0 <= glob["split.val_fraction"] < 1:
        raise ConfigError("split fractions must lie in (0, 1)")
    spec = SyntheticSpec(glob["data.classes"], glob["data.dim"], glob["data.zipf"],
                         glob["data.max_count"], glob["data.spread"], glob["data.noise"])
    if glob["data.source"] == "synthetic":
        spec.validate()

    csl = {}
    for name, kw in sections["csl"].items():
        if "techniques" not in kw:
            raise ConfigError(f"csl.{name}.techniques is required (use 'none' for the baseline)")
        unknown = kw["techniques"] - set(TECHNIQUES)
        if unknown:
            raise ConfigError(f"csl.{name}.techniques: unknown technique {sorted(unknown)[0]!r}")
        csl[name] = CslConfig(**kw)
    fsl = {}
    for name, kw in sections["fsl"].items():
        if "method" not in kw:
            raise ConfigError(f"fsl.{name}.method is required")
        kw = dict(kw)
        shots = kw.pop("support_shots", None)
        fsl[name] = FslEntry(FslConfig(**kw), shots)
    ensembles = {}
    for name, kw in sections["ensemble"].items():
        members = kw.get("members", ())
        if not members:
            raise ConfigError(f"ensemble.{name}.members must list at least one model")
        for m in members:
            if m not in csl and m not in fsl:
                raise ConfigError(f"ensemble.{name}.members: no model named {m!r}")
        routing = kw.get("routing", False)
        if routing and not (any(m in csl for m in members) and any(m in fsl for m in members)):
            raise ConfigError(f"ensemble.{name}: routing needs both a CSL and an FSL member")
        ensembles[name] = EnsembleEntry(tuple(members), routing)

    standard = {k.split(".", 1)[1]: glob[k] for k in GLOBAL_KEYS if k.startswith("standard.")}
    if standard["enabled"] and not fsl:
        raise ConfigError("standard.enabled needs at least one fsl.* model")
    return ExperimentConfig(
        seed=glob["experiment.seed"], runs=glob["experiment.runs"],
        threads=glob["experiment.threads"], data_source=glob["data.source"],
        data_path=glob["data.path"], synthetic=spec,
        dev_fraction=glob["split.dev_fraction"], val_fraction=glob["split.val_fraction"],
        min_train_per_class=glob["split.min_train_per_class"],
        thresholds=Thresholds(glob["registry.common_min_dev"], glob["registry.rare_min_dev"],
                              glob["registry.rare_min_test"]),
        standard=standard, csl=csl, fsl=fsl, ensembles=ensembles, items=items)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return parse_config(text)
