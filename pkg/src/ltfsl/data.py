"""Labeled embedding datasets, split protocols, class grouping and episodes."""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ltfsl.errors import EpisodeInfeasible, InvalidArgument, ParseError

OTHER = "Other"
COMMON, RARE, ABSORBED = "common", "rare", "other"
ALL = None  # shots_per_class value meaning "take every example"

_LABEL_RE = re.compile(r"^[A-Za-z0-9_ -]+$")


@dataclass(frozen=True)
class FeatureExample:
    id: int
    label: str
    timestamp: int
    features: np.ndarray


class Dataset:
    """Immutable column store of :class:`FeatureExample` rows."""

    def __init__(self, ids, labels, timestamps, features):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=object)
        self.timestamps = np.asarray(timestamps, dtype=np.int64)
        feats = np.asarray(features, dtype=np.float64)
        n = self.ids.shape[0]
        if feats.ndim != 2 or feats.shape[0] != n:
            if n == 0:
                feats = feats.reshape(0, feats.shape[-1] if feats.ndim == 2 else 0)
            else:
                raise InvalidArgument(f"features must be (n, D); got {feats.shape}")
        if not (self.labels.shape == self.timestamps.shape == (n,)):
            raise InvalidArgument("column lengths disagree")
        if np.unique(self.ids).size != n:
            raise InvalidArgument("example ids must be unique")
        if not np.all(np.isfinite(feats)):
            raise InvalidArgument("features must be finite")
        self.features = feats
        for arr in (self.ids, self.labels, self.timestamps, self.features):
            arr.setflags(write=False)

    @classmethod
    def from_examples(cls, examples: Iterable[FeatureExample], dim=None):
        examples = list(examples)
        if not examples:
            return cls([], [], [], np.zeros((0, dim or 0)))
        return cls([e.id for e in examples], [e.label for e in examples],
                   [e.timestamp for e in examples],
                   np.stack([np.asarray(e.features, dtype=np.float64) for e in examples]))

    def __len__(self):
        return self.ids.shape[0]

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i):
        return FeatureExample(int(self.ids[i]), str(self.labels[i]),
                              int(self.timestamps[i]), self.features[i])

    @property
    def dim(self):
        return self.features.shape[1]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.ids[idx], self.labels[idx], self.timestamps[idx], self.features[idx])

    def relabel(self, mapping: dict) -> "Dataset":
        labels = [mapping.get(lab, lab) for lab in self.labels]
        return Dataset(self.ids, labels, self.timestamps, self.features)

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(np.concatenate([self.ids, other.ids]),
                       np.concatenate([self.labels, other.labels]),
                       np.concatenate([self.timestamps, other.timestamps]),
                       np.concatenate([self.features, other.features]))

    @cached_property
    def class_indices(self) -> dict:
        """Label -> row indices (in dataset order)."""
        out = {}
        for i, lab in enumerate(self.labels):
            out.setdefault(lab, []).append(i)
        return {k: np.asarray(v, dtype=np.intp) for k, v in out.items()}

    @property
    def label_set(self):
        return sorted(self.class_indices)

    def class_counts(self) -> dict:
        return {k: len(v) for k, v in sorted(self.class_indices.items())}

    def restrict(self, classes) -> "Dataset":
        keep = set(classes)
        return self.take([i for i, lab in enumerate(self.labels) if lab in keep])

    def field_equal(self, other: "Dataset") -> bool:
        return (np.array_equal(self.ids, other.ids)
                and list(self.labels) == list(other.labels)
                and np.array_equal(self.timestamps, other.timestamps)
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features))


# ------------------------------------------------------------------ CSV I/O

def ingest_csv(path) -> Dataset:
    """Parse the ``id,label,timestamp,dim=D`` CSV format."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ParseError(1, "empty file")
    head = lines[0].strip().split(",")
    m = re.fullmatch(r"dim=(\d+)", head[-1]) if len(head) == 4 else None
    if not m or head[:3] != ["id", "label", "timestamp"]:
        raise ParseError(1, "header must be 'id,label,timestamp,dim=D'")
    dim = int(m.group(1))
    if dim < 1:
        raise ParseError(1, "dimension must be >= 1")
    ids, labels, stamps, feats = [], [], [], []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3 + dim:
            raise ParseError(lineno, f"expected {3 + dim} fields, got {len(parts)}")
        try:
            ex_id = int(parts[0])
            stamp = int(parts[2])
            vec = [float(p) for p in parts[3:]]
        except ValueError as exc:
            raise ParseError(lineno, str(exc)) from None
        label = parts[1]
        if not _LABEL_RE.match(label):
            raise ParseError(lineno, f"invalid label {label!r}")
        if ex_id in seen:
            raise ParseError(lineno, f"duplicate id {ex_id}")
        if not all(math.isfinite(v) for v in vec):
            raise ParseError(lineno, "non-finite feature value")
        seen.add(ex_id)
        ids.append(ex_id)
        labels.append(label)
        stamps.append(stamp)
        feats.append(vec)
    return Dataset(ids, labels, stamps, np.asarray(feats, dtype=np.float64).reshape(len(ids), dim))


def export_csv(ds: Dataset, path) -> None:
    rows = [f"id,label,timestamp,dim={ds.dim}"]
    for i in range(len(ds)):
        vals = ",".join(repr(float(v)) for v in ds.features[i])
        rows.append(f"{ds.ids[i]},{ds.labels[i]},{ds.timestamps[i]},{vals}")
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


# ------------------------------------------------------- synthetic generator

@dataclass(frozen=True)
class SyntheticSpec:
    """Zipf long-tail benchmark parameters.

    ``noise`` is the probability that an example is drawn around a
    different, randomly chosen class mean while keeping its own label.
    """
    classes: int = 50
    dim: int = 16
    zipf: float = 1.2
    max_count: int = 900
    spread: float = 0.35
    noise: float = 0.0

    def validate(self):
        if self.classes < 3:
            raise InvalidArgument("need at least 3 classes")
        if self.dim < 2:
            raise InvalidArgument("need at least 2 dimensions")
        if not self.zipf > 0:
            raise InvalidArgument("zipf exponent must be > 0")
        if not self.spread > 0:
            raise InvalidArgument("cluster spread must be > 0")
        if self.max_count < 1:
            raise InvalidArgument("max_count must be >= 1")
        if not 0 <= self.noise < 1:
            raise InvalidArgument("noise must lie in [0, 1)")


def zipf_counts(classes, max_count, zipf):
    return [int(math.ceil(max_count * r ** (-zipf) - 1e-9)) for r in range(1, classes + 1)]


def class_name(rank):
    return f"c{rank:03d}"


def generate_synthetic(spec: SyntheticSpec, seed) -> Dataset:
    """Gaussian clusters around unit-sphere means with Zipf class sizes."""
    spec.validate()
    rng = np.random.default_rng(seed)
    counts = zipf_counts(spec.classes, spec.max_count, spec.zipf)
    means = rng.standard_normal((spec.classes, spec.dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    labels, feats = [], []
    for c, n in enumerate(counts):
        centre = np.repeat(means[c][None, :], n, axis=0)
        if spec.noise > 0:
            swap = rng.random(n) < spec.noise
            others = rng.integers(0, spec.classes - 1, size=n)
            others[others >= c] += 1
            centre[swap] = means[others[swap]]
        feats.append(centre + spec.spread * rng.standard_normal((n, spec.dim)))
        labels.extend([class_name(c + 1)] * n)
    total = len(labels)
    stamps = rng.permutation(total)
    return Dataset(np.arange(total), labels, stamps, np.concatenate(feats))


# ------------------------------------------------------------------ splits

def temporal_split(ds: Dataset, dev_fraction=0.75):
    """Earliest ``ceil(fraction * n)`` examples (by timestamp, then id) form dev."""
    if not 0 < dev_fraction < 1:
        raise InvalidArgument("dev_fraction must lie in (0, 1)")
    order = np.lexsort((ds.ids, ds.timestamps))
    cut = int(math.ceil(dev_fraction * len(ds) - 1e-9))
    return ds.take(order[:cut]), ds.take(order[cut:])


def stratified_train_val_split(dev: Dataset, val_fraction=0.1, min_train_per_class=10, rng=None):
    """Per-class split; classes too small to spare a validation example stay in train.

    Without an ``rng`` the latest examples of each class (by timestamp) go
    to validation, which keeps the split deterministic.
    """
    if not 0 < val_fraction < 1:
        raise InvalidArgument("val_fraction must lie in (0, 1)")
    train_idx, val_idx = [], []
    for label, idx in sorted(dev.class_indices.items()):
        n = len(idx)
        if n < min_train_per_class + 1:
            train_idx.extend(idx)
            continue
        n_val = max(1, int(math.ceil(val_fraction * n - 1e-9)))
        n_val = min(n_val, n - min_train_per_class)
        if rng is None:
            order = idx[np.lexsort((dev.ids[idx], dev.timestamps[idx]))]
        else:
            order = idx[rng.permutation(n)]
        train_idx.extend(order[: n - n_val])
        val_idx.extend(order[n - n_val:])
    return dev.take(np.sort(train_idx)), dev.take(np.sort(val_idx))


# ---------------------------------------------------------- class registry

@dataclass(frozen=True)
class Thresholds:
    common_dev: int = 100
    rare_dev: int = 20
    rare_test: int = 5


@dataclass(frozen=True)
class ClassRegistry:
    """Ordered class catalog; index order is descending dev count, then label."""
    classes: tuple
    groups: dict
    dev_counts: dict
    test_counts: dict
    absorbed: tuple = ()
    other_label: str = OTHER
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "index", {c: i for i, c in enumerate(self.classes)})
        if set(self.groups) != set(self.classes):
            raise InvalidArgument("every registry class needs a group")

    @property
    def n_classes(self):
        return len(self.classes)

    def group_of(self, label):
        return self.groups[label]

    def group_indices(self, group):
        return [i for i, c in enumerate(self.classes) if self.groups[c] == group]

    @cached_property
    def is_common(self):
        return np.array([self.groups[c] == COMMON for c in self.classes])

    def encode(self, labels) -> np.ndarray:
        try:
            return np.array([self.index[lab] for lab in labels], dtype=np.intp)
        except KeyError as exc:
            raise InvalidArgument(f"label {exc.args[0]!r} not in registry") from None

    def absorb(self, ds: Dataset) -> Dataset:
        return ds.relabel({lab: self.other_label for lab in self.absorbed})

    def to_text(self):
        lines = [f"other={self.other_label}"]
        for c in self.classes:
            lines.append(f"{c},{self.groups[c]},{self.dev_counts[c]},{self.test_counts[c]}")
        lines.append("absorbed=" + "|".join(self.absorbed))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = text.splitlines()
        other = lines[0].split("=", 1)[1]
        absorbed = lines[-1].split("=", 1)[1]
        classes, groups, dev, test = [], {}, {}, {}
        for line in lines[1:-1]:
            name, group, d, t = line.split(",")
            classes.append(name)
            groups[name], dev[name], test[name] = group, int(d), int(t)
        return cls(tuple(classes), groups, dev, test,
                   tuple(absorbed.split("|")) if absorbed else (), other)

    def digest(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def build_class_registry(dev: Dataset, test: Dataset, thresholds: Thresholds = Thresholds()):
    """Group classes into common / rare and absorb the rest into ``Other``.

    Returns ``(registry, dev', test')`` where the datasets carry the
    absorbed labels. ``Other`` counts as a common class.
    """
    dev_counts, test_counts = dev.class_counts(), test.class_counts()
    vocab = sorted(set(dev_counts) | set(test_counts))
    if not vocab:
        raise InvalidArgument("empty class vocabulary")
    groups, absorbed = {}, []
    for c in vocab:
        d, t = dev_counts.get(c, 0), test_counts.get(c, 0)
        if d > thresholds.common_dev:
            groups[c] = COMMON
        elif d > thresholds.rare_dev and t > thresholds.rare_test:
            groups[c] = RARE
        else:
            absorbed.append(c)
    other = OTHER
    while other in groups:
        other = "_" + other
    dcounts = {c: dev_counts.get(c, 0) for c in groups}
    tcounts = {c: test_counts.get(c, 0) for c in groups}
    if absorbed:
        groups[other] = COMMON
        dcounts[other] = sum(dev_counts.get(c, 0) for c in absorbed)
        tcounts[other] = sum(test_counts.get(c, 0) for c in absorbed)
    classes = tuple(sorted(groups, key=lambda c: (-dcounts[c], c)))
    reg = ClassRegistry(classes, groups, dcounts, tcounts, tuple(absorbed), other)
    return reg, reg.absorb(dev), reg.absorb(test)


# --------------------------------------------------------------- episodes

@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 5
    q_query: int = 10

    def __post_init__(self):
        if self.n_way < 2 or self.k_shot < 1 or self.q_query < 1:
            raise InvalidArgument(f"invalid episode spec {self}")


@dataclass(frozen=True)
class Episode:
    """Support and query rows of ``source`` plus their episode-local labels."""
    source: Dataset
    classes: tuple
    support_idx: np.ndarray
    support_y: np.ndarray
    query_idx: np.ndarray
    query_y: np.ndarray

    @property
    def support_x(self):
        return self.source.features[self.support_idx]

    @property
    def query_x(self):
        return self.source.features[self.query_idx]

    @property
    def support(self):
        return [(self.source[i], int(y)) for i, y in zip(self.support_idx, self.support_y)]

    @property
    def query(self):
        return [(self.source[i], int(y)) for i, y in zip(self.query_idx, self.query_y)]

    @property
    def n_way(self):
        return len(self.classes)


def feasible_classes(ds: Dataset, classes, min_examples):
    counts = ds.class_counts()
    return [c for c in classes if counts.get(c, 0) >= min_examples]


def sample_episode(source: Dataset, spec: EpisodeSpec, class_pool: Sequence[str],
                   rng: np.random.Generator) -> Episode:
    """Uniform N-way-k-shot episode with ``q`` disjoint query rows per class."""
    pool = list(class_pool)
    need = spec.k_shot + spec.q_query
    counts = source.class_counts()
    short = [c for c in pool if counts.get(c, 0) < need]
    if short:
        raise EpisodeInfeasible(
            f"{len(short)} pool classes have fewer than {need} examples (e.g. {short[0]!r})")
    if len(pool) < spec.n_way:
        raise EpisodeInfeasible(
            f"pool has {len(pool)} classes, episode needs {spec.n_way}")
    chosen = rng.choice(len(pool), size=spec.n_way, replace=False)
    classes = tuple(pool[i] for i in chosen)
    s_idx, s_y, q_idx, q_y = [], [], [], []
    for local, c in enumerate(classes):
        rows = source.class_indices[c]
        pick = rows[rng.choice(rows.size, size=need, replace=False)]
        s_idx.append(pick[: spec.k_shot])
        q_idx.append(pick[spec.k_shot:])
        s_y.append(np.full(spec.k_shot, local))
        q_y.append(np.full(spec.q_query, local))
    return Episode(source, classes, np.concatenate(s_idx), np.concatenate(s_y).astype(np.intp),
                   np.concatenate(q_idx), np.concatenate(q_y).astype(np.intp))


def build_support_set(dev: Dataset, registry: ClassRegistry, shots_per_class=ALL, rng=None) -> Dataset:
    """Per registry class, up to ``shots_per_class`` dev examples (``ALL`` = every one)."""
    present = dev.class_indices
    missing = [c for c in registry.classes if c not in present]
    if missing:
        raise InvalidArgument(f"registry class {missing[0]!r} missing from development set")
    if shots_per_class is ALL:
        return dev
    if rng is None:
        raise InvalidArgument("sampling a capped support set needs an rng")
    idx = []
    for c in registry.classes:
        rows = present[c]
        take = min(int(shots_per_class), rows.size)
        idx.extend(rows[rng.choice(rows.size, size=take, replace=False)])
    return dev.take(np.sort(idx))


# ------------------------------------------------------------ class pools

def realworld_class_pools(registry: ClassRegistry):
    """Disjoint (train, val) class pools for episodic training on dev data.

    Common classes train. Rare classes alternate train/val in descending
    dev-count order.
    """
    common = [c for c in registry.classes if registry.groups[c] == COMMON]
    rare = sorted((c for c in registry.classes if registry.groups[c] == RARE),
                  key=lambda c: (-registry.dev_counts[c], c))
    train = common + rare[0::2]
    val = rare[1::2]
    return train, val


def standard_class_pools(ds: Dataset, min_examples, fractions=(0.6, 0.2, 0.2)):
    """Pairwise disjoint (train, val, test) class pools over eligible classes.

    Eligible classes are dealt round-robin in descending count order using a
    repeating pattern drawn from ``fractions`` so each pool keeps a mix of
    large and small classes.
    """
    counts = ds.class_counts()
    eligible = sorted((c for c in counts if counts[c] >= min_examples),
                      key=lambda c: (-counts[c], c))
    weights = np.asarray(fractions, dtype=np.float64)
    if weights.shape != (3,) or np.any(weights <= 0):
        raise InvalidArgument("fractions must be three positive numbers")
    weights /= weights.sum()
    pools = ([], [], [])
    for c in eligible:
        deficit = [weights[i] * (sum(map(len, pools)) + 1) - len(pools[i]) for i in range(3)]
        pools[int(np.argmax(deficit))].append(c)
    return pools
