import numpy as np
import pytest

from ltfsl import data as D


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_dataset(labels, features, timestamps=None, ids=None):
    n = len(labels)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    ids = np.arange(n) if ids is None else ids
    timestamps = np.arange(n) if timestamps is None else timestamps
    return D.Dataset(ids, list(labels), timestamps, features)


def blobs(centres, per_class, spread, rng, names=None):
    """Gaussian blobs, one per centre; labels default to c0, c1, ..."""
    centres = np.asarray(centres, dtype=np.float64)
    if np.isscalar(per_class):
        per_class = [per_class] * len(centres)
    names = names or [f"c{i}" for i in range(len(centres))]
    labels, feats = [], []
    for c, n in enumerate(per_class):
        feats.append(centres[c] + spread * rng.standard_normal((n, centres.shape[1])))
        labels += [names[c]] * n
    feats = np.concatenate(feats)
    return make_dataset(labels, feats, timestamps=rng.permutation(len(labels)))


# one line per acceptance criterion, shown after the test run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
