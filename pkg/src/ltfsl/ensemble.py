"""Geometric-mean ensembling and common/rare routing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ltfsl import kernels
from ltfsl import numerics as nx
from ltfsl.data import COMMON, RARE
from ltfsl.errors import InvalidArgument, NumericalError

PROB_FLOOR = 1e-300
ROUTE_CSL, ROUTE_FSL, ROUTE_NONE = "common->CSL", "rare->FSL", "no-routing"


def normalize_logits(f) -> np.ndarray:
    """``f - logsumexp(f)`` (row-wise for batches); softmax is unchanged."""
    f = np.asarray(f, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise InvalidArgument("logits must be finite")
    if f.ndim == 1:
        return kernels.log_softmax_rows(f[None, :])[0]
    return kernels.log_softmax_rows(f)


def ensemble_logits(members) -> np.ndarray:
    """Mean of LogSumExp-normalized member logits."""
    members = [np.asarray(m, dtype=np.float64) for m in members]
    if not members:
        raise InvalidArgument("ensemble needs at least one member")
    if any(m.shape != members[0].shape for m in members):
        raise InvalidArgument("member logits have different shapes")
    return sum(normalize_logits(m) for m in members) / len(members)


def ensemble_probs_geomean(members) -> np.ndarray:
    """Per-class geometric mean of member probabilities, renormalized.

    Each factor is raised to ``1/M`` before multiplying so the product
    stays above the clamp floor.
    """
    members = [np.asarray(m, dtype=np.float64) for m in members]
    if not members:
        raise InvalidArgument("ensemble needs at least one member")
    if any(m.shape != members[0].shape for m in members):
        raise InvalidArgument("member probabilities have different shapes")
    inv = 1.0 / len(members)
    raw = np.ones_like(members[0])
    for p in members:
        raw = raw * np.maximum(p, PROB_FLOOR) ** inv
    total = raw.sum(axis=-1, keepdims=True)
    if not np.all(np.isfinite(raw)) or np.any(total <= 0):
        raise NumericalError("geometric mean collapsed to zero")
    return raw / total


def combine(outputs) -> nx.ModelOutput:
    """Ensemble a list of ModelOutputs through their normalized logits."""
    logits = ensemble_logits([o.logits for o in outputs])
    return nx.ModelOutput.from_logits(logits)


@dataclass(frozen=True)
class EnsembleMember:
    name: str
    kind: str  # "csl" or "fsl"
    predictor: object  # feature batch -> ModelOutput over all classes

    def __post_init__(self):
        if self.kind not in ("csl", "fsl"):
            raise InvalidArgument(f"member kind must be 'csl' or 'fsl', got {self.kind!r}")


@dataclass(frozen=True)
class EnsembleSpec:
    members: tuple
    routing: bool = False

    def __post_init__(self):
        if not self.members:
            raise InvalidArgument("ensemble needs at least one member")
        kinds = {m.kind for m in self.members}
        if self.routing and kinds != {"csl", "fsl"}:
            raise InvalidArgument("routing needs at least one CSL and one FSL member")

    def family(self, kind):
        return [m for m in self.members if m.kind == kind]


@dataclass(frozen=True)
class RoutedPrediction:
    label: int
    ensemble: nx.ModelOutput
    csl_label: int | None
    fsl_label: int | None
    route: str


def route_prediction(ensemble_out, csl_out, fsl_out, registry, routing=True) -> RoutedPrediction:
    """Take the CSL label for a common ensemble argmax, the FSL label for a rare one."""
    n = registry.n_classes
    for o in (ensemble_out, csl_out, fsl_out):
        if o is not None and np.asarray(o.probs).shape[-1] != n:
            raise InvalidArgument("model outputs do not match the registry class count")
    top = ensemble_out.label
    csl_label = csl_out.label if csl_out is not None else None
    fsl_label = fsl_out.label if fsl_out is not None else None
    if not routing:
        return RoutedPrediction(top, ensemble_out, csl_label, fsl_label, ROUTE_NONE)
    group = registry.groups[registry.classes[top]]
    if group == COMMON:
        return RoutedPrediction(csl_label, ensemble_out, csl_label, fsl_label, ROUTE_CSL)
    if group == RARE:
        return RoutedPrediction(fsl_label, ensemble_out, csl_label, fsl_label, ROUTE_FSL)
    raise InvalidArgument(f"class {registry.classes[top]!r} has no routing group")


class EnsemblePredictor:
    """Batched ensemble over ``spec.members``; callable on a feature batch.

    With routing, each family's prediction is its own sub-ensemble.
    ``last_routes`` records the route taken for every row of the latest call.
    """

    def __init__(self, spec: EnsembleSpec, registry):
        self.spec = spec
        self.registry = registry
        self.last_routes = None

    def outputs(self, x):
        return {m.name: m.predictor(x) for m in self.spec.members}

    def __call__(self, x):
        outs = self.outputs(x)
        full = combine([outs[m.name] for m in self.spec.members])
        if not self.spec.routing:
            self.last_routes = np.full(full.labels.shape, ROUTE_NONE, dtype=object)
            return full
        csl = combine([outs[m.name] for m in self.spec.family("csl")]).labels
        fsl = combine([outs[m.name] for m in self.spec.family("fsl")]).labels
        top = full.labels
        common = self.registry.is_common[top]
        labels = np.where(common, csl, fsl)
        self.last_routes = np.where(common, ROUTE_CSL, ROUTE_FSL).astype(object)
        return labels
