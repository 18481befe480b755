"""Conventional all-class training with class-imbalance techniques.

Techniques (combine freely, except ``focal`` replaces plain CE):

* ``upsampling`` - class-uniform batch sampling
* ``bias_init`` - head biases start at log class counts
* ``ifw`` - inverse-frequency loss weights
* ``focal`` - focal loss; with ``ifw`` its alpha vector is the IFW weights
* ``prior_correction`` - inference only, divides probabilities by priors
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ltfsl import numerics as nx
from ltfsl.data import ClassRegistry, Dataset
from ltfsl.errors import InvalidArgument, TrainingDiverged
from ltfsl.evaluation import balanced_accuracy, confusion_matrix

TECHNIQUES = ("upsampling", "bias_init", "ifw", "focal", "prior_correction")
TRAINING_TECHNIQUES = TECHNIQUES[:4]


def _counts_vector(train: Dataset, registry: ClassRegistry):
    y = registry.encode(train.labels)
    return np.bincount(y, minlength=registry.n_classes).astype(np.float64)


def class_priors(train: Dataset, registry: ClassRegistry) -> np.ndarray:
    """Maximum-likelihood class priors; classes absent from ``train`` get 0."""
    if len(train) == 0:
        raise InvalidArgument("training set is empty")
    counts = _counts_vector(train, registry)
    return counts / counts.sum()


def ifw_weights(train: Dataset, registry: ClassRegistry) -> np.ndarray:
    """Weights proportional to ``1/count``, scaled to sum to the class count."""
    counts = _counts_vector(train, registry)
    if np.any(counts == 0):
        missing = registry.classes[int(np.argmin(counts))]
        raise InvalidArgument(f"class {missing!r} has no training examples")
    inv = 1.0 / counts
    return inv * (counts.size / inv.sum())


def bias_init(head: nx.MlpParams, train: Dataset, registry: ClassRegistry) -> nx.MlpParams:
    """Set the output-layer bias to ``log(count_c)``; weights are untouched."""
    counts = _counts_vector(train, registry)
    if head.out_dim != counts.size:
        raise InvalidArgument(f"head has {head.out_dim} outputs for {counts.size} classes")
    if np.any(counts == 0):
        raise InvalidArgument("bias init needs every class present in training data")
    biases = head.biases[:-1] + (np.log(counts),)
    return nx.MlpParams(head.weights, biases)


class BatchSampler:
    """Draws index batches with replacement.

    ``upsampling=True`` picks a class uniformly per slot, then an example
    within it; otherwise examples are uniform over the whole set.
    """

    def __init__(self, y, batch_size, rng, upsampling=False):
        if batch_size < 1:
            raise InvalidArgument("batch size must be >= 1")
        self.y = np.asarray(y, dtype=np.intp)
        self.batch_size = int(batch_size)
        self.rng = rng
        self.upsampling = upsampling
        self._groups = [np.flatnonzero(self.y == c) for c in np.unique(self.y)]
        self._sizes = np.array([g.size for g in self._groups])

    def draw(self):
        if not self.upsampling:
            return self.rng.integers(0, self.y.size, size=self.batch_size)
        cls = self.rng.integers(0, len(self._groups), size=self.batch_size)
        within = np.floor(self.rng.random(self.batch_size) * self._sizes[cls]).astype(np.intp)
        return np.array([self._groups[c][w] for c, w in zip(cls, within)], dtype=np.intp)

    def __iter__(self):
        while True:
            yield self.draw()


def make_batch_sampler(train: Dataset, registry: ClassRegistry, technique, batch_size, rng):
    up = technique == "upsampling" or (not isinstance(technique, str) and "upsampling" in technique)
    return BatchSampler(registry.encode(train.labels), batch_size, rng, upsampling=up)


@dataclass(frozen=True)
class CslConfig:
    techniques: frozenset = frozenset()
    gamma: float = 2.0
    steps: int = 5000
    batch_size: int = 64
    hidden: tuple = (64, 64)
    lr: float = 1e-3
    decay_factor: float = 0.95
    decay_every: int = 1000
    eval_every: int = 100
    patience: int = 10

    def __post_init__(self):
        techs = frozenset(self.techniques)
        unknown = techs - set(TECHNIQUES)
        if unknown:
            raise InvalidArgument(f"unknown CSL technique(s): {sorted(unknown)}")
        object.__setattr__(self, "techniques", techs)
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1 or self.patience < 1:
            raise InvalidArgument("steps >= 0, batch_size/eval_every/patience >= 1 required")
        nx.FocalConfig(self.gamma)

    def training_key(self):
        """Fields that influence training (prior correction is inference-only)."""
        techs = ",".join(sorted(self.techniques & set(TRAINING_TECHNIQUES)))
        gamma = self.gamma if "focal" in self.techniques else None
        return (f"csl|{techs}|{gamma}|{self.steps}|{self.batch_size}|{self.hidden}|{self.lr}|"
                f"{self.decay_factor}|{self.decay_every}|{self.eval_every}|{self.patience}")


@dataclass(frozen=True)
class CslModel:
    params: nx.MlpParams
    classes: tuple
    priors: np.ndarray
    registry_hash: str = ""
    prior_correction: bool = False
    loss_history: tuple = field(default=(), compare=False, repr=False)
    best_step: int = 0

    @property
    def n_classes(self):
        return len(self.classes)


def prior_correct(probs, priors) -> np.ndarray:
    """``probs / priors`` renormalized; works row-wise on batches."""
    probs = np.asarray(probs, dtype=np.float64)
    priors = np.asarray(priors, dtype=np.float64)
    if probs.shape[-1] != priors.shape[-1]:
        raise InvalidArgument("probs and priors must have equal length")
    used = np.any(probs.reshape(-1, priors.size) > 0, axis=0)
    if np.any((priors <= 0) & used):
        raise InvalidArgument("zero prior for a class with positive probability")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(priors > 0, probs / np.where(priors > 0, priors, 1.0), 0.0)
    return ratio / ratio.sum(axis=-1, keepdims=True)


def predict_csl(model: CslModel, x, prior_correction=None) -> nx.ModelOutput:
    """Logits and probabilities over all classes for ``x`` (vector or batch)."""
    x = np.asarray(x, dtype=np.float64)
    logits = nx.mlp_apply(model.params, x)
    out = nx.ModelOutput.from_logits(logits)
    use_pc = model.prior_correction if prior_correction is None else prior_correction
    if not use_pc:
        return out
    probs = prior_correct(out.probs, model.priors)
    return nx.ModelOutput(np.log(np.maximum(probs, 1e-300)), probs)


def _val_balanced_accuracy(params, val_x, val_y, n_classes, present):
    preds = np.argmax(nx.mlp_apply(params, val_x), axis=1)
    return balanced_accuracy(confusion_matrix(val_y, preds, n_classes), present)


def csl_loss(config: CslConfig, train: Dataset, registry: ClassRegistry) -> nx.ClassifierLoss:
    techs = config.techniques
    alpha = ifw_weights(train, registry) if "ifw" in techs else None
    if "focal" in techs:
        return nx.ClassifierLoss("focal", alpha=alpha, gamma=config.gamma)
    return nx.ClassifierLoss("ce", alpha=alpha)


def train_csl(train: Dataset, val: Dataset, registry: ClassRegistry, config: CslConfig,
              seed) -> CslModel:
    """Adam training with early stopping on validation balanced accuracy."""
    y = registry.encode(train.labels)
    if np.unique(y).size < 2:
        raise InvalidArgument("training data must cover at least two classes")
    ss = np.random.SeedSequence(seed)
    init_ss, batch_ss = ss.spawn(2)
    sizes = (train.dim,) + tuple(config.hidden) + (registry.n_classes,)
    params = nx.init_mlp(sizes, np.random.default_rng(init_ss))
    if "bias_init" in config.techniques:
        params = bias_init(params, train, registry)
    loss_fn = csl_loss(config, train, registry)
    sampler = make_batch_sampler(train, registry, config.techniques, config.batch_size,
                                 np.random.default_rng(batch_ss))
    opt = nx.OptimizerState("adam", config.lr, config.decay_factor, config.decay_every)

    val_y = registry.encode(val.labels) if len(val) else np.zeros(0, dtype=np.intp)
    present = sorted(set(val_y.tolist()))
    best, best_score, best_step, bad = params, -1.0, 0, 0
    history = []
    x = train.features
    for step in range(1, config.steps + 1):
        idx = sampler.draw()
        loss, grads = loss_fn.value_and_grad(params, (x[idx], y[idx]))
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss)
        history.append(loss)
        params, opt = nx.optimizer_step(opt, params, grads)
        if present and (step % config.eval_every == 0 or step == config.steps):
            score = _val_balanced_accuracy(params, val.features, val_y, registry.n_classes, present)
            if score > best_score:
                best, best_score, best_step, bad = params, score, step, 0
            else:
                bad += 1
                if bad >= config.patience:
                    break
    if not present:
        best, best_step = params, len(history)
    return CslModel(best, registry.classes, class_priors(train, registry), registry.digest(),
                    "prior_correction" in config.techniques, tuple(history), best_step)


def with_prior_correction(model: CslModel, enabled=True) -> CslModel:
    return replace(model, prior_correction=enabled)
