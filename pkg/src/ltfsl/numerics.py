"""Dense numerical core: MLP with hand-derived backprop, losses, optimizers.

All arrays are float64. Parameter containers are treated as immutable; every
update returns new arrays. A "parameter tree" is an :class:`MlpParams`, or a
dict / tuple nesting of them, which lets models hold several blocks
(embedder, head, relation module) under one optimizer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from ltfsl import kernels
from ltfsl.errors import InvalidArgument, NumericalError


def as_vector(v, name="v"):
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidArgument(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def _check_finite_nonempty(v, name="v"):
    if v.size == 0:
        raise InvalidArgument(f"{name} is empty")
    if not np.all(np.isfinite(v)):
        raise InvalidArgument(f"{name} contains non-finite values")


def logsumexp(v) -> float:
    """``log(sum(exp(v)))`` with a max shift so large inputs do not overflow."""
    v = as_vector(v)
    _check_finite_nonempty(v)
    return float(kernels.logsumexp_rows(v[None, :])[0])


def softmax(v) -> np.ndarray:
    v = as_vector(v)
    _check_finite_nonempty(v)
    return np.exp(kernels.log_softmax_rows(v[None, :])[0])


def softmax_rows(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return np.exp(kernels.log_softmax_rows(z))


def _check_label(label, n_classes):
    if not (0 <= int(label) < n_classes) or int(label) != label:
        raise InvalidArgument(f"label {label!r} out of range for {n_classes} classes")
    return int(label)


def alpha_ce_loss(logits, label, alpha) -> float:
    """``-alpha[label] * log softmax(logits)[label]``."""
    logits = as_vector(logits, "logits")
    _check_finite_nonempty(logits, "logits")
    alpha = as_vector(alpha, "alpha")
    if alpha.shape != logits.shape:
        raise InvalidArgument("alpha length must equal class count")
    label = _check_label(label, logits.size)
    lp = logits[label] - logsumexp(logits)
    return float(-alpha[label] * lp)


@dataclass(frozen=True)
class FocalConfig:
    gamma: float = 2.0
    alpha: np.ndarray | None = None

    def __post_init__(self):
        if not (self.gamma >= 0.0) or not math.isfinite(self.gamma):
            raise InvalidArgument(f"focal gamma must be >= 0, got {self.gamma}")
        if self.alpha is not None:
            a = as_vector(self.alpha, "alpha")
            if np.any(a < 0) or not np.all(np.isfinite(a)):
                raise InvalidArgument("focal alpha entries must be finite and >= 0")
            object.__setattr__(self, "alpha", a)

    def alpha_for(self, n_classes):
        if self.alpha is None:
            return np.ones(n_classes)
        if self.alpha.size != n_classes:
            raise InvalidArgument(
                f"alpha has {self.alpha.size} entries, expected {n_classes}")
        return self.alpha


def focal_loss(logits, label, cfg: FocalConfig) -> float:
    """``-alpha[y] (1 - p_y)^gamma log p_y`` at the true class ``y``.

    With ``gamma == 0`` this is exactly :func:`alpha_ce_loss`.
    """
    logits = as_vector(logits, "logits")
    _check_finite_nonempty(logits, "logits")
    alpha = cfg.alpha_for(logits.size)
    label = _check_label(label, logits.size)
    lp = logits[label] - logsumexp(logits)
    return float(-alpha[label] * (-math.expm1(lp)) ** cfg.gamma * lp)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between ``a`` and ``b``; 0 if either has zero norm."""
    a, b = as_vector(a, "a"), as_vector(b, "b")
    if a.shape != b.shape:
        raise InvalidArgument(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(kernels.cosine_matrix(a[None, :], b[None, :])[0, 0])


def sq_euclidean(a, b) -> float:
    a, b = as_vector(a, "a"), as_vector(b, "b")
    if a.shape != b.shape:
        raise InvalidArgument(f"dimension mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(d @ d)


# ---------------------------------------------------------------- MLP

@dataclass(frozen=True)
class MlpParams:
    """Weights ``W[l]`` of shape (in, out) and biases ``b[l]`` of shape (out,).

    Hidden layers use ReLU; the output layer is the identity.
    """
    weights: tuple
    biases: tuple

    def __post_init__(self):
        ws = tuple(np.asarray(w, dtype=np.float64) for w in self.weights)
        bs = tuple(np.asarray(b, dtype=np.float64) for b in self.biases)
        if len(ws) == 0 or len(ws) != len(bs):
            raise InvalidArgument("MlpParams needs matching non-empty weight/bias lists")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise InvalidArgument(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and ws[i - 1].shape[1] != w.shape[0]:
                raise InvalidArgument(f"layer {i} input {w.shape[0]} != previous output {ws[i-1].shape[1]}")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def sizes(self):
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def in_dim(self):
        return self.weights[0].shape[0]

    @property
    def out_dim(self):
        return self.weights[-1].shape[1]

    def leaves(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_leaves(self, leaves):
        leaves = list(leaves)
        return MlpParams(tuple(leaves[0::2]), tuple(leaves[1::2]))

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.leaves())


def init_mlp(sizes: Sequence[int], rng: np.random.Generator) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
        raise InvalidArgument(f"bad layer sizes {sizes}")
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return MlpParams(tuple(ws), tuple(bs))


def mlp_forward(params: MlpParams, x):
    """Forward a batch ``x`` (n, in). Returns ``(out, cache)`` for backprop."""
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != params.in_dim:
        raise InvalidArgument(f"input shape {h.shape} incompatible with in_dim {params.in_dim}")
    inputs = []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        a = h @ w + b
        h = np.maximum(a, 0.0) if i < last else a
    return h, inputs


def mlp_backward(params: MlpParams, cache, dout):
    """Backprop ``dout`` (n, out). Returns ``(grads, dx)``.

    Uses subgradient 0 for ReLU at exactly 0.
    """
    inputs = cache
    d = np.asarray(dout, dtype=np.float64)
    dws = [None] * len(params.weights)
    dbs = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        h = inputs[i]
        dws[i] = h.T @ d
        dbs[i] = d.sum(axis=0)
        d = d @ params.weights[i].T
        if i > 0:
            # inputs[i] is relu(pre-activation); positive iff pre-activation > 0
            d = d * (h > 0.0)
    return MlpParams(tuple(dws), tuple(dbs)), d


def mlp_apply(params: MlpParams, x) -> np.ndarray:
    """Deterministic forward pass for one vector (or a batch)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != params.in_dim:
            raise InvalidArgument(f"input dim {x.shape[0]} != {params.in_dim}")
        return mlp_forward(params, x[None, :])[0][0]
    return mlp_forward(params, x)[0]


# ---------------------------------------------------------- parameter trees

def tree_leaves(tree):
    if isinstance(tree, MlpParams):
        return tree.leaves()
    if isinstance(tree, dict):
        return [leaf for k in sorted(tree) for leaf in tree_leaves(tree[k])]
    if isinstance(tree, (tuple, list)):
        return [leaf for t in tree for leaf in tree_leaves(t)]
    if isinstance(tree, np.ndarray):
        return [tree]
    raise InvalidArgument(f"unsupported parameter tree node {type(tree).__name__}")


def tree_unflatten(tree, leaves):
    it = iter(leaves)

    def build(node):
        if isinstance(node, MlpParams):
            return node.with_leaves([next(it) for _ in range(2 * len(node.weights))])
        if isinstance(node, dict):
            return {k: build(node[k]) for k in sorted(node)}
        if isinstance(node, (tuple, list)):
            return type(node)(build(t) for t in node)
        return next(it)

    return build(tree)


def tree_map(fn, tree, *rest):
    leaves = tree_leaves(tree)
    others = [tree_leaves(r) for r in rest]
    for o in others:
        if len(o) != len(leaves) or any(a.shape != b.shape for a, b in zip(leaves, o)):
            raise InvalidArgument("parameter trees have different shapes")
    return tree_unflatten(tree, [fn(*xs) for xs in zip(leaves, *others)])


def tree_equal(a, b):
    la, lb = tree_leaves(a), tree_leaves(b)
    return len(la) == len(lb) and all(
        x.shape == y.shape and np.array_equal(x, y) for x, y in zip(la, lb))


# ----------------------------------------------------------------- losses

def batch_xent(logits, y, alpha=None):
    """Mean alpha-weighted CE over a batch; returns ``(loss, dlogits)``."""
    n, c = logits.shape
    alpha = np.ones(c) if alpha is None else np.asarray(alpha, dtype=np.float64)
    losses, dz = kernels.softmax_xent(logits, np.asarray(y, dtype=np.intp), alpha)
    return float(losses.sum() / n), dz / n


def batch_focal(logits, y, gamma, alpha=None):
    """Mean focal loss over a batch; returns ``(loss, dlogits)``."""
    n, c = logits.shape
    alpha = np.ones(c) if alpha is None else np.asarray(alpha, dtype=np.float64)
    losses, dz = kernels.focal_xent(logits, np.asarray(y, dtype=np.intp), alpha, float(gamma))
    return float(losses.sum() / n), dz / n


@dataclass(frozen=True)
class ClassifierLoss:
    """MLP classifier objective over a batch ``(x, y)``.

    ``kind`` is ``"ce"`` (alpha-weighted cross entropy) or ``"focal"``.
    Calling the object gives the loss; :meth:`value_and_grad` adds the
    analytic gradient as an :class:`MlpParams`.
    """
    kind: str = "ce"
    alpha: np.ndarray | None = None
    gamma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("ce", "focal"):
            raise InvalidArgument(f"unknown loss kind {self.kind!r}")
        if self.kind == "focal":
            FocalConfig(self.gamma, self.alpha)

    def head(self, logits, y):
        if self.kind == "ce":
            return batch_xent(logits, y, self.alpha)
        return batch_focal(logits, y, self.gamma, self.alpha)

    def __call__(self, params, batch):
        x, y = batch
        logits, _ = mlp_forward(params, x)
        return self.head(logits, y)[0]

    def value_and_grad(self, params, batch):
        x, y = batch
        logits, cache = mlp_forward(params, x)
        loss, dz = self.head(logits, y)
        grads, _ = mlp_backward(params, cache, dz)
        return loss, grads


def gradients(loss_fn, params, batch=None):
    """Analytic gradient of ``loss_fn`` at ``params``.

    ``loss_fn`` must expose ``value_and_grad(params, batch) -> (loss, grads)``.
    """
    loss, grads = loss_fn.value_and_grad(params, batch)
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss!r}")
    return grads


def finite_diff_gradients(loss_fn: Callable, params, epsilon=1e-5, batch=None):
    """Central-difference gradient estimate, one parameter at a time."""
    if not epsilon > 0:
        raise InvalidArgument("epsilon must be > 0")
    leaves = [leaf.copy() for leaf in tree_leaves(params)]
    grads = [np.zeros_like(leaf) for leaf in leaves]
    for leaf, g in zip(leaves, grads):
        flat, gflat = leaf.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            up = loss_fn(tree_unflatten(params, leaves), batch)
            flat[j] = orig - epsilon
            down = loss_fn(tree_unflatten(params, leaves), batch)
            flat[j] = orig
            gflat[j] = (up - down) / (2.0 * epsilon)
    return tree_unflatten(params, grads)


# -------------------------------------------------------------- optimizers

@dataclass(frozen=True)
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    decay_factor: float = 0.95
    decay_every: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: tuple = field(default=(), repr=False)
    v: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise InvalidArgument(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise InvalidArgument("learning rate must be > 0")
        if not 0 < self.decay_factor <= 1:
            raise InvalidArgument("decay factor must lie in (0, 1]")
        if self.decay_every < 1:
            raise InvalidArgument("decay interval must be >= 1")

    @property
    def current_lr(self):
        return self.lr * self.decay_factor ** (self.step // self.decay_every)


def optimizer_step(state: OptimizerState, params, grads):
    """Apply one SGD or Adam update; returns ``(new_params, new_state)``."""
    p_leaves, g_leaves = tree_leaves(params), tree_leaves(grads)
    if len(p_leaves) != len(g_leaves) or any(
            p.shape != g.shape for p, g in zip(p_leaves, g_leaves)):
        raise InvalidArgument("gradient shapes do not match parameter shapes")
    lr = state.current_lr
    t = state.step + 1
    if state.kind == "sgd":
        new = [p - lr * g for p, g in zip(p_leaves, g_leaves)]
        return tree_unflatten(params, new), replace(state, step=t)
    m = state.m or tuple(np.zeros_like(p) for p in p_leaves)
    v = state.v or tuple(np.zeros_like(p) for p in p_leaves)
    if len(m) != len(p_leaves) or any(a.shape != p.shape for a, p in zip(m, p_leaves)):
        raise InvalidArgument("Adam moment shapes do not match parameters")
    b1, b2 = state.beta1, state.beta2
    m = tuple(b1 * mi + (1.0 - b1) * g for mi, g in zip(m, g_leaves))
    v = tuple(b2 * vi + (1.0 - b2) * g * g for vi, g in zip(v, g_leaves))
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new = [p - lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps)
           for p, mi, vi in zip(p_leaves, m, v)]
    return tree_unflatten(params, new), replace(state, step=t, m=m, v=v)


# ----------------------------------------------------------- model output

@dataclass(frozen=True)
class ModelOutput:
    """Per-class logits and probabilities for one query (1-D) or a batch (2-D)."""
    logits: np.ndarray
    probs: np.ndarray

    @classmethod
    def from_logits(cls, logits):
        logits = np.asarray(logits, dtype=np.float64)
        if logits.ndim == 1:
            return cls(logits, softmax(logits))
        return cls(logits, softmax_rows(logits))

    @property
    def labels(self):
        """Argmax class per row; ties go to the lowest index."""
        return np.argmax(self.probs, axis=-1)

    @property
    def label(self):
        return int(np.argmax(self.probs))

    def row(self, i):
        return ModelOutput(self.logits[i], self.probs[i])
