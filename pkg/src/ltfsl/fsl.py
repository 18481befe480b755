"""Few-shot learners on a shared MLP embedder.

Methods: ``knn`` and ``baselinepp`` (batch training), ``matching``,
``proto`` and ``relation`` (metric-based, episodic), ``maml`` and
``protomaml`` (first-order, episodic). Every learner exposes
``prepare(support_x, support_y, n_classes)`` which returns a query
predictor, so standard N-way episodes and all-way deployment share one
code path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ltfsl import kernels
from ltfsl import numerics as nx
from ltfsl.data import Dataset, EpisodeSpec, feasible_classes, sample_episode
from ltfsl.errors import AdaptationDiverged, InvalidArgument, TrainingDiverged

METHODS = ("knn", "baselinepp", "matching", "proto", "relation", "maml", "protomaml")
BATCH_METHODS = ("knn", "baselinepp")
EPISODIC_METHODS = METHODS[2:]


@dataclass(frozen=True)
class FslConfig:
    method: str = "proto"
    hidden: tuple = (64, 64)
    embed_dim: int = 64
    relation_hidden: int = 32
    n_way: int = 5
    k_shot: int = 5
    q_query: int = 10
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    decay_factor: float = 0.95
    decay_every: int = 1000
    eval_every: int = 100
    patience: int = 10
    val_episodes: int = 20
    inner_steps: int = 5
    inner_lr: float = 0.01
    finetune_steps: int = 100
    finetune_lr: float = 0.01
    tau_init: float = 10.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidArgument(f"unknown FSL method {self.method!r}")
        if self.steps < 0 or self.inner_steps < 0 or self.finetune_steps < 0:
            raise InvalidArgument("step counts must be >= 0")
        if not (self.inner_lr > 0 and self.finetune_lr > 0 and self.lr > 0):
            raise InvalidArgument("learning rates must be > 0")
        self.episode_spec()

    def episode_spec(self):
        return EpisodeSpec(self.n_way, self.k_shot, self.q_query)

    def training_key(self):
        return "fsl|" + "|".join(f"{k}={getattr(self, k)}" for k in self.__dataclass_fields__)


# ------------------------------------------------------------ helpers

def one_hot(y, n):
    out = np.zeros((len(y), n))
    out[np.arange(len(y)), y] = 1.0
    return out


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def class_means(emb, y, n_classes):
    """Per-class mean rows; raises if a class has no members."""
    m = one_hot(y, n_classes)
    counts = m.sum(axis=0)
    if np.any(counts == 0):
        raise InvalidArgument(f"class {int(np.argmin(counts))} has no support examples")
    return (m.T @ emb) / counts[:, None], m, counts


def cosine_backward(a, b, cos, dcos):
    """Gradients of ``sum(dcos * cos(a_i, b_j))`` w.r.t. ``a`` and ``b``.

    Rows with zero norm (cosine defined as 0) get zero gradient.
    """
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    sa = np.where(na > 0, na, 1.0)
    sb = np.where(nb > 0, nb, 1.0)
    an, bn = a / sa[:, None], b / sb[:, None]
    dc = dcos * cos
    da = (dcos @ bn - dc.sum(axis=1)[:, None] * an) / sa[:, None]
    db = (dcos.T @ an - dc.sum(axis=0)[:, None] * bn) / sb[:, None]
    da[na == 0] = 0.0
    db[nb == 0] = 0.0
    return da, db


# -------------------------------------------------------- support index

@dataclass(frozen=True)
class SupportIndex:
    embedder: nx.MlpParams
    embeddings: np.ndarray
    labels: np.ndarray
    prototypes: np.ndarray

    @property
    def n_classes(self):
        return self.prototypes.shape[0]

    def embed(self, x):
        return embed(self.embedder, x)


def embed(embedder, x):
    x = np.asarray(x, dtype=np.float64)
    return nx.mlp_apply(embedder, x if x.ndim == 2 else x[None, :])


def index_from_arrays(embedder, support_x, support_y, n_classes) -> SupportIndex:
    emb = embed(embedder, support_x)
    y = np.asarray(support_y, dtype=np.intp)
    protos, _, _ = class_means(emb, y, n_classes)
    return SupportIndex(embedder, emb, y, protos)


def build_support_index(embedder, support: Dataset, classes) -> SupportIndex:
    """Embed ``support`` and average per class, in the order of ``classes``."""
    lookup = {c: i for i, c in enumerate(classes)}
    try:
        y = np.array([lookup[lab] for lab in support.labels], dtype=np.intp)
    except KeyError as exc:
        raise InvalidArgument(f"support label {exc.args[0]!r} not among classes") from None
    return index_from_arrays(embedder, support.features, y, len(classes))


def _squeeze(out, x):
    return out.row(0) if np.asarray(x).ndim == 1 else out


def knn_predict(index: SupportIndex, x) -> nx.ModelOutput:
    """Cosine similarity to each class centroid, used as logits."""
    logits = kernels.cosine_matrix(index.embed(x), index.prototypes)
    return _squeeze(nx.ModelOutput.from_logits(logits), x)


def proto_predict(index: SupportIndex, x) -> nx.ModelOutput:
    """Negative squared Euclidean distance to each prototype, used as logits."""
    logits = -kernels.sq_euclidean_matrix(index.embed(x), index.prototypes)
    return _squeeze(nx.ModelOutput.from_logits(logits), x)


def matching_probs(support_emb, support_y, n_classes, query_emb):
    att = nx.softmax_rows(kernels.cosine_matrix(query_emb, support_emb))
    return att, att @ one_hot(support_y, n_classes)


def matching_predict(embedder, support_x, support_y, n_classes, x) -> nx.ModelOutput:
    """Cosine-attention over support examples, summed per class."""
    if len(support_y) == 0:
        raise InvalidArgument("empty support set")
    _, probs = matching_probs(embed(embedder, support_x), np.asarray(support_y, dtype=np.intp),
                              n_classes, embed(embedder, x))
    out = nx.ModelOutput(np.log(np.maximum(probs, 1e-300)), probs)
    return _squeeze(out, x)


def _relation_pairs(protos, q):
    nq, c, e = q.shape[0], protos.shape[0], q.shape[1]
    pairs = np.empty((nq, c, 2 * e))
    pairs[:, :, :e] = protos[None, :, :]
    pairs[:, :, e:] = q[:, None, :]
    return pairs.reshape(nq * c, 2 * e)


def relation_predict(embedder, relation: nx.MlpParams, index: SupportIndex, x) -> nx.ModelOutput:
    """Relation-module score on ``concat(prototype, query)`` per class.

    Logits carry the pre-sigmoid scores; probabilities are the sigmoid
    scores normalized to sum to one.
    """
    q = embed(embedder, x)
    if relation.in_dim != 2 * q.shape[1] or relation.out_dim != 1:
        raise InvalidArgument("relation module must map 2*embed_dim -> 1")
    z = nx.mlp_apply(relation, _relation_pairs(index.prototypes, q)).reshape(q.shape[0], -1)
    s = sigmoid(z)
    out = nx.ModelOutput(z, s / s.sum(axis=1, keepdims=True))
    return _squeeze(out, x)


def proto_maml_head_init(index: SupportIndex) -> nx.MlpParams:
    """Linear layer equal to the prototype classifier up to a per-query constant.

    ``-|e - p|^2 = 2 p.e - |p|^2 - |e|^2``, so ``W_c = 2 p_c`` and
    ``b_c = -|p_c|^2``.
    """
    p = index.prototypes
    return nx.MlpParams((2.0 * p.T,), (-np.einsum("ij,ij->i", p, p),))


# ------------------------------------------------------ MAML machinery

@dataclass(frozen=True)
class StackedLoss:
    """Cross entropy of ``head(body(x))`` for params ``{"body", "head"}``."""

    def __call__(self, params, batch):
        return self.value_and_grad(params, batch, need_grad=False)

    def value_and_grad(self, params, batch, need_grad=True):
        x, y = batch
        emb, body_cache = nx.mlp_forward(params["body"], x)
        logits, head_cache = nx.mlp_forward(params["head"], emb)
        loss, dz = nx.batch_xent(logits, y)
        if not need_grad:
            return loss
        g_head, demb = nx.mlp_backward(params["head"], head_cache, dz)
        g_body, _ = nx.mlp_backward(params["body"], body_cache, demb)
        return loss, {"body": g_body, "head": g_head}


def maml_adapt(init, support, inner_steps=5, inner_lr=0.01, loss_fn=None):
    """Plain gradient descent on the support loss, starting from ``init``."""
    if inner_steps < 0 or not inner_lr > 0:
        raise InvalidArgument("inner_steps >= 0 and inner_lr > 0 required")
    if loss_fn is None:
        loss_fn = StackedLoss() if isinstance(init, dict) else nx.ClassifierLoss("ce")
    params = init
    for t in range(inner_steps):
        loss, grads = loss_fn.value_and_grad(params, support)
        if not math.isfinite(loss):
            raise AdaptationDiverged(f"non-finite support loss at inner step {t}")
        params = nx.tree_map(lambda p, g: p - inner_lr * g, params, grads)
    return params


def zero_head(embed_dim, n_classes):
    return nx.MlpParams((np.zeros((embed_dim, n_classes)),), (np.zeros(n_classes),))


# ------------------------------------------------- episode loss + grads

def _proto_loss(s, ys, q, yq, n):
    protos, m, counts = class_means(s, ys, n)
    d = kernels.sq_euclidean_matrix(q, protos)
    loss, g = nx.batch_xent(-d, yq)
    dd = -g
    dq = 2.0 * (dd.sum(axis=1)[:, None] * q - dd @ protos)
    dp = -2.0 * (dd.T @ q - dd.sum(axis=0)[:, None] * protos)
    ds = m @ (dp / counts[:, None])
    return loss, ds, dq


def _matching_loss(s, ys, q, yq, n):
    cos = kernels.cosine_matrix(q, s)
    att = nx.softmax_rows(cos)
    p = att @ one_hot(ys, n)
    rows = np.arange(len(yq))
    pt = p[rows, yq]
    loss = float(-np.mean(np.log(np.maximum(pt, 1e-300))))
    same = (ys[None, :] == yq[:, None])
    dcos = (att - att * same / pt[:, None]) / len(yq)
    dq, ds = cosine_backward(q, s, cos, dcos)
    return loss, ds, dq


def _relation_loss(relation, s, ys, q, yq, n):
    protos, m, counts = class_means(s, ys, n)
    pairs = _relation_pairs(protos, q)
    z, cache = nx.mlp_forward(relation, pairs)
    sc = sigmoid(z[:, 0])
    target = one_hot(yq, n).reshape(-1)
    diff = sc - target
    loss = float(np.mean(diff * diff))
    dz = (2.0 * diff * sc * (1.0 - sc) / diff.size)[:, None]
    g_rel, dpairs = nx.mlp_backward(relation, cache, dz)
    e = q.shape[1]
    dpairs = dpairs.reshape(len(yq), n, 2 * e)
    dp = dpairs[:, :, :e].sum(axis=0)
    dq = dpairs[:, :, e:].sum(axis=1)
    ds = m @ (dp / counts[:, None])
    return loss, ds, dq, g_rel


def metric_episode_loss(method, params, sx, sy, qx, qy, n):
    """Episode query loss and gradients for the metric-based methods.

    ``params`` is ``{"embedder": ...}`` plus ``"relation"`` for relation nets.
    """
    x = np.concatenate([sx, qx])
    emb, cache = nx.mlp_forward(params["embedder"], x)
    ns = len(sy)
    s, q = emb[:ns], emb[ns:]
    grads = {}
    if method == "proto":
        loss, ds, dq = _proto_loss(s, sy, q, qy, n)
    elif method == "matching":
        loss, ds, dq = _matching_loss(s, sy, q, qy, n)
    elif method == "relation":
        loss, ds, dq, grads["relation"] = _relation_loss(params["relation"], s, sy, q, qy, n)
    else:
        raise InvalidArgument(f"{method!r} is not a metric-based method")
    grads["embedder"], _ = nx.mlp_backward(params["embedder"], cache, np.concatenate([ds, dq]))
    return loss, grads


@dataclass(frozen=True)
class EpisodeObjective:
    """Wraps :func:`metric_episode_loss` for gradient checking."""
    method: str
    n_way: int

    def __call__(self, params, batch):
        return self.value_and_grad(params, batch)[0]

    def value_and_grad(self, params, batch):
        sx, sy, qx, qy = batch
        return metric_episode_loss(self.method, params, sx, sy, qx, qy, self.n_way)


# ------------------------------------------------------- cosine head

@dataclass(frozen=True)
class CosineHeadLoss:
    """CE of ``tau * cos(emb, w_c)`` for params ``{"w": (C, E), "tau": (1,)}``."""

    def __call__(self, params, batch):
        return self.value_and_grad(params, batch)[0]

    def value_and_grad(self, params, batch):
        emb, y = batch
        cos = kernels.cosine_matrix(emb, params["w"])
        tau = params["tau"][0]
        loss, g = nx.batch_xent(tau * cos, y)
        _, dw = cosine_backward(emb, params["w"], cos, tau * g)
        return loss, {"tau": np.array([np.sum(g * cos)]), "w": dw}


def baselinepp_finetune(model, support_x, support_y, n_classes):
    """Train a cosine head on frozen embeddings; returns the head params.

    Class weight vectors start at the support prototypes and ``tau`` at
    ``tau_init``.
    """
    cfg = model.config
    emb = embed(model.embedder, support_x)
    y = np.asarray(support_y, dtype=np.intp)
    protos, _, _ = class_means(emb, y, n_classes)
    head = {"tau": np.array([model.tau if model.tau is not None else cfg.tau_init]), "w": protos}
    loss_fn = CosineHeadLoss()
    opt = nx.OptimizerState("adam", cfg.finetune_lr, 1.0, 1)
    for t in range(cfg.finetune_steps):
        loss, grads = loss_fn.value_and_grad(head, (emb, y))
        if not math.isfinite(loss):
            raise TrainingDiverged(t, loss)
        head, opt = nx.optimizer_step(opt, head, grads)
    return head


def cosine_head_predict(embedder, head, x):
    logits = head["tau"][0] * kernels.cosine_matrix(embed(embedder, x), head["w"])
    return _squeeze(nx.ModelOutput.from_logits(logits), x)


# ----------------------------------------------------------- meta model

@dataclass(frozen=True)
class MetaModel:
    method: str
    embedder: nx.MlpParams
    config: FslConfig
    relation: nx.MlpParams | None = None
    tau: float | None = None
    seed: int = 0
    loss_history: tuple = field(default=(), compare=False, repr=False)
    best_step: int = 0

    def __post_init__(self):
        if (self.relation is not None) != (self.method == "relation"):
            raise InvalidArgument("relation extras present iff method is 'relation'")
        if (self.tau is not None) != (self.method == "baselinepp"):
            raise InvalidArgument("cosine-head scale present iff method is 'baselinepp'")

    def params(self):
        p = {"embedder": self.embedder}
        if self.relation is not None:
            p["relation"] = self.relation
        return p

    def prepare(self, support_x, support_y, n_classes):
        """Adapt to a support set; returns ``predict(query_x) -> ModelOutput``."""
        support_y = np.asarray(support_y, dtype=np.intp)
        counts = np.bincount(support_y, minlength=n_classes)
        if counts.size != n_classes or np.any(counts == 0):
            raise InvalidArgument("support set must cover every class")
        m = self.method
        if m in ("knn", "proto"):
            index = index_from_arrays(self.embedder, support_x, support_y, n_classes)
            fn = knn_predict if m == "knn" else proto_predict
            return lambda x: fn(index, x)
        if m == "matching":
            s_emb = embed(self.embedder, support_x)

            def predict(x):
                _, probs = matching_probs(s_emb, support_y, n_classes, embed(self.embedder, x))
                return nx.ModelOutput(np.log(np.maximum(probs, 1e-300)), probs)
            return predict
        if m == "relation":
            index = index_from_arrays(self.embedder, support_x, support_y, n_classes)
            return lambda x: relation_predict(self.embedder, self.relation, index, x)
        if m == "baselinepp":
            head = baselinepp_finetune(self, support_x, support_y, n_classes)
            return lambda x: cosine_head_predict(self.embedder, head, x)
        adapted = self._adapt(support_x, support_y, n_classes)

        def predict(x):
            x = np.asarray(x, dtype=np.float64)
            xb = x if x.ndim == 2 else x[None, :]
            logits = nx.mlp_apply(adapted["head"], nx.mlp_apply(adapted["body"], xb))
            return _squeeze(nx.ModelOutput.from_logits(logits), x)
        return predict

    def _adapt(self, support_x, support_y, n_classes):
        cfg = self.config
        if self.method == "protomaml":
            head = proto_maml_head_init(
                index_from_arrays(self.embedder, support_x, support_y, n_classes))
        else:
            head = zero_head(self.embedder.out_dim, n_classes)
        return maml_adapt({"body": self.embedder, "head": head},
                          (np.asarray(support_x, dtype=np.float64), support_y),
                          cfg.inner_steps, cfg.inner_lr)

    def episode_predict(self, support_x, support_y, n_way, query_x):
        return self.prepare(support_x, support_y, n_way)(query_x)


def init_meta_model(config: FslConfig, dim, seed) -> MetaModel:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    embedder = nx.init_mlp((dim,) + tuple(config.hidden) + (config.embed_dim,), rng)
    relation = None
    if config.method == "relation":
        relation = nx.init_mlp((2 * config.embed_dim, config.relation_hidden, 1), rng)
    tau = config.tau_init if config.method == "baselinepp" else None
    return MetaModel(config.method, embedder, config, relation, tau, int(seed))


def _episode_step_grads(model: MetaModel, ep):
    cfg, m = model.config, model.method
    sx, sy, qx, qy = ep.support_x, ep.support_y, ep.query_x, ep.query_y
    if m in ("proto", "matching", "relation"):
        return metric_episode_loss(m, model.params(), sx, sy, qx, qy, ep.n_way)
    adapted = model._adapt(sx, sy, ep.n_way)
    # first-order: query gradient at the adapted parameters updates the init
    loss, g = StackedLoss().value_and_grad(adapted, (qx, qy))
    return loss, {"embedder": g["body"]}


def _validation(model, source, val_pool, spec, episodes, seed):
    """Fixed validation episodes; returns a scorer or None if infeasible."""
    if val_pool is None or episodes < 1:
        return None
    need = spec.k_shot + spec.q_query
    pool = feasible_classes(source, val_pool, need)
    if len(pool) < 2:
        return None
    vspec = EpisodeSpec(min(spec.n_way, len(pool)), spec.k_shot, spec.q_query)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    eps = [sample_episode(source, vspec, pool, rng) for _ in range(episodes)]

    def score(m):
        accs = [np.mean(m.episode_predict(e.support_x, e.support_y, e.n_way, e.query_x).labels
                        == e.query_y) for e in eps]
        return float(np.mean(accs))
    return score


def _rebuild(model, params, history, best_step, tau=None):
    return MetaModel(model.method, params["embedder"], model.config, params.get("relation"),
                     model.tau if tau is None else tau, model.seed, tuple(history), best_step)


def _fit(model, step_fn, steps, score, cfg):
    params = model.params()
    opt = nx.OptimizerState("adam", cfg.lr, cfg.decay_factor, cfg.decay_every)
    best, best_score, best_step, bad = model, -1.0, 0, 0
    history = []
    current = model
    for step in range(1, steps + 1):
        loss, grads = step_fn(current, step)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss)
        history.append(loss)
        params, opt = nx.optimizer_step(opt, params, {k: grads[k] for k in params})
        current = _rebuild(model, params, (), step)
        if score is not None and (step % cfg.eval_every == 0 or step == steps):
            s = score(current)
            if s > best_score:
                best, best_score, best_step, bad = current, s, step, 0
            else:
                bad += 1
                if bad >= cfg.patience:
                    break
    final = current if score is None else best
    return _rebuild(final, final.params(), history, final.best_step if score is not None else len(history))


def meta_train(config: FslConfig, source: Dataset, train_pool, val_pool=None, seed=0,
               val_source=None) -> MetaModel:
    """Episodic training on ``train_pool`` classes of ``source``.

    Validation episodes from ``val_pool`` (drawn from ``val_source``,
    default ``source``) pick the best checkpoint with early stopping.
    """
    if config.method in BATCH_METHODS:
        raise InvalidArgument(f"{config.method!r} is a batch method; use batch_train")
    spec = config.episode_spec()
    model = init_meta_model(config, source.dim, seed)
    train_pool = list(train_pool)
    if val_pool is not None and set(val_pool) & set(train_pool):
        raise InvalidArgument("train and validation class pools must be disjoint")
    # feasibility is checked up front so errors surface before training
    sample_episode(source, spec, train_pool, np.random.default_rng(0))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    score = _validation(model, val_source or source, val_pool, spec, config.val_episodes, seed)

    def step_fn(current, step):
        return _episode_step_grads(current, sample_episode(source, spec, train_pool, rng))
    return _fit(model, step_fn, config.steps, score, config)


def batch_train(config: FslConfig, source: Dataset, train_classes, val_pool=None, seed=0,
                val_source=None) -> MetaModel:
    """Embedder + linear head over all training classes with CE; head discarded."""
    if config.method not in BATCH_METHODS:
        raise InvalidArgument(f"{config.method!r} is not a batch method")
    train_classes = sorted(train_classes)
    if val_pool is not None and set(val_pool) & set(train_classes):
        raise InvalidArgument("train and validation class pools must be disjoint")
    data = source.restrict(train_classes)
    lookup = {c: i for i, c in enumerate(train_classes)}
    y = np.array([lookup[lab] for lab in data.labels], dtype=np.intp)
    model = init_meta_model(config, source.dim, seed)
    head_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
    head = nx.init_mlp((config.embed_dim, len(train_classes)), head_rng)
    batch_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    score = _validation(model, val_source or source, val_pool, config.episode_spec(),
                        config.val_episodes, seed)
    state = {"head": head}
    loss_fn = StackedLoss()

    def step_fn(current, step):
        idx = batch_rng.integers(0, len(y), size=config.batch_size)
        loss, g = loss_fn.value_and_grad({"body": current.embedder, "head": state["head"]},
                                         (data.features[idx], y[idx]))
        state["head"], state["opt"] = nx.optimizer_step(
            state.get("opt") or nx.OptimizerState("adam", config.lr, config.decay_factor,
                                                  config.decay_every),
            state["head"], g["head"])
        return loss, {"embedder": g["body"]}
    return _fit(model, step_fn, config.steps, score, config)


def train_fsl(config: FslConfig, source, train_pool, val_pool=None, seed=0, val_source=None):
    fn = batch_train if config.method in BATCH_METHODS else meta_train
    return fn(config, source, train_pool, val_pool, seed, val_source)


def fsl_all_way_predictor(meta: MetaModel, support_all: Dataset, registry):
    """Predictor over all registry classes, adapted once on ``support_all``."""
    present = set(support_all.class_indices)
    missing = [c for c in registry.classes if c not in present]
    if missing:
        raise InvalidArgument(f"support set lacks class {missing[0]!r}")
    y = registry.encode(support_all.labels)
    return meta.prepare(support_all.features, y, registry.n_classes)


def fsl_all_way_predict(meta: MetaModel, support_all: Dataset, registry, x) -> nx.ModelOutput:
    return fsl_all_way_predictor(meta, support_all, registry)(x)
