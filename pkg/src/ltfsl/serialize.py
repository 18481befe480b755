"""Plain-text model files.

Layout::

    # ltfsl model v1
    kind=csl
    <more key=value header lines>
    block=params
    layers=16,64,19
    layer_index,row,col,value
    0,0,0,0.0123...
    0,-1,3,0.5          <- bias entries use row -1

Floats are written with ``repr`` so loading gives back the identical
bits. Meta models carry a ``method`` tag, their config and one extra
block (``relation``) when the method needs it.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from ltfsl import numerics as nx
from ltfsl.csl import CslModel
from ltfsl.errors import ParseError
from ltfsl.fsl import FslConfig, MetaModel

MAGIC = "# ltfsl model v1"
ROW_HEADER = "layer_index,row,col,value"


def _floats(values):
    return ",".join(repr(float(v)) for v in values)


def _parse_floats(text, lineno):
    if text == "":
        return np.zeros(0)
    try:
        return np.array([float(t) for t in text.split(",")], dtype=np.float64)
    except ValueError:
        raise ParseError(lineno, f"bad float list {text!r}") from None


def _block_lines(name, params: nx.MlpParams):
    yield f"block={name}"
    yield "layers=" + ",".join(str(s) for s in params.sizes)
    yield ROW_HEADER
    for li, (w, b) in enumerate(zip(params.weights, params.biases)):
        for r in range(w.shape[0]):
            for c in range(w.shape[1]):
                yield f"{li},{r},{c},{float(w[r, c])!r}"
        for c in range(b.shape[0]):
            yield f"{li},-1,{c},{float(b[c])!r}"


def _write(path, header: dict, blocks: dict):
    lines = [MAGIC]
    for key, val in header.items():
        text = str(val)
        if "\n" in text:
            raise ValueError(f"header value for {key!r} spans lines")
        lines.append(f"{key}={text}")
    for name, params in blocks.items():
        lines.extend(_block_lines(name, params))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read(path):
    """Return ``(header dict, {block name: MlpParams})``."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MAGIC:
        raise ParseError(1, "not an ltfsl model file")
    header, blocks = {}, {}
    i = 1
    while i < len(lines) and not lines[i].startswith("block="):
        key, sep, val = lines[i].partition("=")
        if not sep:
            raise ParseError(i + 1, f"expected key=value, got {lines[i]!r}")
        header[key] = val
        i += 1
    while i < len(lines):
        name = lines[i][len("block="):]
        if i + 2 >= len(lines) or not lines[i + 1].startswith("layers=") \
                or lines[i + 2] != ROW_HEADER:
            raise ParseError(i + 1, f"malformed block header for {name!r}")
        try:
            sizes = [int(s) for s in lines[i + 1][len("layers="):].split(",")]
        except ValueError:
            raise ParseError(i + 2, "bad layer sizes") from None
        weights = [np.full((a, b), np.nan) for a, b in zip(sizes[:-1], sizes[1:])]
        biases = [np.full(b, np.nan) for b in sizes[1:]]
        i += 3
        while i < len(lines) and not lines[i].startswith("block="):
            parts = lines[i].split(",")
            if len(parts) != 4:
                raise ParseError(i + 1, "expected layer_index,row,col,value")
            try:
                li, r, c, v = int(parts[0]), int(parts[1]), int(parts[2]), float(parts[3])
                if r == -1:
                    biases[li][c] = v
                elif r < 0:
                    raise IndexError
                else:
                    weights[li][r, c] = v
            except (ValueError, IndexError):
                raise ParseError(i + 1, f"bad entry {lines[i]!r}") from None
            i += 1
        params = nx.MlpParams(tuple(weights), tuple(biases))
        if not params.is_finite():
            raise ParseError(i, f"block {name!r} has missing or non-finite entries")
        blocks[name] = params
    return header, blocks


def _need(header, key):
    if key not in header:
        raise ParseError(0, f"missing header key {key!r}")
    return header[key]


# ---------------------------------------------------------------- CSL

def save_csl(model: CslModel, path, cache_key=""):
    header = {
        "kind": "csl",
        "classes": ";".join(model.classes),
        "priors": _floats(model.priors),
        "registry_hash": model.registry_hash,
        "prior_correction": int(model.prior_correction),
        "best_step": model.best_step,
        "cache_key": cache_key,
    }
    _write(path, header, {"params": model.params})


def load_csl(path) -> tuple[CslModel, str]:
    """Returns ``(model, cache_key)``; the loss history is not stored."""
    header, blocks = _read(path)
    if header.get("kind") != "csl" or set(blocks) != {"params"}:
        raise ParseError(0, "not a CSL model file")
    classes = tuple(_need(header, "classes").split(";"))
    priors = _parse_floats(_need(header, "priors"), 0)
    model = CslModel(blocks["params"], classes, priors, _need(header, "registry_hash"),
                     _need(header, "prior_correction") == "1", (),
                     int(_need(header, "best_step")))
    return model, header.get("cache_key", "")


# --------------------------------------------------------------- meta

def _config_text(cfg: FslConfig):
    parts = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = "(" + " ".join(str(x) for x in v) + ")"
        elif isinstance(v, float):
            v = repr(v)
        parts.append(f"{f.name}:{v}")
    return ";".join(parts)


def _config_from_text(text) -> FslConfig:
    kinds = {f.name: f.type for f in dataclasses.fields(FslConfig)}
    defaults = FslConfig()
    kw = {}
    for part in text.split(";"):
        name, _, raw = part.partition(":")
        if name not in kinds:
            raise ParseError(0, f"unknown FSL config field {name!r}")
        ref = getattr(defaults, name)
        if isinstance(ref, tuple):
            inner = raw.strip("()").split()
            kw[name] = tuple(int(x) for x in inner)
        elif isinstance(ref, bool):
            kw[name] = raw == "True"
        elif isinstance(ref, int):
            kw[name] = int(raw)
        elif isinstance(ref, float):
            kw[name] = float(raw)
        else:
            kw[name] = raw
    return FslConfig(**kw)


def save_meta(model: MetaModel, path, cache_key=""):
    header = {
        "kind": "meta",
        "method": model.method,
        "config": _config_text(model.config),
        "tau": "" if model.tau is None else repr(float(model.tau)),
        "seed": model.seed,
        "best_step": model.best_step,
        "cache_key": cache_key,
    }
    blocks = {"embedder": model.embedder}
    if model.relation is not None:
        blocks["relation"] = model.relation
    _write(path, header, blocks)


def load_meta(path) -> tuple[MetaModel, str]:
    header, blocks = _read(path)
    if header.get("kind") != "meta" or "embedder" not in blocks:
        raise ParseError(0, "not a meta model file")
    tau = _need(header, "tau")
    cfg = _config_from_text(_need(header, "config"))
    if cfg.method != _need(header, "method"):
        raise ParseError(0, "method tag disagrees with stored config")
    model = MetaModel(cfg.method, blocks["embedder"], cfg, blocks.get("relation"),
                      float(tau) if tau else None, int(_need(header, "seed")), (),
                      int(_need(header, "best_step")))
    return model, header.get("cache_key", "")


def read_cache_key(path):
    """Cheap header scan; returns None for unreadable files."""
    try:
        with open(path, encoding="utf-8") as fh:
            if fh.readline().rstrip("\n") != MAGIC:
                return None
            for line in fh:
                if line.startswith("block="):
                    break
                if line.startswith("cache_key="):
                    return line[len("cache_key="):].rstrip("\n")
    except OSError:
        return None
    return None


def models_equal(a, b) -> bool:
    """Bitwise parameter equality plus metadata, ignoring loss history."""
    if type(a) is not type(b):
        return False
    if isinstance(a, CslModel):
        return (a.classes == b.classes and a.registry_hash == b.registry_hash
                and a.prior_correction == b.prior_correction and a.best_step == b.best_step
                and np.array_equal(a.priors, b.priors) and nx.tree_equal(a.params, b.params))
    extras = (a.relation is None and b.relation is None) or (
        a.relation is not None and b.relation is not None and nx.tree_equal(a.relation, b.relation))
    return (a.method == b.method and a.config == b.config and a.seed == b.seed and a.tau == b.tau
            and a.best_step == b.best_step and extras and nx.tree_equal(a.embedder, b.embedder))
