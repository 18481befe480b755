"""Pure numpy implementations of the hot kernels.

Mirrors the compiled ``_ckernels`` module function for function; used when
the extension is not built or ``LTFSL_PURE_PYTHON`` is set.
"""
import numpy as np


def logsumexp_rows(z):
    z = np.asarray(z, dtype=np.float64)
    m = z.max(axis=1)
    return m + np.log(np.exp(z - m[:, None]).sum(axis=1))


def log_softmax_rows(z):
    z = np.asarray(z, dtype=np.float64)
    return z - logsumexp_rows(z)[:, None]


def softmax_xent(z, y, alpha):
    """Per-row alpha-weighted cross entropy and its gradient w.r.t. ``z``."""
    logp = log_softmax_rows(z)
    rows = np.arange(z.shape[0])
    a = alpha[y]
    losses = -a * logp[rows, y]
    dz = np.exp(logp)
    dz[rows, y] -= 1.0
    dz *= a[:, None]
    return losses, dz


def focal_xent(z, y, alpha, gamma):
    """Per-row focal loss ``-a (1-p)^g log p`` at the true class, with gradient."""
    logp = log_softmax_rows(z)
    rows = np.arange(z.shape[0])
    a = alpha[y]
    lp = logp[rows, y]
    pt = np.exp(lp)
    one_minus = -np.expm1(lp)
    mod = one_minus ** gamma
    losses = -a * mod * lp
    with np.errstate(divide="ignore", invalid="ignore"):
        dmod = np.where(one_minus > 0.0, gamma * one_minus ** (gamma - 1.0) * pt * lp, 0.0)
    factor = a * (dmod - mod)
    # d/dz_j log p_y = delta_jy - p_j
    dz = -np.exp(logp)
    dz[rows, y] += 1.0
    dz *= factor[:, None]
    return losses, dz


def sq_euclidean_matrix(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def cosine_matrix(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.sqrt(np.einsum("ij,ij->i", a, a))
    nb = np.sqrt(np.einsum("ij,ij->i", b, b))
    denom = na[:, None] * nb[None, :]
    dots = a @ b.T
    out = np.zeros_like(dots)
    np.divide(dots, denom, out=out, where=denom > 0.0)
    return np.clip(out, -1.0, 1.0)
