"""Magnitude-aware angular-margin softmax loss at desk scale.

The kernel computes the loss value and its analytic gradients so they can
be checked against finite differences; there is no training loop.  The
margin grows linearly with the embedding magnitude and a convex regularizer
pulls magnitudes toward their upper bound:

    m(a) = (m_u - m_l) / (n_u - n_l) * (a - n_l) + m_l
    g(a) = a / n_u**2 + 1 / a

with the magnitude a clamped into [n_l, n_u] before either function
(zero sub-gradient at the clamp boundaries).  cos(theta + m) is expanded as
cos*cos(m) - sin*sin(m) with sin(theta) = sqrt(max(0, 1 - cos^2)) to avoid
arccos instability near theta in {0, pi}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MagfaceParams:
    scale_s: float = 64.0
    lambda_g: float = 0.0
    n_u: float = 110.0
    n_l: float = 10.0
    m_u: float = 1.0
    m_l: float = 0.1

    def __post_init__(self):
        if not (self.n_u > self.n_l > 0):
            raise ValueError("need n_u > n_l > 0")
        if not (self.m_u > self.m_l > 0):
            raise ValueError("need m_u > m_l > 0")
        if not (self.scale_s > 0):
            raise ValueError("scale_s must be positive")
        if self.lambda_g < 0:
            raise ValueError("lambda_g must be non-negative")


@dataclass(frozen=True)
class MagfaceBatch:
    """A batch of embeddings with class weights and integer labels."""

    embeddings: np.ndarray  # N x d
    class_weights: np.ndarray  # C x d
    labels: np.ndarray  # N ints in [0, C)

    def __post_init__(self):
        x = np.asarray(self.embeddings, dtype=np.float64)
        w = np.asarray(self.class_weights, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or w.ndim != 2 or y.ndim != 1:
            raise ValueError("embeddings must be N x d, class_weights C x d, labels length N")
        if x.shape[0] != y.shape[0] or x.shape[1] != w.shape[1]:
            raise ValueError("batch shapes are inconsistent")
        if x.shape[0] < 1 or w.shape[0] < 1:
            raise ValueError("batch must contain at least one sample and one class")
        if y.min() < 0 or y.max() >= w.shape[0]:
            raise ValueError("labels out of range")
        object.__setattr__(self, "embeddings", x)
        object.__setattr__(self, "class_weights", w)
        object.__setattr__(self, "labels", y)


def margin(a: float, p: MagfaceParams) -> float:
    """Magnitude-dependent angular margin, linear between (n_l, m_l) and (n_u, m_u)."""
    a = min(max(float(a), p.n_l), p.n_u)
    return (p.m_u - p.m_l) / (p.n_u - p.n_l) * (a - p.n_l) + p.m_l


def g_reg(a: float, p: MagfaceParams) -> float:
    """Magnitude regularizer a/n_u^2 + 1/a; minimized at a = n_u."""
    a = min(max(float(a), p.n_l), p.n_u)
    return a / p.n_u**2 + 1.0 / a


def _forward(batch: MagfaceBatch, p: MagfaceParams):
    x, w, y = batch.embeddings, batch.class_weights, batch.labels
    n = x.shape[0]
    xnorm = np.linalg.norm(x, axis=1)
    wnorm = np.linalg.norm(w, axis=1)
    if np.any(xnorm == 0):
        row = int(np.flatnonzero(xnorm == 0)[0])
        raise ValueError(f"embedding row {row} has zero norm")
    if np.any(wnorm == 0):
        row = int(np.flatnonzero(wnorm == 0)[0])
        raise ValueError(f"class weight row {row} has zero norm")

    u = x / xnorm[:, None]
    v = w / wnorm[:, None]
    cos = u @ v.T  # N x C
    np.clip(cos, -1.0, 1.0, out=cos)

    a = np.clip(xnorm, p.n_l, p.n_u)
    slope = (p.m_u - p.m_l) / (p.n_u - p.n_l)
    m = slope * (a - p.n_l) + p.m_l
    cos_m, sin_m = np.cos(m), np.sin(m)

    idx = np.arange(n)
    cos_t = cos[idx, y]
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t**2))
    psi = p.scale_s * (cos_t * cos_m - sin_t * sin_m)

    logits = p.scale_s * cos
    logits[idx, y] = psi

    shift = logits.max(axis=1, keepdims=True)
    lse = shift[:, 0] + np.log(np.exp(logits - shift).sum(axis=1))
    ce = lse - psi
    g = a / p.n_u**2 + 1.0 / a
    per_sample = ce + p.lambda_g * g
    return {
        "xnorm": xnorm, "wnorm": wnorm, "u": u, "v": v, "cos": cos, "a": a,
        "m": m, "cos_m": cos_m, "sin_m": sin_m, "cos_t": cos_t, "sin_t": sin_t,
        "logits": logits, "lse": lse, "per_sample": per_sample, "slope": slope,
    }


def magface_loss(batch: MagfaceBatch, p: MagfaceParams) -> tuple[float, np.ndarray]:
    """Loss value and per-sample terms (cross entropy plus the g regularizer)."""
    f = _forward(batch, p)
    per_sample = f["per_sample"]
    return float(per_sample.mean()), per_sample


def magface_grad(batch: MagfaceBatch, p: MagfaceParams) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of the mean loss w.r.t. embeddings and class weights.

    Includes the chain through the magnitude in both the margin and the
    regularizer; magnitudes at or beyond the clamp boundaries contribute
    zero sub-gradient on those paths.
    """
    f = _forward(batch, p)
    x, w, y = batch.embeddings, batch.class_weights, batch.labels
    n, c = f["cos"].shape
    idx = np.arange(n)

    prob = np.exp(f["logits"] - f["lse"][:, None])  # softmax, N x C
    dz = prob.copy()
    dz[idx, y] -= 1.0  # dCE/dlogit

    # dlogit/dcos: s off target; s*(cos_m + sin_m*cos_t/sin_t) on target.
    sin_t = np.maximum(f["sin_t"], 1e-12)
    dcos = dz * p.scale_s
    dcos[idx, y] = dz[idx, y] * p.scale_s * (f["cos_m"] + f["sin_m"] * f["cos_t"] / sin_t)

    # Chain through cos(theta_ij) to embeddings and weights.
    xnorm, wnorm, u, v, cos = f["xnorm"], f["wnorm"], f["u"], f["v"], f["cos"]
    row_dot = (dcos * cos).sum(axis=1)
    dx = (dcos @ v - row_dot[:, None] * u) / xnorm[:, None]
    col_dot = (dcos * cos).sum(axis=0)
    dw = (dcos.T @ u - col_dot[:, None] * v) / wnorm[:, None]

    # Margin and regularizer paths act along the embedding direction.
    inside = (xnorm > p.n_l) & (xnorm < p.n_u)
    dpsi_dm = -p.scale_s * (f["sin_t"] * f["cos_m"] + f["cos_t"] * f["sin_m"])
    da = dz[idx, y] * dpsi_dm * f["slope"]
    if p.lambda_g > 0:
        da = da + p.lambda_g * (1.0 / p.n_u**2 - 1.0 / f["a"] ** 2)
    dx += np.where(inside, da, 0.0)[:, None] * u

    return dx / n, dw / n
