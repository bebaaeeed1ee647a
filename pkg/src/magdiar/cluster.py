"""Clustering back-ends: average-linkage AHC and a Bayesian-HMM refiner.

The HMM treats speakers as states whose emissions come from a spherical
two-covariance model: speaker means are drawn N(0, sigma_b2 * I) and
observations N(mean, sigma_w2 * I).  Uncertainty propagation widens the
within-speaker covariance per segment to sigma_w2 + sigma_i2, where
sigma_i2 is the reciprocal of the magnitude-derived precision; zeros
recover the conventional model on the same code path.

Inference alternates closed-form Gaussian speaker-posterior updates with an
exact forward-backward pass over the speaker chain, tracking an evidence
lower bound.  All forward-backward arithmetic is in log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .core import EmbeddingSet, Labeling, ParseError
from .quality import PrecisionParams, magnitude, precision_transform


@dataclass(frozen=True)
class PldaParams:
    """Spherical between/within speaker variances."""

    sigma_b2: float
    sigma_w2: float

    def __post_init__(self):
        if not (self.sigma_b2 > 0 and self.sigma_w2 > 0):
            raise ValueError("sigma_b2 and sigma_w2 must be strictly positive")


@dataclass(frozen=True)
class VbxConfig:
    p_loop: float = 0.9
    f_a: float = 1.0
    f_b: float = 1.0
    max_speakers: int = 20
    max_iters: int = 40
    elbo_rel_tol: float = 1e-6
    min_cluster_mass: float = 1.0

    def __post_init__(self):
        if not (0 < self.p_loop < 1):
            raise ValueError("p_loop must be in (0, 1)")
        if not (self.f_a > 0 and self.f_b > 0):
            raise ValueError("f_a and f_b must be positive")
        if self.max_speakers < 1 or self.max_iters < 1:
            raise ValueError("max_speakers and max_iters must be positive")
        if not (self.elbo_rel_tol > 0):
            raise ValueError("elbo_rel_tol must be positive")
        if self.min_cluster_mass < 0:
            raise ValueError("min_cluster_mass must be non-negative")


@dataclass
class VbxState:
    """Per-speaker Gaussian posteriors plus responsibilities and the ELBO trace."""

    speaker_means: np.ndarray  # K x d
    speaker_precisions: np.ndarray  # K
    responsibilities: np.ndarray  # N x K
    elbo_trace: list[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Similarity matrices


def plda_llr_pair(x1: np.ndarray, x2: np.ndarray, plda: PldaParams) -> float:
    """Two-covariance same/different-speaker LLR for one pair."""
    t = plda.sigma_b2 + plda.sigma_w2
    b = plda.sigma_b2
    d = x1.shape[0]
    sq = float(np.dot(x1, x1) + np.dot(x2, x2))
    cross = float(np.dot(x1, x2))
    det_ratio = (t * t - b * b) / (t * t)
    return (
        -0.5 * d * math.log(det_ratio)
        - (t * sq - 2.0 * b * cross) / (2.0 * (t * t - b * b))
        + sq / (2.0 * t)
    )


def similarity_matrix(
    embeddings: EmbeddingSet, metric: str = "cosine", plda: PldaParams | None = None
) -> np.ndarray:
    """Symmetric N x N similarity matrix under cosine or PLDA-LLR."""
    x = np.array([e.vector for e in embeddings.items], dtype=np.float64)
    if metric == "cosine":
        norms = np.linalg.norm(x, axis=1)
        if np.any(norms == 0):
            bad = embeddings.items[int(np.flatnonzero(norms == 0)[0])].id
            raise ValueError(f"embedding {bad!r} is a zero vector")
        u = x / norms[:, None]
        sim = u @ u.T
        np.clip(sim, -1.0, 1.0, out=sim)
        return sim
    if metric == "plda":
        if plda is None:
            raise ValueError("plda metric requires PldaParams")
        t = plda.sigma_b2 + plda.sigma_w2
        b = plda.sigma_b2
        d = x.shape[1]
        sq = (x * x).sum(axis=1)
        gram = x @ x.T
        pair_sq = sq[:, None] + sq[None, :]
        sim = (
            -0.5 * d * math.log((t * t - b * b) / (t * t))
            - (t * pair_sq - 2.0 * b * gram) / (2.0 * (t * t - b * b))
            + pair_sq / (2.0 * t)
        )
        return (sim + sim.T) / 2.0
    raise ValueError(f"unknown similarity metric {metric!r}")


# ---------------------------------------------------------------------------
# Agglomerative clustering (average linkage over a similarity matrix)


def _agglomerate(sim: np.ndarray, stop_threshold: float | None, stop_k: int | None):
    """Merge while the best average-linkage similarity passes the stop rule.

    Clusters are owned by the lowest original index among their members,
    so the row-major argmax gives the deterministic lowest-index tie-break.
    Returns a labels array over the original rows.
    """
    n = sim.shape[0]
    if sim.shape != (n, n):
        raise ValueError("similarity matrix must be square")
    if not np.allclose(sim, sim.T, atol=1e-10):
        raise ValueError("similarity matrix must be symmetric")
    link = sim.astype(np.float64).copy()
    active = np.ones(n, dtype=bool)
    sizes = np.ones(n)
    members: list[list[int]] = [[i] for i in range(n)]
    n_clusters = n
    target_k = 1 if stop_k is None else stop_k

    masked = link.copy()
    idx = np.arange(n)
    masked[idx, idx] = -np.inf

    while n_clusters > target_k:
        flat = int(np.argmax(masked))
        i, j = divmod(flat, n)
        best = masked[i, j]
        if best == -np.inf:
            break
        if stop_threshold is not None and best < stop_threshold:
            break
        if i > j:
            i, j = j, i
        # Average-linkage update: weighted mean of the two merged rows.
        new_row = (sizes[i] * link[i] + sizes[j] * link[j]) / (sizes[i] + sizes[j])
        link[i] = new_row
        link[:, i] = new_row
        sizes[i] += sizes[j]
        members[i].extend(members[j])
        active[j] = False
        masked[i] = new_row
        masked[:, i] = new_row
        masked[i, i] = -np.inf
        masked[j, :] = -np.inf
        masked[:, j] = -np.inf
        masked[i, ~active] = -np.inf
        masked[~active, i] = -np.inf
        n_clusters -= 1

    labels = np.empty(n, dtype=np.int64)
    next_label = 0
    for i in range(n):
        if active[i]:
            labels[members[i]] = next_label
            next_label += 1
    return labels


def _labels_to_labeling(embeddings: EmbeddingSet, labels: np.ndarray) -> Labeling:
    return Labeling({e.id: int(labels[k]) for k, e in enumerate(embeddings.items)}).compacted()


def ahc_threshold(sim: np.ndarray, threshold: float) -> np.ndarray:
    """Average-linkage AHC merging while the best pair similarity >= threshold."""
    return _agglomerate(sim, stop_threshold=threshold, stop_k=None)


def ahc_k(sim: np.ndarray, k: int) -> np.ndarray:
    """Average-linkage AHC stopped at exactly k clusters."""
    n = sim.shape[0]
    if not (1 <= k <= n):
        raise ValueError(f"k must be in [1, {n}], got {k}")
    return _agglomerate(sim, stop_threshold=None, stop_k=k)


def ahc_threshold_labeling(embeddings: EmbeddingSet, threshold: float, **kwargs) -> Labeling:
    return _labels_to_labeling(embeddings, ahc_threshold(similarity_matrix(embeddings, **kwargs), threshold))


def ahc_k_labeling(embeddings: EmbeddingSet, k: int, **kwargs) -> Labeling:
    return _labels_to_labeling(embeddings, ahc_k(similarity_matrix(embeddings, **kwargs), k))


# ---------------------------------------------------------------------------
# Bayesian HMM speaker clustering


def vbx_up_variances(embeddings: EmbeddingSet, p: PrecisionParams) -> list[float]:
    """Per-embedding observation variances: reciprocal transformed precision."""
    out = []
    for e in embeddings.items:
        mag = magnitude(e)
        r = precision_transform(mag, e.source_duration_s, p)
        if r <= 0:
            raise ValueError(f"embedding {e.id!r}: non-positive precision (zero magnitude?)")
        out.append(1.0 / r)
    return out


def _chain_slices(embeddings: EmbeddingSet) -> list[slice]:
    """Contiguous frame runs per recording; the HMM chain resets between them."""
    slices = []
    start = 0
    for k in range(1, len(embeddings) + 1):
        if (
            k == len(embeddings)
            or embeddings.items[k].recording_id != embeddings.items[start].recording_id
        ):
            slices.append(slice(start, k))
            start = k
    return slices


def _forward_backward(logem: np.ndarray, p_loop: float, chains: list[slice]):
    """Log-space forward-backward per chain.

    Transition kernel: p_loop * I + (1 - p_loop) * pi with pi uniform over
    active speakers; each chain starts from pi.  Returns responsibilities
    and the total log normalizer.
    """
    n, k = logem.shape
    log_pi = -math.log(k) * np.ones(k)
    trans = p_loop * np.eye(k) + (1.0 - p_loop) * np.full((k, k), 1.0 / k)
    log_trans = np.log(trans)
    gamma = np.empty((n, k))
    total_logz = 0.0
    for ch in chains:
        em = logem[ch]
        t_len = em.shape[0]
        log_alpha = np.empty((t_len, k))
        log_alpha[0] = log_pi + em[0]
        for t in range(1, t_len):
            log_alpha[t] = em[t] + logsumexp(log_alpha[t - 1][:, None] + log_trans, axis=0)
        log_beta = np.zeros((t_len, k))
        for t in range(t_len - 2, -1, -1):
            log_beta[t] = logsumexp(log_trans + (em[t + 1] + log_beta[t + 1])[None, :], axis=1)
        logz = float(logsumexp(log_alpha[-1]))
        post = log_alpha + log_beta - logz
        g = np.exp(post)
        g /= g.sum(axis=1, keepdims=True)
        gamma[ch] = g
        total_logz += logz
    return gamma, total_logz


def _gamma_from_labeling(embeddings: EmbeddingSet, init: Labeling) -> np.ndarray:
    ids = [e.id for e in embeddings.items]
    missing = [eid for eid in ids if eid not in init.assignment]
    if missing:
        raise ValueError(f"init labeling does not cover ids: {missing[:5]}")
    compact = init.compacted()
    k = compact.num_clusters()
    gamma = np.zeros((len(ids), k))
    for row, eid in enumerate(ids):
        gamma[row, compact[eid]] = 1.0
    return gamma


def _cap_speakers(x: np.ndarray, gamma: np.ndarray, max_speakers: int) -> np.ndarray:
    """Keep the largest clusters; reassign the rest to the nearest kept centroid."""
    k = gamma.shape[1]
    if k <= max_speakers:
        return gamma
    counts = gamma.sum(axis=0)
    keep = np.sort(np.argsort(-counts, kind="stable")[:max_speakers])
    centroids = np.stack([x[gamma[:, s] > 0.5].mean(axis=0) for s in keep])
    cnorm = centroids / np.maximum(np.linalg.norm(centroids, axis=1, keepdims=True), 1e-12)
    out = np.zeros((gamma.shape[0], max_speakers))
    keep_pos = {int(s): i for i, s in enumerate(keep)}
    xnorm = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    for row in range(gamma.shape[0]):
        s = int(np.argmax(gamma[row]))
        if s in keep_pos:
            out[row, keep_pos[s]] = 1.0
        else:
            out[row, int(np.argmax(cnorm @ xnorm[row]))] = 1.0
    return out


def vbx_cluster(
    embeddings: EmbeddingSet,
    init: Labeling,
    plda: PldaParams,
    cfg: VbxConfig = VbxConfig(),
    variances: list[float] | None = None,
) -> tuple[Labeling, VbxState]:
    """Refine an initial labeling with variational Bayes HMM inference.

    ``variances`` (one non-negative value per embedding, in set order) widens
    each segment's observation variance; omitting it is identical to passing
    zeros.  Inference stops when the ELBO's relative change falls below
    ``cfg.elbo_rel_tol`` or after ``cfg.max_iters`` iterations.
    """
    n = len(embeddings)
    if n == 0:
        raise ValueError("cannot cluster an empty EmbeddingSet")
    x = np.array([e.vector for e in embeddings.items], dtype=np.float64)
    d = x.shape[1]
    if variances is None:
        var = np.zeros(n)
    else:
        var = np.asarray(variances, dtype=np.float64)
        if var.shape != (n,):
            raise ValueError("variances must align with the embedding set order")
        if np.any(var < 0):
            raise ValueError("variances must be non-negative")
    sigma_t2 = plda.sigma_w2 + var  # per-segment widened within variance
    chains = _chain_slices(embeddings)

    gamma = _gamma_from_labeling(embeddings, init)
    gamma = _cap_speakers(x, gamma, cfg.max_speakers)
    ratio = cfg.f_a / cfg.f_b

    elbo_trace: list[float] = []
    alpha = np.zeros((gamma.shape[1], d))
    lam = np.ones(gamma.shape[1])
    for _ in range(cfg.max_iters):
        k = gamma.shape[1]
        # (a) speaker posterior update (spherical conjugate Gaussian)
        wts = gamma / sigma_t2[:, None]  # N x K, gamma_ts / (sigma_w2 + sigma_i2)
        lam = 1.0 / plda.sigma_b2 + ratio * wts.sum(axis=0)
        alpha = (ratio / lam)[:, None] * (wts.T @ x)

        # (b) expected log-emission under the speaker posteriors
        d2 = ((x * x).sum(axis=1)[:, None] - 2.0 * x @ alpha.T
              + (alpha * alpha).sum(axis=1)[None, :])
        logem = cfg.f_a * (
            -0.5 * d * np.log(2.0 * math.pi * sigma_t2)[:, None]
            - d2 / (2.0 * sigma_t2[:, None])
            - d / (2.0 * lam[None, :] * sigma_t2[:, None])
        )

        # (c) responsibilities via forward-backward
        gamma, logz = _forward_backward(logem, cfg.p_loop, chains)

        # ELBO: HMM log-normalizer minus the speaker-posterior KL to the prior
        kl = 0.5 * (
            d / (lam * plda.sigma_b2)
            + (alpha * alpha).sum(axis=1) / plda.sigma_b2
            - d
            + d * np.log(lam * plda.sigma_b2)
        )
        elbo_trace.append(logz - ratio * float(kl.sum()))

        # (d) drop weak speakers and renormalize
        if cfg.min_cluster_mass > 0 and k > 1:
            mass = gamma.sum(axis=0)
            keep = mass >= cfg.min_cluster_mass
            if not keep.any():
                keep[int(np.argmax(mass))] = True
            if not keep.all():
                gamma = gamma[:, keep]
                gamma = gamma / gamma.sum(axis=1, keepdims=True)
                alpha = alpha[keep]
                lam = lam[keep]

        if len(elbo_trace) >= 2:
            prev, cur = elbo_trace[-2], elbo_trace[-1]
            if abs(cur - prev) <= cfg.elbo_rel_tol * max(abs(prev), 1e-12):
                break

    labels = np.argmax(gamma, axis=1)
    labeling = _labels_to_labeling(embeddings, labels)
    state = VbxState(
        speaker_means=alpha,
        speaker_precisions=lam,
        responsibilities=gamma,
        elbo_trace=elbo_trace,
    )
    return labeling, state


# ---------------------------------------------------------------------------
# PLDA estimation and config I/O


def fit_plda_spherical(x: np.ndarray, labels: np.ndarray) -> PldaParams:
    """One-shot method-of-moments fit of the spherical two-covariance model.

    The global variance splits into the variance of per-speaker means
    (between) and the average within-speaker variance, both pooled over
    dimensions.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise ValueError("need at least two speakers to fit PLDA")
    means = np.stack([x[labels == s].mean(axis=0) for s in uniq])
    grand = x.mean(axis=0)
    sigma_b2 = float(((means - grand) ** 2).sum(axis=1).mean() / x.shape[1])
    within = 0.0
    total = 0
    for s, mu in zip(uniq, means):
        xs = x[labels == s]
        within += float(((xs - mu) ** 2).sum())
        total += xs.shape[0]
    sigma_w2 = within / (total * x.shape[1])
    if sigma_w2 <= 0 or sigma_b2 <= 0:
        raise ValueError("degenerate data: zero between or within variance")
    return PldaParams(sigma_b2=sigma_b2, sigma_w2=sigma_w2)


_VBX_KEYS = {
    "p_loop": float, "f_a": float, "f_b": float, "max_speakers": int,
    "max_iters": int, "elbo_rel_tol": float, "min_cluster_mass": float,
}


def read_backend_config(text: str) -> tuple[VbxConfig, PldaParams | None]:
    """Key-value config for the HMM back-end, optionally with PLDA variances."""
    values: dict[str, float] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) != 2:
            raise ParseError(f"line {lineno}: expected 'key value'")
        try:
            values[parts[0]] = float(parts[1])
        except ValueError as exc:
            raise ParseError(f"line {lineno}: malformed value: {exc}") from exc
    cfg = VbxConfig()
    kwargs = {}
    for key, conv in _VBX_KEYS.items():
        if key in values:
            kwargs[key] = conv(values.pop(key))
    if kwargs:
        cfg = replace(cfg, **kwargs)
    plda = None
    if "sigma_b2" in values or "sigma_w2" in values:
        try:
            plda = PldaParams(values.pop("sigma_b2"), values.pop("sigma_w2"))
        except KeyError as exc:
            raise ParseError(f"both sigma_b2 and sigma_w2 are required: missing {exc}") from exc
    if values:
        raise ParseError(f"unknown config keys: {sorted(values)}")
    return cfg, plda


def write_backend_config(cfg: VbxConfig, plda: PldaParams | None = None) -> str:
    lines = [
        f"p_loop {cfg.p_loop!r}",
        f"f_a {cfg.f_a!r}",
        f"f_b {cfg.f_b!r}",
        f"max_speakers {cfg.max_speakers}",
        f"max_iters {cfg.max_iters}",
        f"elbo_rel_tol {cfg.elbo_rel_tol!r}",
        f"min_cluster_mass {cfg.min_cluster_mass!r}",
    ]
    if plda is not None:
        lines += [f"sigma_b2 {plda.sigma_b2!r}", f"sigma_w2 {plda.sigma_w2!r}"]
    return "".join(line + "\n" for line in lines)
