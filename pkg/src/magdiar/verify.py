"""Verification scoring back-ends and detection metrics.

Two trial scorers are provided: plain cosine similarity, and the
log-likelihood ratio between Gaussian likelihoods whose isotropic precision
comes from the (transformed) embedding magnitude.  For natural parameters
a_i = r_i * unit_direction_i and a standard-normal prior, the LLR is

    1/2 ||a1+a2||^2 / (r1+r2+1) - 1/2 ||a1||^2 / (r1+1)
    - 1/2 ||a2||^2 / (r2+1) + d/2 log[(r1+1)(r2+1) / (r1+r2+1)]

which is a shifted and scaled cosine similarity for fixed precisions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Embedding, EmbeddingSet, Trial, TrialList
from .quality import PrecisionParams, magnitude, precision_transform


@dataclass(frozen=True)
class GmeEmbedding:
    """Unit direction plus a positive scalar precision."""

    direction: tuple[float, ...]
    precision: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("direction must be unit length")
        if not (self.precision > 0):
            raise ValueError("precision must be positive")
        object.__setattr__(self, "direction", tuple(float(v) for v in d))

    @property
    def natural_param(self) -> np.ndarray:
        return self.precision * np.asarray(self.direction)


@dataclass(frozen=True)
class VerificationReport:
    eer: float
    min_dcf: float
    n_target: int
    n_nontarget: int

    def __post_init__(self):
        if self.n_target <= 0 or self.n_nontarget <= 0:
            raise ValueError("a defined report needs both target and nontarget trials")


def cosine_score(e1: Embedding, e2: Embedding) -> float:
    """Inner product of length-normalized vectors."""
    v1 = np.asarray(e1.vector)
    v2 = np.asarray(e2.vector)
    n1, n2 = np.linalg.norm(v1), np.linalg.norm(v2)
    if n1 == 0 or n2 == 0:
        raise ValueError("cosine score undefined for a zero vector")
    return float(np.dot(v1, v2) / (n1 * n2))


def to_gme(e: Embedding, p: PrecisionParams) -> GmeEmbedding:
    """Factor an embedding into direction and transformed-magnitude precision."""
    v = np.asarray(e.vector)
    norm = float(np.linalg.norm(v))
    if norm == 0:
        raise ValueError(f"embedding {e.id!r} has zero magnitude")
    r = precision_transform(norm, e.source_duration_s, p)
    return GmeEmbedding(direction=tuple(v / norm), precision=r)


def gme_llr(g1: GmeEmbedding, g2: GmeEmbedding) -> float:
    """Closed-form same-vs-different speaker LLR for two Gaussian likelihoods."""
    if len(g1.direction) != len(g2.direction):
        raise ValueError("dimension mismatch between GME embeddings")
    a1, a2 = g1.natural_param, g2.natural_param
    r1, r2 = g1.precision, g2.precision
    d = len(g1.direction)
    both = a1 + a2
    # per-side terms are combined smallest-first so swapping the arguments
    # reproduces the identical float
    side_lo, side_hi = sorted(
        (0.5 * float(np.dot(a1, a1)) / (r1 + 1), 0.5 * float(np.dot(a2, a2)) / (r2 + 1))
    )
    return float(
        0.5 * float(np.dot(both, both)) / (r1 + r2 + 1)
        - side_lo
        - side_hi
        + 0.5 * d * math.log((r1 + 1) * (r2 + 1) / (r1 + r2 + 1))
    )


def score_trials(
    embeddings: EmbeddingSet,
    trials: TrialList,
    backend: str = "cosine",
    precision: PrecisionParams | None = None,
) -> list[tuple[Trial, float]]:
    """Score every trial in input order with the chosen backend.

    backend "cosine" needs no parameters; backend "gme" converts both sides
    with ``precision`` and scores with the closed-form LLR.
    """
    index = embeddings.id_index()
    missing = [
        tid
        for t in trials
        for tid in (t.enroll_id, t.test_id)
        if tid not in index
    ]
    if missing:
        raise ValueError(f"trial ids not found in embedding set: {sorted(set(missing))}")

    if backend == "cosine":
        return [(t, cosine_score(index[t.enroll_id], index[t.test_id])) for t in trials]
    if backend == "gme":
        if precision is None:
            raise ValueError("gme backend requires PrecisionParams")
        gme = {eid: to_gme(e, precision) for eid, e in index.items()}
        return [(t, gme_llr(gme[t.enroll_id], gme[t.test_id])) for t in trials]
    raise ValueError(f"unknown backend {backend!r}")


def _sweep_thresholds(scores: np.ndarray) -> np.ndarray:
    """Midpoints between consecutive distinct scores, bracketed by the extremes."""
    uniq = np.unique(scores)
    mids = (uniq[:-1] + uniq[1:]) / 2.0
    return np.concatenate(([uniq[0] - 1.0], mids, [uniq[-1] + 1.0]))


def _error_rates(scores_target, scores_nontarget):
    tar = np.asarray(scores_target, dtype=np.float64)
    non = np.asarray(scores_nontarget, dtype=np.float64)
    if tar.size == 0 or non.size == 0:
        raise ValueError("both target and nontarget scores are required")
    if not (np.isfinite(tar).all() and np.isfinite(non).all()):
        raise ValueError("scores must be finite")
    thr = _sweep_thresholds(np.concatenate([tar, non]))
    miss = np.searchsorted(np.sort(tar), thr, side="left") / tar.size
    fa = 1.0 - np.searchsorted(np.sort(non), thr, side="left") / non.size
    return miss, fa


def eer(scores_target, scores_nontarget) -> float:
    """Equal error rate via exhaustive midpoint sweep with linear interpolation."""
    miss, fa = _error_rates(scores_target, scores_nontarget)
    diff = miss - fa
    k = int(np.flatnonzero(diff >= 0)[0])  # miss starts at 0, fa ends at 0
    if diff[k] == 0 or k == 0:
        return float(miss[k])
    m0, f0, m1, f1 = miss[k - 1], fa[k - 1], miss[k], fa[k]
    t = (f0 - m0) / ((f0 - m0) - (f1 - m1))
    return float(m0 + t * (m1 - m0))


def min_dcf(scores_target, scores_nontarget, p_target: float = 0.01) -> float:
    """Minimum normalized detection cost with unit miss/false-alarm costs."""
    if not (0 < p_target < 1):
        raise ValueError("p_target must be in (0, 1)")
    miss, fa = _error_rates(scores_target, scores_nontarget)
    cost = p_target * miss + (1 - p_target) * fa
    return float(cost.min() / min(p_target, 1 - p_target))


def verification_report(
    scored: list[tuple[Trial, float]], p_target: float = 0.01
) -> VerificationReport:
    tar = [s for t, s in scored if t.is_target]
    non = [s for t, s in scored if not t.is_target]
    return VerificationReport(
        eer=eer(tar, non),
        min_dcf=min_dcf(tar, non, p_target),
        n_target=len(tar),
        n_nontarget=len(non),
    )


def trial_confidences(embeddings: EmbeddingSet, trials: TrialList) -> np.ndarray:
    """Per-trial confidence: sum of the two raw embedding magnitudes."""
    index = embeddings.id_index()
    return np.array(
        [magnitude(index[t.enroll_id]) + magnitude(index[t.test_id]) for t in trials]
    )


def rejection_curve(
    embeddings: EmbeddingSet,
    trials: TrialList,
    backend: str = "cosine",
    precision: PrecisionParams | None = None,
    fractions=(0.0, 0.1, 0.2),
) -> list[tuple[float, float | None]]:
    """EER after discarding the lowest-confidence fraction of trials.

    For each fraction f, the floor(f * n) trials with the smallest
    magnitude-sum confidence are dropped (ties broken by stable input
    order).  A point whose remainder lacks targets or nontargets is
    reported as (f, None) rather than raising.
    """
    fractions = list(fractions)
    if any(not (0 <= f < 1) for f in fractions):
        raise ValueError("fractions must lie in [0, 1)")
    if sorted(fractions) != fractions:
        raise ValueError("fractions must be sorted ascending")
    scored = score_trials(embeddings, trials, backend, precision)
    conf = trial_confidences(embeddings, trials)
    order = np.argsort(conf, kind="stable")  # ascending confidence
    n = len(scored)
    out: list[tuple[float, float | None]] = []
    for f in fractions:
        keep = set(order[int(math.floor(f * n)):].tolist())
        kept = [scored[i] for i in range(n) if i in keep]
        tar = [s for t, s in kept if t.is_target]
        non = [s for t, s in kept if not t.is_target]
        if not tar or not non:
            out.append((f, None))
        else:
            out.append((f, eer(tar, non)))
    return out


def write_scores(scored: list[tuple[Trial, float]]) -> str:
    return "".join(f"{t.enroll_id} {t.test_id} {s:.6f}\n" for t, s in scored)
