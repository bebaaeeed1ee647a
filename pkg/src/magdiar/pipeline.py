"""Diarization orchestration: segmentation, two-step clustering, post-processing.

The two-step wrapper clusters the high-magnitude (reliable) split first to
fix the number and location of speakers, then handles the rest per variant:
assign to the nearest centroid, re-cluster everything with the fixed count,
or re-cluster only the remainder and vote labels back.  VAD and OSD regions
are inputs; detectors are out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Annotation, EmbeddingSet, Labeling, Timeline, Turn
from .cluster import (
    PldaParams,
    VbxConfig,
    ahc_k,
    ahc_threshold,
    similarity_matrix,
    vbx_cluster,
    vbx_up_variances,
    _labels_to_labeling,
)
from .quality import PrecisionParams, split_by_percentile

VARIANT_CENTROID_ASSIGN = "centroid_assign"  # 2.1
VARIANT_REFIT_ALL = "refit_all"  # 2.2
VARIANT_REFIT_REMAINING = "refit_remaining"  # 2.3
_VARIANTS = (VARIANT_CENTROID_ASSIGN, VARIANT_REFIT_ALL, VARIANT_REFIT_REMAINING)


@dataclass(frozen=True)
class AhcBase:
    """AHC base clusterer: threshold-stopped, or fixed-k in step two."""

    threshold: float
    metric: str = "cosine"
    plda: PldaParams | None = None

    def cluster(self, embeddings: EmbeddingSet) -> Labeling:
        sim = similarity_matrix(embeddings, self.metric, plda=self.plda)
        return _labels_to_labeling(embeddings, ahc_threshold(sim, self.threshold))

    def cluster_k(self, embeddings: EmbeddingSet, k: int) -> Labeling:
        sim = similarity_matrix(embeddings, self.metric, plda=self.plda)
        return _labels_to_labeling(embeddings, ahc_k(sim, min(k, len(embeddings))))


@dataclass(frozen=True)
class VbxBase:
    """Bayesian-HMM base clusterer, initialized from an AHC pass.

    With ``up`` set, per-segment variances come from the magnitude-derived
    precisions under ``precision``.
    """

    vbx: VbxConfig
    plda: PldaParams
    init_threshold: float
    up: bool = False
    precision: PrecisionParams | None = None
    init_metric: str = "cosine"

    def __post_init__(self):
        if self.up and self.precision is None:
            raise ValueError("uncertainty propagation requires PrecisionParams")

    def _variances(self, embeddings: EmbeddingSet):
        if not self.up:
            return None
        return vbx_up_variances(embeddings, self.precision)

    def cluster(self, embeddings: EmbeddingSet) -> Labeling:
        sim = similarity_matrix(embeddings, self.init_metric, plda=self.plda)
        init = _labels_to_labeling(embeddings, ahc_threshold(sim, self.init_threshold))
        lab, _ = vbx_cluster(embeddings, init, self.plda, self.vbx, self._variances(embeddings))
        return lab

    def cluster_k(self, embeddings: EmbeddingSet, k: int) -> Labeling:
        k = min(k, len(embeddings))
        sim = similarity_matrix(embeddings, self.init_metric, plda=self.plda)
        init = _labels_to_labeling(embeddings, ahc_k(sim, k))
        cfg_fixed = VbxConfig(
            p_loop=self.vbx.p_loop,
            f_a=self.vbx.f_a,
            f_b=self.vbx.f_b,
            max_speakers=k,
            max_iters=self.vbx.max_iters,
            elbo_rel_tol=self.vbx.elbo_rel_tol,
            min_cluster_mass=0.0,  # fixed count: dropping disabled
        )
        lab, _ = vbx_cluster(embeddings, init, self.plda, cfg_fixed, self._variances(embeddings))
        return lab


@dataclass(frozen=True)
class TwoStepConfig:
    percentile: float
    base: AhcBase | VbxBase
    variant: str = VARIANT_CENTROID_ASSIGN

    def __post_init__(self):
        if not (0 <= self.percentile <= 100):
            raise ValueError("percentile must be in [0, 100]")
        if self.variant not in _VARIANTS:
            raise ValueError(f"variant must be one of {_VARIANTS}")


def uniform_segments(
    vad: Timeline, win_s: float = 1.5, step_s: float = 0.75
) -> list[tuple[float, float]]:
    """Fixed windows at a stride inside each VAD interval.

    Full windows are laid down while they end before the interval does; a
    shortened final window covers the tail when at least one stride of audio
    remains, and intervals shorter than the stride become a single window.
    """
    if not (win_s > step_s > 0):
        raise ValueError("need win_s > step_s > 0")
    out: list[tuple[float, float]] = []
    for a, b in vad.intervals:
        t = a
        emitted = False
        while t + win_s < b - 1e-12:
            out.append((t, t + win_s))
            t += step_s
            emitted = True
        if b - t >= step_s - 1e-12:
            out.append((t, b))
        elif not emitted:
            out.append((a, b))
    return out


def _centroids(embeddings: EmbeddingSet, lab: Labeling) -> np.ndarray:
    k = lab.num_clusters()
    d = embeddings.dim
    sums = np.zeros((k, d))
    counts = np.zeros(k)
    for e in embeddings.items:
        c = lab[e.id]
        sums[c] += np.asarray(e.vector)
        counts[c] += 1
    return sums / counts[:, None]


def _nearest_centroid(vector, centroids: np.ndarray) -> int:
    v = np.asarray(vector, dtype=np.float64)
    vn = np.linalg.norm(v)
    cn = np.linalg.norm(centroids, axis=1)
    sims = centroids @ v / np.maximum(cn * vn, 1e-300)
    return int(np.argmax(sims))


def two_step_cluster(embeddings: EmbeddingSet, cfg: TwoStepConfig) -> Labeling:
    """Quality-aware two-step clustering.

    Step one runs the base clusterer on the reliable (high-magnitude) split.
    Step two, per variant: assign remaining embeddings to the nearest step-one
    centroid by cosine; re-cluster all embeddings with the step-one cluster
    count; or re-cluster only the remainder and relabel each of its clusters
    with the dominating nearest-centroid vote of its members.  An empty
    remainder short-circuits to the step-one labels, so percentile 0
    reproduces the base clusterer exactly.
    """
    if len(embeddings) == 0:
        raise ValueError("cannot cluster an empty EmbeddingSet")
    reliable, remaining = split_by_percentile(embeddings, cfg.percentile)
    step1 = cfg.base.cluster(reliable)
    if len(remaining) == 0:
        return step1.compacted()
    k = step1.num_clusters()
    centroids = _centroids(reliable, step1.compacted())

    if cfg.variant == VARIANT_CENTROID_ASSIGN:
        step1c = step1.compacted()
        assignment = dict(step1c.assignment)
        for e in remaining.items:
            assignment[e.id] = _nearest_centroid(e.vector, centroids)
        return Labeling(assignment).compacted()

    if cfg.variant == VARIANT_REFIT_ALL:
        return cfg.base.cluster_k(embeddings, k).compacted()

    # refit_remaining: cluster the remainder with the fixed count, then vote
    step1c = step1.compacted()
    step2 = cfg.base.cluster_k(remaining, k)
    votes: dict[int, dict[int, int]] = {}
    for e in remaining.items:
        provisional = _nearest_centroid(e.vector, centroids)
        c2 = step2[e.id]
        votes.setdefault(c2, {})
        votes[c2][provisional] = votes[c2].get(provisional, 0) + 1
    relabel = {
        c2: min(tally, key=lambda lbl: (-tally[lbl], lbl))
        for c2, tally in votes.items()
    }
    assignment = dict(step1c.assignment)
    for e in remaining.items:
        assignment[e.id] = relabel[step2[e.id]]
    return Labeling(assignment).compacted()


def labels_to_annotation(lab: Labeling, embeddings: EmbeddingSet) -> Annotation:
    """Turn per-segment labels into speaker turns.

    Touching or overlapping same-label segments merge; where consecutive
    segments with different labels overlap (the stride overlap), the boundary
    sits at the midpoint of the overlapped region.  Speakers are named
    "spk<cluster id>".
    """
    missing = [e.id for e in embeddings.items if e.id not in lab.assignment]
    if missing:
        raise ValueError(f"labeling does not cover ids: {missing[:5]}")
    turns: list[Turn] = []
    for rec in embeddings.recording_ids():
        segs = [e for e in embeddings.items if e.recording_id == rec]
        cur_label = None
        cur_s = cur_e = 0.0
        for e in segs:
            label = lab[e.id]
            if cur_label is None:
                cur_label, cur_s, cur_e = label, e.start_s, e.end_s
            elif label == cur_label and e.start_s <= cur_e:
                cur_e = max(cur_e, e.end_s)
            elif label != cur_label and e.start_s < cur_e:
                # stride overlap between speakers: split at the midpoint
                boundary = max((e.start_s + cur_e) / 2.0, cur_s)
                turns.append(Turn(rec, f"spk{cur_label}", cur_s, boundary))
                cur_label, cur_s, cur_e = label, boundary, max(e.end_s, boundary)
            else:
                turns.append(Turn(rec, f"spk{cur_label}", cur_s, cur_e))
                cur_label, cur_s, cur_e = label, e.start_s, e.end_s
        if cur_label is not None:
            turns.append(Turn(rec, f"spk{cur_label}", cur_s, cur_e))
    return Annotation(tuple(turns))


def _gap(iv_a: tuple[float, float], iv_b: tuple[float, float]) -> float:
    if iv_a[1] < iv_b[0]:
        return iv_b[0] - iv_a[1]
    if iv_b[1] < iv_a[0]:
        return iv_a[0] - iv_b[1]
    return 0.0


def overlap_reassign(
    lab: Labeling, embeddings: EmbeddingSet, osd: Timeline
) -> Annotation:
    """Assign the two temporally closest speakers to each overlap region.

    For every OSD interval, each cluster's distance is the smallest gap
    between the interval and that cluster's segments (zero when they
    intersect); ties prefer the earlier segment, then the lower cluster id.
    Both winners are emitted over the full interval; a single-speaker
    recording contributes just one turn.
    """
    turns: list[Turn] = []
    rec = osd.recording_id
    segs = [e for e in embeddings.items if e.recording_id == rec]
    by_label: dict[int, list[tuple[float, float]]] = {}
    for e in segs:
        by_label.setdefault(lab[e.id], []).append((e.start_s, e.end_s))
    if not by_label:
        return Annotation(())
    for interval in osd.intervals:
        ranked = []
        for label, ivals in sorted(by_label.items()):
            best = min((_gap(iv, interval), iv[0]) for iv in ivals)
            ranked.append((best[0], best[1], label))
        ranked.sort()
        for _, _, label in ranked[:2]:
            turns.append(Turn(rec, f"spk{label}", interval[0], interval[1]))
    return Annotation(tuple(turns))


def diarize_recording(
    embeddings: EmbeddingSet,
    lab: Labeling,
    osd: Timeline | None = None,
) -> Annotation:
    """Post-process one recording's labels into the final annotation."""
    ann = labels_to_annotation(lab, embeddings)
    if osd is not None and len(osd) > 0:
        ann = ann.merged_with(overlap_reassign(lab, embeddings, osd))
    return ann
