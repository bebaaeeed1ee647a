"""Diarization scoring: DER with collar/overlap options, and JER.

All boundary arithmetic runs on integer microseconds so region subtraction
and per-instant counting are exact.  The speaker mapping maximizes the
total duration of correctly attributed speech via exact assignment; DER
computes it within the scored regions, JER always maps on the full,
collar-free, overlap-included timelines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import Annotation

_US = 1_000_000


def _us(t: float) -> int:
    return round(t * _US)


@dataclass(frozen=True)
class DiarizationReport:
    der: float
    miss_s: float
    fa_s: float
    confusion_s: float
    total_ref_s: float
    jer: float = math.nan
    per_speaker_jer: dict[str, float] = field(default_factory=dict)

    @property
    def error_s(self) -> float:
        return self.miss_s + self.fa_s + self.confusion_s


def _speaker_intervals(ann: Annotation) -> dict[str, list[tuple[int, int]]]:
    out: dict[str, list[tuple[int, int]]] = {}
    for t in ann.turns:
        out.setdefault(t.speaker, []).append((_us(t.start_s), _us(t.end_s)))
    for ivals in out.values():
        ivals.sort()
    return out


def _overlap_us(a: list[tuple[int, int]], b: list[tuple[int, int]]) -> int:
    total = 0
    i = j = 0
    while i < len(a) and j < len(b):
        lo = max(a[i][0], b[j][0])
        hi = min(a[i][1], b[j][1])
        if hi > lo:
            total += hi - lo
        if a[i][1] <= b[j][1]:
            i += 1
        else:
            j += 1
    return total


def _union_us(a: list[tuple[int, int]], b: list[tuple[int, int]]) -> int:
    merged = sorted(a + b)
    total = 0
    cur_s = cur_e = None
    for s, e in merged:
        if cur_e is None or s > cur_e:
            if cur_e is not None:
                total += cur_e - cur_s
            cur_s, cur_e = s, e
        else:
            cur_e = max(cur_e, e)
    if cur_e is not None:
        total += cur_e - cur_s
    return total


def _assignment_from_overlaps(
    ref_spk: list[str], hyp_spk: list[str], overlap: np.ndarray
) -> dict[str, str]:
    """One-to-one partial hyp -> ref map maximizing total overlap duration."""
    if not ref_spk or not hyp_spk:
        return {}
    rows, cols = linear_sum_assignment(-overlap)
    return {
        hyp_spk[c]: ref_spk[r]
        for r, c in zip(rows, cols)
        if overlap[r, c] > 0
    }


def optimal_mapping(ref: Annotation, hyp: Annotation) -> dict[str, str]:
    """Map hypothesis speakers to reference speakers of a single recording."""
    recs = set(ref.recording_ids()) | set(hyp.recording_ids())
    if len(recs) > 1:
        raise ValueError("optimal_mapping expects a single recording; iterate per recording")
    ref_iv = _speaker_intervals(ref)
    hyp_iv = _speaker_intervals(hyp)
    ref_spk = sorted(ref_iv)
    hyp_spk = sorted(hyp_iv)
    overlap = np.array(
        [[_overlap_us(ref_iv[r], hyp_iv[h]) for h in hyp_spk] for r in ref_spk],
        dtype=np.float64,
    ).reshape(len(ref_spk), len(hyp_spk))
    return _assignment_from_overlaps(ref_spk, hyp_spk, overlap)


def _elementary_intervals(ref: Annotation, hyp: Annotation, collar_us: int,
                          include_overlap: bool):
    """Scored elementary intervals with active reference/hypothesis speakers.

    Yields (duration_us, active_ref_speakers, active_hyp_speakers) for each
    elementary interval that survives collar and overlap exclusion.
    """
    ref_iv = _speaker_intervals(ref)
    hyp_iv = _speaker_intervals(hyp)

    points = set()
    for ivals in list(ref_iv.values()) + list(hyp_iv.values()):
        for s, e in ivals:
            points.update((s, e))
    excluded: list[tuple[int, int]] = []
    if collar_us > 0:
        for ivals in ref_iv.values():
            for s, e in ivals:
                excluded.append((s - collar_us, s + collar_us))
                excluded.append((e - collar_us, e + collar_us))
    if not include_overlap:
        edges = []
        for ivals in ref_iv.values():
            for s, e in ivals:
                edges.append((s, 1))
                edges.append((e, -1))
        edges.sort()
        depth = 0
        ov_start = None
        for p, delta in edges:
            depth += delta
            if depth >= 2 and ov_start is None:
                ov_start = p
            elif depth < 2 and ov_start is not None:
                if p > ov_start:
                    excluded.append((ov_start, p))
                ov_start = None
    for s, e in excluded:
        points.update((s, e))

    pts = sorted(points)
    out = []
    for a, b in zip(pts[:-1], pts[1:]):
        # exclusion boundaries are split points, so each elementary interval
        # is entirely in or out of every excluded region
        if any(s <= a and b <= e for s, e in excluded):
            continue
        active_ref = [spk for spk, ivals in ref_iv.items()
                      if any(s <= a and b <= e for s, e in ivals)]
        active_hyp = [spk for spk, ivals in hyp_iv.items()
                      if any(s <= a and b <= e for s, e in ivals)]
        if active_ref or active_hyp:
            out.append((b - a, active_ref, active_hyp))
    return out


def der(
    ref: Annotation,
    hyp: Annotation,
    collar_s: float = 0.0,
    include_overlap: bool = True,
) -> DiarizationReport:
    """Diarization error rate with a forgiveness collar and overlap control.

    Scoring excludes +-collar_s around every reference turn boundary and,
    when include_overlap is False, the regions where two or more reference
    speakers are active.  A zero scored reference duration yields a report
    whose DER is NaN.
    """
    collar_us = _us(collar_s)
    miss = fa = conf = total_ref = 0
    recs = sorted(set(ref.recording_ids()) | set(hyp.recording_ids()))
    for rec in recs:
        ref_r = ref.for_recording(rec)
        hyp_r = hyp.for_recording(rec)
        cells = _elementary_intervals(ref_r, hyp_r, collar_us, include_overlap)

        # mapping maximizes correctly attributed time within scored regions
        ref_spk = sorted({s for _, rs, _ in cells for s in rs})
        hyp_spk = sorted({s for _, _, hs in cells for s in hs})
        overlap = np.zeros((len(ref_spk), len(hyp_spk)))
        r_idx = {s: i for i, s in enumerate(ref_spk)}
        h_idx = {s: i for i, s in enumerate(hyp_spk)}
        for dur, rs, hs in cells:
            for s in rs:
                for h in hs:
                    overlap[r_idx[s], h_idx[h]] += dur
        mapping = _assignment_from_overlaps(ref_spk, hyp_spk, overlap)

        for dur, rs, hs in cells:
            n_ref, n_hyp = len(rs), len(hs)
            correct = sum(1 for h in hs if mapping.get(h) in rs)
            total_ref += n_ref * dur
            miss += max(0, n_ref - n_hyp) * dur
            fa += max(0, n_hyp - n_ref) * dur
            conf += (min(n_ref, n_hyp) - correct) * dur

    total_ref_s = total_ref / _US
    error_s = (miss + fa + conf) / _US
    return DiarizationReport(
        der=(error_s / total_ref_s) if total_ref > 0 else math.nan,
        miss_s=miss / _US,
        fa_s=fa / _US,
        confusion_s=conf / _US,
        total_ref_s=total_ref_s,
    )


def jer(ref: Annotation, hyp: Annotation) -> tuple[float, dict[str, float]]:
    """Jaccard error rate: mean over reference speakers of 1 - |I| / |U|.

    Reference speakers left unmapped score 1.  The mapping is the
    duration-maximizing assignment on full timelines (no collar, overlaps
    included).  An empty reference yields NaN.
    """
    per_speaker: dict[str, float] = {}
    recs = sorted(set(ref.recording_ids()) | set(hyp.recording_ids()))
    for rec in recs:
        ref_r = ref.for_recording(rec)
        hyp_r = hyp.for_recording(rec)
        mapping = optimal_mapping(ref_r, hyp_r)
        inverse = {r: h for h, r in mapping.items()}
        ref_iv = _speaker_intervals(ref_r)
        hyp_iv = _speaker_intervals(hyp_r)
        for spk, ivals in ref_iv.items():
            key = f"{rec}/{spk}" if len(recs) > 1 else spk
            if spk not in inverse:
                per_speaker[key] = 1.0
                continue
            hyp_ivals = hyp_iv[inverse[spk]]
            inter = _overlap_us(ivals, hyp_ivals)
            union = _union_us(ivals, hyp_ivals)
            per_speaker[key] = 1.0 - inter / union if union > 0 else 1.0
    if not per_speaker:
        return math.nan, {}
    return float(np.mean(list(per_speaker.values()))), per_speaker


def evaluate(
    ref: Annotation,
    hyp: Annotation,
    collar_s: float = 0.0,
    include_overlap: bool = True,
) -> DiarizationReport:
    """DER and JER in one combined report (as printed by the score command)."""
    base = der(ref, hyp, collar_s, include_overlap)
    j, per = jer(ref, hyp)
    return DiarizationReport(
        der=base.der,
        miss_s=base.miss_s,
        fa_s=base.fa_s,
        confusion_s=base.confusion_s,
        total_ref_s=base.total_ref_s,
        jer=j,
        per_speaker_jer=per,
    )
