"""Seeded synthetic meetings and trial lists with quality-correlated magnitudes.

Speaker centers sit on a sphere of radius 60 (mid-range of the 10-110
magnitude scale); degraded segments receive extra directional noise and a
low magnitude in [10, 30], clean ones a high magnitude in [70, 110], so the
magnitude carries the quality signal the two-step and GME back-ends rely on.

All randomness comes from numpy's default PCG64 generator seeded per call,
so equal seeds give bit-identical outputs on every platform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Annotation, Embedding, EmbeddingSet, Timeline, Trial, TrialList, Turn
from .pipeline import uniform_segments

CENTER_RADIUS = 60.0
CLEAN_MAG_RANGE = (70.0, 110.0)
DEGRADED_MAG_RANGE = (10.0, 30.0)
OSD_HALF_WIDTH_S = 0.25
OSD_BOUNDARY_PROB = 0.2


@dataclass(frozen=True)
class SynthSpec:
    n_speakers: int = 3
    dim: int = 16
    n_segments: int = 200
    turn_len_s: float = 4.0
    within_std: float = 5.0
    noise_fraction: float = 0.3
    noise_std: float = 60.0
    seed: int = 0

    def __post_init__(self):
        if self.n_speakers < 1 or self.dim < 2 or self.n_segments < 1:
            raise ValueError("n_speakers >= 1, dim >= 2, n_segments >= 1 required")
        if not (self.turn_len_s > 0 and self.within_std > 0 and self.noise_std >= 0):
            raise ValueError("turn_len_s and within_std must be positive")
        if not (0 <= self.noise_fraction <= 1):
            raise ValueError("noise_fraction must be in [0, 1]")


@dataclass(frozen=True)
class TrialSpec:
    n_speakers: int = 20
    dim: int = 16
    per_speaker: int = 6
    n_target: int = 300
    n_nontarget: int = 300
    degraded_fraction: float = 0.2
    within_std: float = 5.0
    noise_std: float = 60.0
    seed: int = 0

    def __post_init__(self):
        if self.n_speakers < 2 or self.per_speaker < 2:
            raise ValueError("need >= 2 speakers with >= 2 utterances each")
        if not (0 <= self.degraded_fraction <= 1):
            raise ValueError("degraded_fraction must be in [0, 1]")


def _sphere_points(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    pts = rng.standard_normal((n, dim))
    return pts / np.linalg.norm(pts, axis=1, keepdims=True) * CENTER_RADIUS


def _rescale(v: np.ndarray, target_mag: float) -> np.ndarray:
    return v * (target_mag / np.linalg.norm(v))


def generate_meeting(
    spec: SynthSpec, recording_id: str = "synth"
) -> tuple[EmbeddingSet, Annotation, Timeline]:
    """One synthetic meeting: embeddings, reference turns, and OSD regions.

    Reference turns coincide with the extent actually covered by segments,
    so a perfect labeling scores zero DER.  A fraction of different-speaker
    turn boundaries becomes a short two-speaker overlap: both reference
    turns extend across it and the OSD timeline marks it.
    """
    rng = np.random.default_rng(spec.seed)
    centers = _sphere_points(rng, spec.n_speakers, spec.dim)

    # Turn sequence; each turn is segmented like the real pipeline would.
    turns: list[tuple[int, float, float]] = []  # (speaker, nominal_start, covered_end)
    segments: list[tuple[int, float, float]] = []  # (speaker, start, end)
    t = 0.0
    spk = int(rng.integers(spec.n_speakers))
    while len(segments) < spec.n_segments:
        if spec.n_speakers > 1 and turns:
            step = int(rng.integers(1, spec.n_speakers))
            spk = (spk + step) % spec.n_speakers
        dur = float(rng.uniform(0.6, 1.4) * spec.turn_len_s)
        windows = uniform_segments(Timeline(recording_id, ((t, t + dur),)))
        covered_end = max(e for _, e in windows)
        turns.append((spk, t, covered_end))
        segments.extend((spk, a, b) for a, b in windows)
        t += dur

    # Overlap regions at a fraction of different-speaker boundaries.
    ref_turns = [Turn(recording_id, f"spk{s}", a, b) for s, a, b in turns]
    osd_intervals: list[tuple[float, float]] = []
    d = OSD_HALF_WIDTH_S
    for prev, cur in zip(turns[:-1], turns[1:]):
        boundary = cur[1]
        long_enough = (boundary - d) > prev[1] and (boundary + d) < cur[2]
        if prev[0] != cur[0] and long_enough and rng.random() < OSD_BOUNDARY_PROB:
            osd_intervals.append((boundary - d, boundary + d))
            ref_turns.append(Turn(recording_id, f"spk{prev[0]}", boundary - d, boundary + d))
            ref_turns.append(Turn(recording_id, f"spk{cur[0]}", boundary - d, boundary + d))

    # Embedding vectors with quality-coded magnitudes.
    n = len(segments)
    degraded = rng.random(n) < spec.noise_fraction
    items = []
    for k, (s, a, b) in enumerate(segments):
        vec = centers[s] + spec.within_std * rng.standard_normal(spec.dim)
        if degraded[k]:
            vec = vec + spec.noise_std * rng.standard_normal(spec.dim)
            mag = rng.uniform(*DEGRADED_MAG_RANGE)
        else:
            mag = rng.uniform(*CLEAN_MAG_RANGE)
        items.append(
            Embedding(
                id=f"{recording_id}-{k:04d}",
                recording_id=recording_id,
                start_s=a,
                end_s=b,
                source_duration_s=b - a,
                vector=tuple(_rescale(vec, mag)),
            )
        )
    return (
        EmbeddingSet.from_items(items),
        Annotation(tuple(ref_turns)),
        Timeline(recording_id, tuple(osd_intervals)),
    )


def perfect_labeling(embeddings: EmbeddingSet, ref: Annotation) -> dict[str, int]:
    """Ground-truth labels for synthetic segments (by generating speaker)."""
    speakers = sorted(ref.speakers())
    spk_index = {s: i for i, s in enumerate(speakers)}
    out = {}
    for e in embeddings.items:
        # the generating turn covers the whole segment; overlap extensions are
        # shorter than any segment, so maximum intersection identifies it
        best = max(
            ref.turns,
            key=lambda t: min(t.end_s, e.end_s) - max(t.start_s, e.start_s),
        )
        out[e.id] = spk_index[best.speaker]
    return out


def generate_trials(spec: TrialSpec) -> tuple[EmbeddingSet, TrialList]:
    """Verification trials over synthetic utterances of varying quality.

    A degraded utterance draws a severity in (0, 1] that scales its
    directional noise and maps linearly onto the low-magnitude band (most
    severe -> magnitude 10), so the magnitude-sum trial confidence and the
    magnitude-derived precisions both track reliability, inside the degraded
    class as well as across classes.  Degraded sources are also shorter.
    """
    rng = np.random.default_rng(spec.seed)
    centers = _sphere_points(rng, spec.n_speakers, spec.dim)
    lo, hi = DEGRADED_MAG_RANGE
    items = []
    ids: list[list[str]] = []
    for s in range(spec.n_speakers):
        ids.append([])
        for u in range(spec.per_speaker):
            vec = centers[s] + spec.within_std * rng.standard_normal(spec.dim)
            if rng.random() < spec.degraded_fraction:
                severity = rng.uniform(0.0, 1.0)
                vec = vec + severity * spec.noise_std * rng.standard_normal(spec.dim)
                mag = hi - (hi - lo) * severity
                dur = float(rng.uniform(0.5, 3.0))
            else:
                mag = rng.uniform(*CLEAN_MAG_RANGE)
                dur = float(rng.uniform(4.0, 12.0))
            eid = f"spk{s:03d}-u{u}"
            ids[s].append(eid)
            items.append(
                Embedding(
                    id=eid,
                    recording_id=eid,
                    start_s=0.0,
                    end_s=dur,
                    source_duration_s=dur,
                    vector=tuple(_rescale(vec, mag)),
                )
            )

    trials = []
    for _ in range(spec.n_target):
        s = int(rng.integers(spec.n_speakers))
        u1, u2 = rng.choice(spec.per_speaker, size=2, replace=False)
        trials.append(Trial(ids[s][u1], ids[s][u2], True))
    for _ in range(spec.n_nontarget):
        s1, s2 = rng.choice(spec.n_speakers, size=2, replace=False)
        trials.append(
            Trial(
                ids[s1][int(rng.integers(spec.per_speaker))],
                ids[s2][int(rng.integers(spec.per_speaker))],
                False,
            )
        )
    return EmbeddingSet.from_items(items), TrialList(tuple(trials))
