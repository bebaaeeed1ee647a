"""Embedding-magnitude quality scores and the magnitude-to-precision transform.

The magnitude of a quality-aware embedding correlates with input quality but
drifts with recording duration, so the precision transform adds a capped
duration term before global rescaling:

    r = s * (magnitude + gamma * min(dur_cap_s, duration_s))
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import Embedding, EmbeddingSet, ParseError

DEFAULT_DURATION_CAP_S = 20.0
GAMMA_GRID = np.arange(0.0, 2.0 + 1e-9, 0.01)
DEFAULT_TARGET_MEDIAN_R = 5.0


@dataclass(frozen=True)
class PrecisionParams:
    """Parameters of the magnitude-to-precision transform."""

    s: float
    gamma: float
    dur_cap_s: float = DEFAULT_DURATION_CAP_S

    def __post_init__(self):
        if not (self.s > 0):
            raise ValueError(f"s must be positive, got {self.s}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        if not (self.dur_cap_s > 0):
            raise ValueError(f"dur_cap_s must be positive, got {self.dur_cap_s}")

    def to_text(self) -> str:
        return f"s {self.s!r}\ngamma {self.gamma!r}\ndur_cap_s {self.dur_cap_s!r}\n"

    @classmethod
    def from_text(cls, text: str) -> "PrecisionParams":
        values = {}
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
        missing = {"s", "gamma"} - set(values)
        if missing:
            raise ParseError(f"missing keys: {sorted(missing)}")
        return cls(
            s=values["s"],
            gamma=values["gamma"],
            dur_cap_s=values.get("dur_cap_s", DEFAULT_DURATION_CAP_S),
        )


RAW_PARAMS = PrecisionParams(s=1.0, gamma=0.0)
"""Identity configuration: precision equals the raw magnitude."""


def magnitude(e: Embedding) -> float:
    """Euclidean norm of the embedding vector."""
    return float(np.linalg.norm(e.vector))


def precision_transform(mag: float, duration_s: float, p: PrecisionParams) -> float:
    """Map a magnitude and source duration to a Gaussian precision."""
    if not (math.isfinite(mag) and math.isfinite(duration_s)):
        raise ValueError("magnitude and duration must be finite")
    if duration_s <= 0:
        raise ValueError(f"duration_s must be positive, got {duration_s}")
    return p.s * (mag + p.gamma * min(p.dur_cap_s, duration_s))


def adjusted_magnitude(e: Embedding, p: PrecisionParams) -> float:
    """Duration-adjusted magnitude before the global scale is applied."""
    return magnitude(e) + p.gamma * min(p.dur_cap_s, e.source_duration_s)


def split_by_percentile(
    embeddings: EmbeddingSet, percentile: float
) -> tuple[EmbeddingSet, EmbeddingSet]:
    """Split a set into (reliable, remaining) by a magnitude percentile.

    The cut value is the nearest-rank percentile of the magnitudes; elements
    with magnitude >= the cut go to ``reliable`` (ties included), the rest to
    ``remaining``.  Percentile 0 keeps everything reliable.
    """
    if not (0 <= percentile <= 100):
        raise ValueError(f"percentile must be in [0, 100], got {percentile}")
    if len(embeddings) == 0:
        raise ValueError("cannot split an empty EmbeddingSet")
    mags = np.array([magnitude(e) for e in embeddings.items])
    if percentile == 0:
        cut = mags.min()
    else:
        srt = np.sort(mags)
        rank = int(math.ceil(percentile / 100.0 * len(srt)))  # 1-based nearest rank
        cut = srt[max(rank, 1) - 1]
    reliable = tuple(e for e, m in zip(embeddings.items, mags) if m >= cut)
    remaining = tuple(e for e, m in zip(embeddings.items, mags) if m < cut)
    return (
        EmbeddingSet(embeddings.dim, reliable),
        EmbeddingSet(embeddings.dim, remaining),
    )


def fit_precision_params(
    dev: EmbeddingSet,
    target_median_r: float = DEFAULT_TARGET_MEDIAN_R,
    dur_cap_s: float = DEFAULT_DURATION_CAP_S,
    gamma_grid=GAMMA_GRID,
) -> PrecisionParams:
    """Estimate (s, gamma) from a development set.

    gamma is picked by grid search to minimize the absolute Pearson
    correlation between the duration-adjusted magnitude and the duration;
    s then rescales so the median transformed value hits ``target_median_r``.
    """
    if len(dev) < 10:
        raise ValueError(f"need >= 10 development embeddings, got {len(dev)}")
    if not (target_median_r > 0):
        raise ValueError("target_median_r must be positive")
    mags = np.array([magnitude(e) for e in dev.items])
    durs = np.array([e.source_duration_s for e in dev.items])
    capped = np.minimum(dur_cap_s, durs)

    if np.std(durs) == 0:
        warnings.warn("development durations have zero variance; using gamma = 0")
        gamma = 0.0
    else:
        best = (math.inf, 0.0)
        for g in gamma_grid:
            adjusted = mags + g * capped
            # A duration-independent adjustment is the goal, so a constant
            # adjusted magnitude counts as zero correlation.
            if np.std(adjusted) == 0:
                corr = 0.0
            else:
                corr = abs(float(np.corrcoef(adjusted, durs)[0, 1]))
            if corr < best[0]:
                best = (corr, float(g))
        gamma = best[1]

    med = float(np.median(mags + gamma * capped))
    if med <= 0:
        raise ValueError("median adjusted magnitude is non-positive; cannot set scale")
    return PrecisionParams(s=target_median_r / med, gamma=gamma, dur_cap_s=dur_cap_s)
