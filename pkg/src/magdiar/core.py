"""Domain types and text I/O: embeddings, RTTM annotations, timelines, trial lists.

All containers are immutable value types; parsers and writers are pure
functions.  RTTM times are written at millisecond precision, so a
parse/write round trip is exact up to 1e-3 s quantization.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field


class ParseError(ValueError):
    """Malformed input text (carries a line number where applicable)."""


def _check_finite(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value!r}")
    return value


@dataclass(frozen=True)
class Embedding:
    """One speaker embedding for a time slice of a recording.

    ``source_duration_s`` is the duration of audio the vector summarizes,
    which may differ from ``end_s - start_s`` (e.g. standalone utterances).
    The magnitude is always derived from ``vector``, never stored.
    """

    id: str
    recording_id: str
    start_s: float
    end_s: float
    source_duration_s: float
    vector: tuple[float, ...]

    def __post_init__(self):
        if self.end_s <= self.start_s:
            raise ValueError(f"embedding {self.id!r}: end_s must exceed start_s")
        if self.source_duration_s <= 0:
            raise ValueError(f"embedding {self.id!r}: source_duration_s must be positive")
        vec = tuple(float(v) for v in self.vector)
        if not vec:
            raise ValueError(f"embedding {self.id!r}: empty vector")
        if not all(math.isfinite(v) for v in vec):
            raise ValueError(f"embedding {self.id!r}: vector has non-finite components")
        object.__setattr__(self, "vector", vec)


@dataclass(frozen=True)
class EmbeddingSet:
    """Fixed-dimension collection of embeddings, sorted by (recording, start).

    Construction sorts and validates; ids are unique and every vector has
    the same dimension ``dim``.
    """

    dim: int
    items: tuple[Embedding, ...]

    def __post_init__(self):
        items = tuple(sorted(self.items, key=lambda e: (e.recording_id, e.start_s, e.end_s, e.id)))
        seen = set()
        for e in items:
            if len(e.vector) != self.dim:
                raise ValueError(
                    f"embedding {e.id!r} has dimension {len(e.vector)}, expected {self.dim}"
                )
            if e.id in seen:
                raise ValueError(f"duplicate embedding id {e.id!r}")
            seen.add(e.id)
        object.__setattr__(self, "items", items)

    @classmethod
    def from_items(cls, items) -> "EmbeddingSet":
        items = list(items)
        if not items:
            raise ValueError("cannot build an EmbeddingSet from zero embeddings")
        return cls(dim=len(items[0].vector), items=tuple(items))

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def by_id(self, embedding_id: str) -> Embedding:
        for e in self.items:
            if e.id == embedding_id:
                return e
        raise KeyError(embedding_id)

    def id_index(self) -> dict[str, Embedding]:
        return {e.id: e for e in self.items}

    def recording_ids(self) -> list[str]:
        out = []
        for e in self.items:
            if not out or out[-1] != e.recording_id:
                out.append(e.recording_id)
        return out

    def subset(self, ids) -> "EmbeddingSet":
        ids = set(ids)
        return EmbeddingSet(self.dim, tuple(e for e in self.items if e.id in ids))


@dataclass(frozen=True)
class Turn:
    recording_id: str
    speaker: str
    start_s: float
    end_s: float

    def __post_init__(self):
        if self.end_s <= self.start_s:
            raise ValueError(
                f"turn ({self.recording_id}, {self.speaker}): end_s must exceed start_s"
            )

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


@dataclass(frozen=True)
class Annotation:
    """Diarization reference or hypothesis: (recording, speaker, start, end) turns.

    Normalization merges overlapping or touching turns of the same speaker
    within a recording; overlap between different speakers is allowed.
    """

    turns: tuple[Turn, ...]

    def __post_init__(self):
        object.__setattr__(self, "turns", _normalize_turns(self.turns))

    @classmethod
    def from_tuples(cls, tuples) -> "Annotation":
        return cls(tuple(Turn(*t) for t in tuples))

    def __len__(self) -> int:
        return len(self.turns)

    def __iter__(self):
        return iter(self.turns)

    def recording_ids(self) -> list[str]:
        out = []
        for t in self.turns:
            if t.recording_id not in out:
                out.append(t.recording_id)
        return out

    def for_recording(self, recording_id: str) -> "Annotation":
        return Annotation(tuple(t for t in self.turns if t.recording_id == recording_id))

    def speakers(self) -> list[str]:
        out = []
        for t in self.turns:
            if t.speaker not in out:
                out.append(t.speaker)
        return out

    def rename_speakers(self, mapping: dict[str, str]) -> "Annotation":
        return Annotation(
            tuple(
                Turn(t.recording_id, mapping.get(t.speaker, t.speaker), t.start_s, t.end_s)
                for t in self.turns
            )
        )

    def merged_with(self, other: "Annotation") -> "Annotation":
        return Annotation(self.turns + other.turns)


def _normalize_turns(turns) -> tuple[Turn, ...]:
    groups: dict[tuple[str, str], list[Turn]] = {}
    for t in turns:
        groups.setdefault((t.recording_id, t.speaker), []).append(t)
    merged: list[Turn] = []
    for (rec, spk), group in groups.items():
        group.sort(key=lambda t: (t.start_s, t.end_s))
        cur_s, cur_e = group[0].start_s, group[0].end_s
        for t in group[1:]:
            if t.start_s <= cur_e:
                cur_e = max(cur_e, t.end_s)
            else:
                merged.append(Turn(rec, spk, cur_s, cur_e))
                cur_s, cur_e = t.start_s, t.end_s
        merged.append(Turn(rec, spk, cur_s, cur_e))
    merged.sort(key=lambda t: (t.recording_id, t.start_s, t.end_s, t.speaker))
    return tuple(merged)


@dataclass(frozen=True)
class Timeline:
    """Sorted, merged, pairwise-disjoint intervals of one recording."""

    recording_id: str
    intervals: tuple[tuple[float, float], ...]

    def __post_init__(self):
        ivals = sorted((float(a), float(b)) for a, b in self.intervals)
        for a, b in ivals:
            if b <= a:
                raise ValueError(f"timeline {self.recording_id!r}: interval end must exceed start")
        merged: list[list[float]] = []
        for a, b in ivals:
            if merged and a <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], b)
            else:
                merged.append([a, b])
        object.__setattr__(self, "intervals", tuple((a, b) for a, b in merged))

    def __len__(self) -> int:
        return len(self.intervals)

    def __iter__(self):
        return iter(self.intervals)

    def duration_s(self) -> float:
        return sum(b - a for a, b in self.intervals)


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    is_target: bool


@dataclass(frozen=True)
class TrialList:
    trials: tuple[Trial, ...]

    def __len__(self) -> int:
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)


@dataclass(frozen=True)
class Labeling:
    """Assignment of embedding ids to cluster ids (contiguous 0..K-1)."""

    assignment: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for eid, cid in self.assignment.items():
            if cid < 0:
                raise ValueError(f"cluster id for {eid!r} must be non-negative")
        object.__setattr__(self, "assignment", dict(self.assignment))

    def __len__(self) -> int:
        return len(self.assignment)

    def __getitem__(self, embedding_id: str) -> int:
        return self.assignment[embedding_id]

    def num_clusters(self) -> int:
        return len(set(self.assignment.values()))

    def compacted(self) -> "Labeling":
        """Relabel clusters to 0..K-1 in order of first appearance (by sorted id)."""
        remap: dict[int, int] = {}
        out = {}
        for eid in sorted(self.assignment):
            cid = self.assignment[eid]
            if cid not in remap:
                remap[cid] = len(remap)
            out[eid] = remap[cid]
        return Labeling(out)

    def same_partition(self, other: "Labeling") -> bool:
        """True if both labelings induce the same partition (up to relabeling)."""
        if set(self.assignment) != set(other.assignment):
            return False
        fwd: dict[int, int] = {}
        bwd: dict[int, int] = {}
        for eid, a in self.assignment.items():
            b = other.assignment[eid]
            if fwd.setdefault(a, b) != b or bwd.setdefault(b, a) != a:
                return False
        return True


# ---------------------------------------------------------------------------
# RTTM


def parse_rttm(text: str) -> Annotation:
    """Parse RTTM text into an Annotation.

    Only SPEAKER lines contribute turns; other record types (SPKR-INFO, ...)
    are ignored.  Raises ParseError with the offending line number on
    malformed numeric fields or non-positive durations.
    """
    turns = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] != "SPEAKER":
            continue
        if len(parts) < 9:
            raise ParseError(f"line {lineno}: SPEAKER record has {len(parts)} fields, need >= 9")
        try:
            start = float(parts[3])
            dur = float(parts[4])
        except ValueError as exc:
            raise ParseError(f"line {lineno}: malformed numeric field: {exc}") from exc
        if not (math.isfinite(start) and math.isfinite(dur)):
            raise ParseError(f"line {lineno}: non-finite time field")
        if dur <= 0:
            raise ParseError(f"line {lineno}: non-positive duration {dur}")
        turns.append(Turn(parts[1], parts[7], start, start + dur))
    return Annotation(tuple(turns))


def write_rttm(ann: Annotation) -> str:
    """Serialize an Annotation as RTTM, times fixed to 3 decimal places."""
    lines = []
    for t in sorted(ann.turns, key=lambda t: (t.recording_id, t.start_s, t.speaker)):
        lines.append(
            f"SPEAKER {t.recording_id} 1 {t.start_s:.3f} {t.duration_s:.3f} "
            f"<NA> <NA> {t.speaker} <NA> <NA>"
        )
    return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------------------
# Embedding archive (one JSON object per line)

_ARCHIVE_KEYS = ("id", "recording", "start", "end", "source_duration", "vector")


def read_embedding_archive(text: str) -> EmbeddingSet:
    """Read a line-delimited embedding archive into an EmbeddingSet.

    Each line is a JSON object with keys id, recording, start, end,
    source_duration, vector.  Inconsistent vector dimensions and duplicate
    ids are rejected with the offending id named.
    """
    items = []
    dim = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {lineno}: invalid JSON: {exc}") from exc
        missing = [k for k in _ARCHIVE_KEYS if k not in rec]
        if missing:
            raise ParseError(f"line {lineno}: missing keys {missing}")
        emb = Embedding(
            id=str(rec["id"]),
            recording_id=str(rec["recording"]),
            start_s=_check_finite("start", rec["start"]),
            end_s=_check_finite("end", rec["end"]),
            source_duration_s=_check_finite("source_duration", rec["source_duration"]),
            vector=tuple(float(v) for v in rec["vector"]),
        )
        if dim is None:
            dim = len(emb.vector)
        elif len(emb.vector) != dim:
            raise ParseError(
                f"line {lineno}: embedding {emb.id!r} has dimension "
                f"{len(emb.vector)}, expected {dim}"
            )
        items.append(emb)
    if not items:
        raise ParseError("archive contains no embeddings")
    return EmbeddingSet(dim=dim, items=tuple(items))


def write_embedding_archive(embeddings: EmbeddingSet) -> str:
    lines = []
    for e in embeddings:
        lines.append(
            json.dumps(
                {
                    "id": e.id,
                    "recording": e.recording_id,
                    "start": e.start_s,
                    "end": e.end_s,
                    "source_duration": e.source_duration_s,
                    "vector": list(e.vector),
                },
                separators=(",", ":"),
            )
        )
    return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------------------
# Trial lists


def read_trials(text: str) -> TrialList:
    """Parse "enroll test {target|nontarget}" lines, preserving order."""
    trials = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 3:
            raise ParseError(f"line {lineno}: expected 3 fields, got {len(parts)}")
        if parts[2] == "target":
            is_target = True
        elif parts[2] == "nontarget":
            is_target = False
        else:
            raise ParseError(f"line {lineno}: unknown trial label {parts[2]!r}")
        trials.append(Trial(parts[0], parts[1], is_target))
    return TrialList(tuple(trials))


def write_trials(trials: TrialList) -> str:
    return "".join(
        f"{t.enroll_id} {t.test_id} {'target' if t.is_target else 'nontarget'}\n"
        for t in trials
    )


# ---------------------------------------------------------------------------
# Timelines (VAD / OSD regions)


def read_timelines(text: str, recording_id: str | None = None) -> dict[str, Timeline]:
    """Read VAD/OSD regions as RTTM-like or two-column "start end" text.

    RTTM-like input may cover several recordings; two-column input describes
    a single recording and requires ``recording_id``.
    """
    stripped = [ln for ln in text.splitlines() if ln.strip()]
    if any(ln.split()[0] == "SPEAKER" for ln in stripped):
        ann = parse_rttm(text)
        out = {}
        for rec in ann.recording_ids():
            ivals = [(t.start_s, t.end_s) for t in ann.for_recording(rec)]
            out[rec] = Timeline(rec, tuple(ivals))
        return out
    if recording_id is None:
        raise ParseError("two-column timeline input requires a recording id")
    ivals = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 2:
            raise ParseError(f"line {lineno}: expected 2 fields, got {len(parts)}")
        try:
            a, b = float(parts[0]), float(parts[1])
        except ValueError as exc:
            raise ParseError(f"line {lineno}: malformed numeric field: {exc}") from exc
        ivals.append((a, b))
    return {recording_id: Timeline(recording_id, tuple(ivals))}


def write_labeling(lab: Labeling) -> str:
    return "".join(f"{eid} {lab.assignment[eid]}\n" for eid in sorted(lab.assignment))


def read_labeling(text: str) -> Labeling:
    assignment = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 2:
            raise ParseError(f"line {lineno}: expected 2 fields, got {len(parts)}")
        try:
            assignment[parts[0]] = int(parts[1])
        except ValueError as exc:
            raise ParseError(f"line {lineno}: malformed cluster id: {exc}") from exc
    return Labeling(assignment)
