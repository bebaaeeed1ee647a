import numpy as np
import pytest

from magdiar.core import Embedding, EmbeddingSet


def make_embedding(eid, vector, rec="rec", start=0.0, end=1.5, dur=None):
    return Embedding(
        id=eid,
        recording_id=rec,
        start_s=start,
        end_s=end,
        source_duration_s=dur if dur is not None else end - start,
        vector=tuple(float(v) for v in vector),
    )


def make_set(vectors, mags=None, rec="rec", durs=None):
    """EmbeddingSet from raw vectors, optionally rescaled to given magnitudes."""
    items = []
    for i, v in enumerate(vectors):
        v = np.asarray(v, dtype=float)
        if mags is not None:
            v = v / np.linalg.norm(v) * mags[i]
        dur = durs[i] if durs is not None else 1.5
        items.append(
            make_embedding(f"e{i:03d}", v, rec=rec, start=i * 0.75, end=i * 0.75 + 1.5, dur=dur)
        )
    return EmbeddingSet.from_items(items)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
