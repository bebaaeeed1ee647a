import numpy as np
import pytest
from scipy.stats import multivariate_normal

from magdiar.cluster import (
    PldaParams,
    VbxConfig,
    ahc_k,
    ahc_threshold,
    ahc_threshold_labeling,
    fit_plda_spherical,
    plda_llr_pair,
    read_backend_config,
    similarity_matrix,
    vbx_cluster,
    vbx_up_variances,
    write_backend_config,
)
from magdiar.core import Embedding, EmbeddingSet, Labeling, ParseError
from magdiar.quality import PrecisionParams, RAW_PARAMS
from conftest import make_embedding, make_set


def brute_force_plda_llr(x1, x2, plda):
    """Per-coordinate two-covariance LLR via explicit Gaussian densities."""
    t = plda.sigma_b2 + plda.sigma_w2
    b = plda.sigma_b2
    total = 0.0
    for u, v in zip(x1, x2):
        num = multivariate_normal.logpdf([u, v], mean=[0, 0], cov=[[t, b], [b, t]])
        den = multivariate_normal.logpdf(u, 0, t) + multivariate_normal.logpdf(v, 0, t)
        total += num - den
    return total


def brute_force_average_linkage(sim, threshold=None, k=None):
    """Reference agglomeration: recompute every pairwise average each step."""
    n = sim.shape[0]
    clusters = [[i] for i in range(n)]
    while len(clusters) > (k or 1):
        best = None
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                v = np.mean([sim[a][b] for a in clusters[i] for b in clusters[j]])
                if best is None or v > best[0] + 1e-12:
                    best = (v, i, j)
        if threshold is not None and best[0] < threshold:
            break
        _, i, j = best
        merged = clusters[i] + clusters[j]
        clusters = [c for idx, c in enumerate(clusters) if idx not in (i, j)]
        clusters.append(merged)
    labels = np.empty(n, dtype=int)
    for lbl, members in enumerate(sorted(clusters, key=min)):
        labels[members] = lbl
    return labels


def same_partition(a, b):
    a, b = np.asarray(a), np.asarray(b)
    fwd, bwd = {}, {}
    for x, y in zip(a, b):
        if fwd.setdefault(x, y) != y or bwd.setdefault(y, x) != x:
            return False
    return True


FOUR_POINTS = [[1.0, 0.0], [0.99, 0.14], [0.0, 1.0], [0.14, 0.99]]


class TestSimilarityMatrix:
    def test_identical_vectors_cosine(self):
        es = make_set([[2.0, 1.0]] * 3)
        np.testing.assert_allclose(similarity_matrix(es, "cosine"), 1.0)

    def test_orthogonal_pair_cosine(self):
        es = make_set([[1.0, 0.0], [0.0, 1.0]])
        sim = similarity_matrix(es, "cosine")
        assert sim[0, 1] == pytest.approx(0.0)
        assert sim[0, 0] == pytest.approx(1.0)

    def test_zero_vector_rejected(self):
        es = make_set([[0.0, 0.0], [1.0, 0.0]])
        with pytest.raises(ValueError):
            similarity_matrix(es, "cosine")

    def test_plda_matches_brute_force(self, rng):
        plda = PldaParams(sigma_b2=2.5, sigma_w2=0.7)
        for d in (1, 2):
            x = rng.standard_normal((4, d)) * 2.0
            es = make_set(x)
            sim = similarity_matrix(es, "plda", plda=plda)
            for i in range(4):
                for j in range(4):
                    assert sim[i, j] == pytest.approx(
                        brute_force_plda_llr(x[i], x[j], plda), abs=1e-10
                    )

    def test_plda_pair_symmetry(self, rng):
        plda = PldaParams(1.2, 0.4)
        x1, x2 = rng.standard_normal((2, 5))
        assert plda_llr_pair(x1, x2, plda) == pytest.approx(
            plda_llr_pair(x2, x1, plda), rel=1e-14
        )

    def test_unknown_metric(self):
        with pytest.raises(ValueError):
            similarity_matrix(make_set([[1.0, 0.0]]), "euclid")


class TestAhc:
    def test_all_singletons_above_max(self):
        es = make_set(FOUR_POINTS)
        sim = similarity_matrix(es, "cosine")
        labels = ahc_threshold(sim, threshold=1.1)
        assert len(set(labels)) == 4

    def test_single_cluster_below_min(self):
        es = make_set(FOUR_POINTS)
        sim = similarity_matrix(es, "cosine")
        labels = ahc_threshold(sim, threshold=-1.1)
        assert len(set(labels)) == 1

    def test_two_groups_fixture(self):
        # brute-force trace: merge (0,1) at 0.990, (2,3) at 0.990, then the
        # group linkage 0.139 < 0.5 stops -> {0,1} and {2,3}
        es = make_set(FOUR_POINTS)
        sim = similarity_matrix(es, "cosine")
        labels = ahc_threshold(sim, threshold=0.5)
        assert same_partition(labels, [0, 0, 1, 1])
        assert same_partition(labels, brute_force_average_linkage(sim, threshold=0.5))

    def test_k_modes(self):
        es = make_set(FOUR_POINTS)
        sim = similarity_matrix(es, "cosine")
        assert len(set(ahc_k(sim, 4))) == 4
        assert len(set(ahc_k(sim, 1))) == 1
        assert same_partition(ahc_k(sim, 2), [0, 0, 1, 1])

    def test_k_range_validation(self):
        sim = similarity_matrix(make_set(FOUR_POINTS), "cosine")
        with pytest.raises(ValueError):
            ahc_k(sim, 0)
        with pytest.raises(ValueError):
            ahc_k(sim, 5)

    def test_matches_brute_force_random(self, rng):
        for _ in range(15):
            n = int(rng.integers(2, 12))
            x = rng.standard_normal((n, 3))
            es = make_set(x)
            sim = similarity_matrix(es, "cosine")
            thr = float(rng.uniform(-0.2, 0.9))
            assert same_partition(
                ahc_threshold(sim, thr), brute_force_average_linkage(sim, threshold=thr)
            )
            k = int(rng.integers(1, n + 1))
            assert same_partition(
                ahc_k(sim, k), brute_force_average_linkage(sim, k=k)
            )

    def test_permutation_invariance(self, rng):
        x = rng.standard_normal((8, 3))
        es = make_set(x)
        sim = similarity_matrix(es, "cosine")
        base = ahc_threshold(sim, 0.3)
        for _ in range(5):
            perm = rng.permutation(8)
            permuted = sim[np.ix_(perm, perm)]
            labels = ahc_threshold(permuted, 0.3)
            assert same_partition(labels, base[perm])

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError):
            ahc_threshold(np.array([[1.0, 0.5], [0.4, 1.0]]), 0.0)


class TestVbx:
    def two_speaker_set(self, seed, n=60, dim=8, sep=5.0):
        rng = np.random.default_rng(seed)
        centers = np.zeros((2, dim))
        centers[0, 0], centers[1, 0] = sep, -sep
        vecs, truth = [], []
        spk = 0
        for _ in range(n):
            if rng.random() < 0.1:
                spk = 1 - spk
            vecs.append(centers[spk] + rng.standard_normal(dim))
            truth.append(spk)
        return make_set(vecs), truth

    def test_single_embedding_conjugate_update(self):
        es = EmbeddingSet.from_items([make_embedding("a", [2.0, 0.0])])
        lab, state = vbx_cluster(
            es, Labeling({"a": 0}), PldaParams(1.0, 1.0),
            VbxConfig(max_iters=1, min_cluster_mass=0.0),
        )
        assert state.speaker_precisions[0] == pytest.approx(2.0)
        np.testing.assert_allclose(state.speaker_means[0], [1.0, 0.0])

    def test_zero_variances_identical_to_baseline(self):
        es, _ = self.two_speaker_set(3)
        init = ahc_threshold_labeling(es, 0.0)
        plda = PldaParams(25.0, 1.0)
        lab_none, _ = vbx_cluster(es, init, plda, VbxConfig())
        lab_zero, _ = vbx_cluster(es, init, plda, VbxConfig(), variances=[0.0] * len(es))
        assert lab_none.assignment == lab_zero.assignment

    def test_recovers_separated_speakers(self):
        for seed in range(8):
            es, truth = self.two_speaker_set(seed)
            init = ahc_threshold_labeling(es, 0.0)
            lab, _ = vbx_cluster(es, init, PldaParams(25.0, 1.0), VbxConfig())
            got = np.array([lab[e.id] for e in es.items])
            truth = np.array(truth)
            agree = max((got == truth).mean(), (got == 1 - truth).mean())
            assert lab.num_clusters() == 2
            assert agree == 1.0

    def test_responsibility_rows_sum_to_one(self):
        es, _ = self.two_speaker_set(5)
        init = ahc_threshold_labeling(es, 0.0)
        _, state = vbx_cluster(es, init, PldaParams(25.0, 1.0), VbxConfig())
        np.testing.assert_allclose(state.responsibilities.sum(axis=1), 1.0, atol=1e-9)

    def test_elbo_monotone_without_dropping(self):
        for seed in range(5):
            es, _ = self.two_speaker_set(seed + 50)
            # deliberately poor init: everything in one cluster except one
            ids = [e.id for e in es.items]
            init = Labeling({eid: (1 if i == 0 else 0) for i, eid in enumerate(ids)})
            _, state = vbx_cluster(
                es, init, PldaParams(25.0, 1.0),
                VbxConfig(min_cluster_mass=0.0, max_iters=25),
            )
            trace = state.elbo_trace
            assert len(trace) >= 2
            for prev, cur in zip(trace, trace[1:]):
                assert cur >= prev - 1e-8 * abs(prev)

    def test_uncertain_segments_sway_less(self):
        # an outlier segment with huge variance barely moves its speaker mean
        base = [[5.0, 0.0]] * 6 + [[-5.0, 0.0]]
        es = make_set(base)
        init = Labeling({e.id: 0 for e in es.items})
        cfg = VbxConfig(max_iters=3, min_cluster_mass=0.0)
        plda = PldaParams(9.0, 1.0)
        lab_eq, st_eq = vbx_cluster(es, init, plda, cfg)
        variances = [0.0] * 6 + [1e6]
        lab_up, st_up = vbx_cluster(es, init, plda, cfg, variances=variances)
        assert abs(st_up.speaker_means[0][0] - 5.0) < abs(st_eq.speaker_means[0][0] - 5.0)

    def test_init_must_cover(self):
        es, _ = self.two_speaker_set(1)
        with pytest.raises(ValueError, match="cover"):
            vbx_cluster(es, Labeling({"e000": 0}), PldaParams(1.0, 1.0), VbxConfig())

    def test_speaker_cap(self):
        es, _ = self.two_speaker_set(2, n=20)
        init = Labeling({e.id: i for i, e in enumerate(es.items)})  # 20 singletons
        lab, state = vbx_cluster(
            es, init, PldaParams(25.0, 1.0), VbxConfig(max_speakers=4)
        )
        assert state.responsibilities.shape[1] <= 4


class TestUpVariances:
    def test_reciprocal(self):
        es = make_set([[3.0, 4.0]])  # magnitude 5
        assert vbx_up_variances(es, RAW_PARAMS) == [pytest.approx(0.2)]

    def test_unit(self):
        es = make_set([[1.0, 0.0]])
        assert vbx_up_variances(es, RAW_PARAMS) == [pytest.approx(1.0)]

    def test_monotone_in_magnitude(self):
        es = make_set([[1.0, 0.0], [0.0, 1.0]], mags=[20.0, 80.0])
        v = vbx_up_variances(es, PrecisionParams(s=0.1, gamma=0.3))
        by_mag = {round(np.linalg.norm(e.vector)): var for e, var in zip(es.items, v)}
        assert by_mag[80] < by_mag[20]

    def test_zero_magnitude_rejected(self):
        es = make_set([[0.0, 0.0]])
        with pytest.raises(ValueError):
            vbx_up_variances(es, RAW_PARAMS)


class TestPldaFit:
    def test_recovers_generating_variances(self, rng):
        sb2, sw2 = 16.0, 2.0
        labels, x = [], []
        for s in range(40):
            mean = rng.standard_normal(6) * np.sqrt(sb2)
            for _ in range(30):
                x.append(mean + rng.standard_normal(6) * np.sqrt(sw2))
                labels.append(s)
        plda = fit_plda_spherical(np.array(x), np.array(labels))
        assert plda.sigma_w2 == pytest.approx(sw2, rel=0.1)
        assert plda.sigma_b2 == pytest.approx(sb2, rel=0.25)

    def test_needs_two_speakers(self):
        with pytest.raises(ValueError):
            fit_plda_spherical(np.zeros((3, 2)), np.zeros(3))


class TestBackendConfig:
    def test_round_trip(self):
        cfg = VbxConfig(p_loop=0.85, f_a=0.4, f_b=17.0, max_speakers=12,
                        max_iters=25, elbo_rel_tol=1e-5, min_cluster_mass=2.0)
        plda = PldaParams(3.5, 0.25)
        cfg2, plda2 = read_backend_config(write_backend_config(cfg, plda))
        assert cfg2 == cfg and plda2 == plda

    def test_partial_and_comments(self):
        cfg, plda = read_backend_config("# comment\np_loop 0.7\n")
        assert cfg.p_loop == 0.7 and cfg.f_a == 1.0 and plda is None

    def test_unknown_key(self):
        with pytest.raises(ParseError):
            read_backend_config("bogus 1\n")
