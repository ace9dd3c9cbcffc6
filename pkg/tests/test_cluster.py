"""Tests for saliency-aware clustering and decomposition."""

import numpy as np
import pytest
from sklearn.base import clone

from volseg.cluster import (
    ClusterConfig,
    ClusterModel,
    SaliencyClusterer,
    assign_view,
    blend_quantile_baseline,
    elbow_kmeans,
    flow_salient_filter,
    isolate_object,
    merge_clusters,
    oracle_select,
    saliency_vote,
)
from volseg.field import EncodingConfig, FieldConfig, init_field_params
from volseg.metrics import ari
from volseg.render import composite_cache, render_frame
from volseg.scene_io import Bounds, CameraPose
from volseg.validation import ValidationError


def make_blobs(n_per, directions, noise, seed=0):
    """Points scattered tightly around given unit directions."""
    rng = np.random.default_rng(seed)
    points, truth = [], []
    for i, d in enumerate(directions):
        pts = d[None, :] + noise * rng.standard_normal((n_per, len(d)))
        points.append(pts)
        truth.append(np.full(n_per, i))
    return np.concatenate(points), np.concatenate(truth)


def orthogonal_directions(n, dim):
    dirs = np.zeros((n, dim))
    for i in range(n):
        dirs[i, i] = 1.0
    return dirs


class TestElbowKmeans:
    def test_recovers_three_separated_blobs(self):
        X, truth = make_blobs(60, orthogonal_directions(3, 64), noise=0.02)
        model = elbow_kmeans(X, ClusterConfig(max_k=3), seed=3)
        assert model.k == 3
        assert ari(model.labels[0], truth) == 1.0

    def test_oversplit_blobs_collapse_after_merge(self):
        # the unconstrained elbow may over-segment tight blobs; merging
        # near-parallel centroids restores the true partition
        X, truth = make_blobs(60, orthogonal_directions(3, 64), noise=0.02)
        cfg = ClusterConfig()
        model = merge_clusters(elbow_kmeans(X, cfg, seed=3), cfg)
        assert model.k == 3
        assert ari(model.labels[0], truth) == 1.0

    def test_scale_invariance(self):
        X, _ = make_blobs(40, orthogonal_directions(3, 64), noise=0.02, seed=5)
        cfg = ClusterConfig(max_k=5)
        a = elbow_kmeans(X, cfg, seed=1)
        b = elbow_kmeans(X * 137.0, cfg, seed=1)
        assert ari(a.labels[0], b.labels[0]) == 1.0
        assert np.allclose(a.centroids, b.centroids, atol=1e-9)

    def test_identical_points_collapse_to_one_cluster(self):
        X = np.tile(np.ones(8), (30, 1))
        model = elbow_kmeans(X, seed=0)
        assert model.k == 1
        assert np.all(model.labels[0] == 0)

    def test_requires_at_least_two_points(self):
        with pytest.raises(ValidationError):
            elbow_kmeans(np.ones((1, 4)))

    def test_wcss_curve_non_increasing(self):
        rng = np.random.default_rng(11)
        X = rng.standard_normal((200, 6))
        _, curve = elbow_kmeans(
            X, ClusterConfig(max_k=8, elbow_threshold=1.0), seed=2, return_curve=True
        )
        assert len(curve) == 8
        assert all(b <= a + 1e-9 for a, b in zip(curve, curve[1:]))

    def test_determinism_same_seed(self):
        rng = np.random.default_rng(4)
        X = rng.standard_normal((150, 10))
        a = elbow_kmeans(X, seed=9)
        b = elbow_kmeans(X, seed=9)
        assert a.k == b.k
        assert np.array_equal(a.labels[0], b.labels[0])
        assert np.array_equal(a.centroids, b.centroids)


class TestElbowStoppingRule:
    """The elbow decision isolated via scripted WCSS values."""

    def _script(self, monkeypatch, wcss_values, dim=6):
        calls = []

        def fake(X, k, cfg, seed, warm_centers=None):
            calls.append((k, len(X)))
            rng = np.random.default_rng(k)
            centers = rng.standard_normal((k, dim))
            centers /= np.linalg.norm(centers, axis=1, keepdims=True)
            return np.zeros(len(X), dtype=int), centers, float(wcss_values[k - 1])

        import volseg.cluster as mod

        monkeypatch.setattr(mod, "_best_kmeans", fake)
        return calls

    def test_ratio_exactly_at_threshold_continues(self, monkeypatch):
        # 97.5/100 is bitwise equal to 0.975: the strict > must not fire.
        self._script(monkeypatch, [100.0, 97.5, 60.0, 59.0, 58.0])
        X = np.random.default_rng(0).standard_normal((40, 6))
        model = elbow_kmeans(X, ClusterConfig(max_k=5), seed=0)
        assert model.k == 3  # stopped by 59/60 > 0.975, keeping k=3

    def test_ratio_above_threshold_stops_immediately(self, monkeypatch):
        self._script(monkeypatch, [100.0, 97.6, 1.0])
        X = np.random.default_rng(0).standard_normal((40, 6))
        model = elbow_kmeans(X, ClusterConfig(max_k=3), seed=0)
        assert model.k == 1

    def test_subsample_stride(self, monkeypatch):
        calls = self._script(monkeypatch, [100.0, 98.0])
        X = np.random.default_rng(0).standard_normal((100, 6))
        elbow_kmeans(X, ClusterConfig(max_k=2, subsample_stride=5), seed=0)
        assert all(size == 20 for _, size in calls)

    def test_max_k_cap_when_wcss_keeps_dropping(self, monkeypatch):
        calls = self._script(monkeypatch, [2.0 ** -i for i in range(25)])
        X = np.random.default_rng(0).standard_normal((200, 6))
        model = elbow_kmeans(X, ClusterConfig(max_k=25), seed=0)
        assert model.k == 25
        assert [k for k, _ in calls] == list(range(1, 26))


class TestMerge:
    def _model(self, centroids, counts, n_label_pixels=0):
        centroids = np.asarray(centroids, dtype=np.float64)
        k = len(centroids)
        labels = []
        if n_label_pixels:
            labels = [np.arange(n_label_pixels).reshape(1, -1) % k]
        return ClusterModel(
            k=k, centroids=centroids, labels=labels, counts=np.asarray(counts)
        )

    def test_weighted_mean_of_similar_pair(self):
        a = np.array([1.0, 0.0, 0.0])
        b = np.array([0.8, 0.6, 0.0])
        c = np.array([0.0, 0.0, 1.0])
        merged = merge_clusters(self._model([a, b, c], [3, 1, 5]), ClusterConfig())
        assert merged.k == 2
        expected = 3 * a + 1 * b
        expected /= np.linalg.norm(expected)
        assert np.allclose(merged.centroids[0], expected, atol=1e-12)
        assert np.array_equal(merged.centroids[1], c)
        assert merged.counts[0] == 4
        assert merged.counts[1] == 5

    def test_cosine_exactly_half_not_merged(self):
        a = np.array([1.0, 0.0, 0.0])
        b = np.array([0.5, np.sqrt(3) / 2, 0.0])  # dot(a, b) == 0.5 bitwise
        model = self._model([a, b], [1, 1])
        merged = merge_clusters(model, ClusterConfig())
        assert merged.k == 2
        assert np.array_equal(merged.centroids, model.centroids)

    def test_cosine_just_above_half_merged(self):
        x = 0.5 + 1e-6
        a = np.array([1.0, 0.0])
        b = np.array([x, np.sqrt(1 - x * x)])
        merged = merge_clusters(self._model([a, b], [1, 1]), ClusterConfig())
        assert merged.k == 1

    def test_chain_is_transitive(self):
        a = np.array([1.0, 0.0, 0.0])
        c = np.array([0.0, 1.0, 0.0])
        b = (a + c) / np.sqrt(2)  # cos(a,b)=cos(b,c)=0.707, cos(a,c)=0
        merged = merge_clusters(self._model([a, b, c], [1, 1, 1]), ClusterConfig())
        assert merged.k == 1

    def test_labels_remapped(self):
        a = np.array([1.0, 0.0, 0.0])
        b = np.array([0.9, np.sqrt(1 - 0.81), 0.0])
        c = np.array([0.0, 0.0, 1.0])
        model = self._model([a, b, c], [1, 1, 1], n_label_pixels=6)
        merged = merge_clusters(model, ClusterConfig())
        # original labels 0,1,2,0,1,2 -> 0,0,1,0,0,1
        assert np.array_equal(merged.labels[0].ravel(), [0, 0, 1, 0, 0, 1])

    def test_idempotent(self):
        rng = np.random.default_rng(7)
        cents = rng.standard_normal((12, 5))
        cents /= np.linalg.norm(cents, axis=1, keepdims=True)
        model = self._model(cents, rng.integers(1, 50, size=12), n_label_pixels=24)
        once = merge_clusters(model, ClusterConfig())
        twice = merge_clusters(once, ClusterConfig())
        assert once.k == twice.k
        assert np.array_equal(once.centroids, twice.centroids)
        assert np.array_equal(once.labels[0], twice.labels[0])

    def test_salient_flags_survive_merge(self):
        a = np.array([1.0, 0.0, 0.0])
        b = np.array([0.9, np.sqrt(1 - 0.81), 0.0])
        c = np.array([0.0, 0.0, 1.0])
        model = self._model([a, b, c], [1, 1, 1])
        model.salient = np.array([False, True, False])
        merged = merge_clusters(model, ClusterConfig())
        assert merged.salient.tolist() == [True, False]


def constant_attention_views(values, shape=(4, 4)):
    return [np.full(shape, v) for v in values]


def single_cluster_model(n_views, shape=(4, 4)):
    return ClusterModel(
        k=1,
        centroids=np.array([[1.0, 0.0]]),
        labels=[np.zeros(shape, dtype=int) for _ in range(n_views)],
    )


class TestSaliencyVote:
    def test_high_attention_salient(self):
        model = single_cluster_model(5)
        flags = saliency_vote(model, constant_attention_views([0.5] * 5))
        assert flags.tolist() == [True]
        assert model.salient.tolist() == [True]

    def test_low_attention_not_salient(self):
        model = single_cluster_model(5)
        flags = saliency_vote(model, constant_attention_views([0.01] * 5))
        assert flags.tolist() == [False]

    def test_attention_exactly_at_threshold_votes_no(self):
        # constant 0.07 over 16 pixels averages to exactly 0.07
        model = single_cluster_model(4)
        flags = saliency_vote(model, constant_attention_views([0.07] * 4))
        assert flags.tolist() == [False]

    def test_exact_vote_fraction_not_salient(self):
        model = single_cluster_model(10)
        views = constant_attention_views([0.5] * 7 + [0.01] * 3)
        assert saliency_vote(model, views).tolist() == [False]  # 7/10 == 0.7
        views = constant_attention_views([0.5] * 8 + [0.01] * 2)
        assert saliency_vote(single_cluster_model(10), views).tolist() == [True]

    def test_presence_minimum_pixels(self):
        # 9 pixels is below the presence minimum, 10 is exactly enough
        lab_a = np.ones((4, 5), dtype=int)
        lab_a.ravel()[:9] = 0  # cluster 0: 9 px in view A
        lab_b = np.ones((4, 5), dtype=int)
        lab_b.ravel()[:10] = 0  # cluster 0: 10 px in view B
        model = ClusterModel(k=2, centroids=np.eye(2), labels=[lab_a, lab_b])
        att_a = np.full((4, 5), 0.01)
        att_b = np.full((4, 5), 0.9)
        flags = saliency_vote(model, [att_a, att_b])
        # cluster 0 is present only in view B: a single yes vote carries
        # cluster 1 is present in both and splits 1/2, below the fraction
        assert flags.tolist() == [True, False]
        assert np.isnan(model.mean_attention[0, 0])
        assert model.mean_attention[1, 0] == pytest.approx(0.9)

    def test_view_count_mismatch_raises(self):
        with pytest.raises(ValidationError):
            saliency_vote(single_cluster_model(3), constant_attention_views([0.5] * 2))


class TestFlowFilter:
    def _two_cluster_setup(self, flow_mags, att_values, n_views=5):
        labels = []
        for _ in range(n_views):
            lab = np.zeros((4, 8), dtype=int)
            lab[:, 4:] = 1
            labels.append(lab)
        model = ClusterModel(k=2, centroids=np.eye(2), labels=labels)
        att = []
        for _ in range(n_views):
            m = np.empty((4, 8))
            m[:, :4] = att_values[0]
            m[:, 4:] = att_values[1]
            att.append(m)
        saliency_vote(model, att)
        flows = []
        for _ in range(n_views):
            f = np.zeros((4, 8, 2))
            f[:, :4, 0] = flow_mags[0]
            f[:, 4:, 0] = flow_mags[1]
            flows.append(f)
        return model, flows

    def test_moving_and_attended_passes(self):
        model, flows = self._two_cluster_setup([0.5, 0.5], [0.5, 0.5])
        assert flow_salient_filter(model, flows).tolist() == [True, True]

    def test_static_but_attended_rejected(self):
        model, flows = self._two_cluster_setup([0.5, 0.0], [0.5, 0.5])
        assert flow_salient_filter(model, flows).tolist() == [True, False]

    def test_moving_but_unattended_rejected(self):
        model, flows = self._two_cluster_setup([0.5, 0.5], [0.5, 0.01])
        assert flow_salient_filter(model, flows).tolist() == [True, False]

    def test_flow_exactly_at_threshold_rejected(self):
        model, flows = self._two_cluster_setup([0.5, 0.07], [0.5, 0.5])
        assert flow_salient_filter(model, flows).tolist() == [True, False]

    def test_requires_vote_first(self):
        model = single_cluster_model(2)
        with pytest.raises(ValidationError):
            flow_salient_filter(model, [np.zeros((4, 4, 2))] * 2)


class TestAssignView:
    def test_pixels_at_centroids_and_ties(self):
        model = ClusterModel(
            k=2,
            centroids=np.array([[1.0, 0.0], [0.0, 1.0]]),
            labels=[],
            salient=np.array([True, False]),
        )
        feats = np.array(
            [[[5.0, 0.0], [0.0, 0.2]], [[1.0, 1.0], [0.0, 0.0]]]
        )  # scaled c0 / scaled c1 / tie / zero vector
        labels, fg = assign_view(feats, model)
        assert labels.tolist() == [[0, 1], [0, 0]]
        assert fg.tolist() == [[True, False], [True, True]]

    def test_reproduces_training_labels(self):
        X, _ = make_blobs(32, orthogonal_directions(4, 64), noise=0.02, seed=8)
        model = elbow_kmeans(X, seed=2)
        feats = X.reshape(8, 16, 64)
        labels, _ = assign_view(feats, model)
        assert np.array_equal(labels.ravel(), model.labels[0])

    def test_scale_invariant(self):
        X, _ = make_blobs(32, orthogonal_directions(3, 16), noise=0.02, seed=9)
        model = elbow_kmeans(X, seed=2)
        feats = X.reshape(8, 12, 16)
        a, _ = assign_view(feats, model)
        b, _ = assign_view(feats * 41.5, model)
        assert np.array_equal(a, b)


def tiny_render_cache():
    enc = EncodingConfig(n_freq_position=2, n_freq_direction=1, n_freq_time=1)
    cfg = FieldConfig(n_layers=2, width=16, semantic_dim=4, encoding=enc, n_frames=3)
    params = init_field_params(cfg, seed=21).tensors(requires_grad=False)
    pose = CameraPose(
        rotation=np.eye(3),
        translation=np.zeros(3),
        fx=8.0,
        fy=8.0,
        cx=2.5,
        cy=3.0,
        time_index=0.0,
    )
    bounds = Bounds(lo=np.array([-5.0, -5.0, -5.0]), hi=np.array([5.0, 5.0, -0.5]))
    maps, cache = render_frame(
        params, cfg, pose, (6, 5), bounds, time_index=0, n_samples=8,
        chunk=17, return_cache=True,
    )
    return maps, cache


class TestIsolateObject:
    def test_all_clusters_is_identity(self):
        _, cache = tiny_render_cache()
        rng = np.random.default_rng(0)
        cents = rng.standard_normal((3, 4))
        cents /= np.linalg.norm(cents, axis=1, keepdims=True)
        model = ClusterModel(k=3, centroids=cents, labels=[])
        full = composite_cache(cache)
        out = isolate_object(cache, model, target=[0, 1, 2])
        for key in full:
            assert np.array_equal(out[key], full[key]), key

    def test_matches_manual_nearest_centroid_mask(self):
        _, cache = tiny_render_cache()
        rng = np.random.default_rng(1)
        cents = rng.standard_normal((3, 4))
        cents /= np.linalg.norm(cents, axis=1, keepdims=True)
        model = ClusterModel(k=3, centroids=cents, labels=[])
        sem = cache.mixed_semantic()
        flat = sem.reshape(-1, sem.shape[-1]).copy()
        norms = np.linalg.norm(flat, axis=1, keepdims=True)
        flat /= np.where(norms > 0, norms, 1.0)
        labels = np.argmax(flat @ cents.T, axis=1).reshape(sem.shape[:2])
        expected = composite_cache(cache, keep=labels == 1)
        out = isolate_object(cache, model, target=[1])
        for key in expected:
            assert np.array_equal(out[key], expected[key]), key

    def test_salient_preconditions(self):
        _, cache = tiny_render_cache()
        cents = np.eye(3, 4)
        model = ClusterModel(k=3, centroids=cents, labels=[])
        with pytest.raises(ValidationError):
            isolate_object(cache, model)  # nothing salient
        with pytest.raises(ValidationError):
            isolate_object(cache, model, target=1)  # cluster 1 not salient
        model.salient = np.array([False, True, False])
        isolate_object(cache, model, target=1)  # now allowed


class TestBlendBaseline:
    def test_ramp_selects_exact_top_fifth(self):
        v = np.arange(100, dtype=np.float64).reshape(10, 10) / 99.0
        (mask,) = blend_quantile_baseline([v])
        assert mask.sum() == 20
        assert np.all(v[mask] > v[~mask].max())

    def test_constant_map_all_background(self):
        (mask,) = blend_quantile_baseline([np.full((6, 6), 0.4)])
        assert not mask.any()

    def test_matches_sorted_interpolation_oracle(self):
        rng = np.random.default_rng(3)
        v = rng.random((13, 9))
        (mask,) = blend_quantile_baseline([v])
        s = np.sort(v.ravel())
        h = (s.size - 1) * 0.8
        lo = int(np.floor(h))
        thr = s[lo] + (h - lo) * (s[min(lo + 1, s.size - 1)] - s[lo])
        assert np.array_equal(mask, v > thr)


class TestOracleSelect:
    def _model_with_labels(self, labels):
        return ClusterModel(k=2, centroids=np.eye(2), labels=labels)

    def test_majority_inside_selected(self):
        lab = np.zeros((4, 5), dtype=int)
        lab[:, 4] = 1
        gt = np.zeros((4, 5), dtype=bool)
        gt[:, :3] = True  # 12 of 16 cluster-0 pixels inside
        flags = oracle_select(self._model_with_labels([lab]), [gt])
        assert flags.tolist() == [True, False]

    def test_exact_split_not_selected(self):
        lab = np.zeros((4, 4), dtype=int)
        gt = np.zeros((4, 4), dtype=bool)
        gt[:2] = True  # exactly half inside
        flags = oracle_select(self._model_with_labels([lab]), [gt])
        assert flags.tolist() == [False, False]

    def test_multiple_views_pooled(self):
        lab = np.zeros((2, 2), dtype=int)
        gt_in = np.ones((2, 2), dtype=bool)
        gt_out = np.zeros((2, 2), dtype=bool)
        flags = oracle_select(
            self._model_with_labels([lab, lab, lab]), [gt_in, gt_in, gt_out]
        )
        assert flags.tolist() == [True, False]  # 8 of 12 inside


class TestEstimator:
    def _views(self, seed=0):
        rng = np.random.default_rng(seed)
        d0, d1, d2 = orthogonal_directions(3, 64)
        feats, atts = [], []
        for _ in range(4):
            f = np.empty((8, 8, 64))
            f[:, :4] = d0 + 0.02 * rng.standard_normal((8, 4, 64))
            f[:4, 4:] = d1 + 0.02 * rng.standard_normal((4, 4, 64))
            f[4:, 4:] = d2 + 0.02 * rng.standard_normal((4, 4, 64))
            a = np.full((8, 8), 0.01)
            a[:, :4] = 0.5
            feats.append(f)
            atts.append(a)
        return feats, atts

    def test_fit_finds_salient_region(self):
        feats, atts = self._views()
        est = SaliencyClusterer(seed=4).fit(feats, atts)
        model = est.model_
        assert model.k == 3
        assert model.salient.sum() == 1
        labels, fg = est.predict(feats[0])
        region = np.zeros((8, 8), dtype=bool)
        region[:, :4] = True
        assert np.array_equal(fg, region)
        assert np.array_equal(labels, model.labels[0])

    def test_sklearn_params_roundtrip(self):
        est = SaliencyClusterer(max_k=7, vote_fraction=0.6)
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()
        assert cloned.get_params()["max_k"] == 7

    def test_unfitted_predict_raises(self):
        with pytest.raises(ValidationError):
            SaliencyClusterer().predict(np.zeros((2, 2, 3)))

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            ClusterConfig(max_k=0).validate()
        with pytest.raises(ValidationError):
            ClusterConfig(elbow_threshold=1.5).validate()
        with pytest.raises(ValidationError):
            ClusterConfig(vote_fraction=-0.1).validate()
