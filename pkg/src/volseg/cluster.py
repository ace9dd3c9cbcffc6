"""Saliency-aware decomposition of rendered feature maps.

Pipeline: L2-normalize per-pixel features, pick k by elbow k-means (ratio
criterion on within-cluster sum of squares), transitively merge centroids
with cosine similarity above 0.5, then let all images vote on which clusters
are salient (per-image mean attention above 0.07, strict majority fraction
0.7).  Foreground = union of salient clusters.  A variant filter also
requires per-cluster projected-flow magnitude above threshold, which rejects
salient-looking but static structures.

Tie-breaking everywhere: lowest index wins; every threshold comparison is
strict.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from sklearn.base import BaseEstimator

from .render import composite_cache
from .validation import ValidationError


@dataclass
class ClusterConfig:
    max_k: int = 25
    elbow_threshold: float = 0.975
    trials_per_k: int = 10
    subsample_stride: int = 5
    merge_cos_threshold: float = 0.5
    saliency_threshold: float = 0.07
    vote_fraction: float = 0.7
    flow_threshold: float = 0.07
    presence_min_pixels: int = 10

    def validate(self):
        if self.max_k < 1:
            raise ValidationError("max_k must be >= 1")
        if not 0 < self.elbow_threshold <= 1:
            raise ValidationError("elbow_threshold must be in (0, 1]")
        if self.trials_per_k < 1:
            raise ValidationError("trials_per_k must be >= 1")
        if self.subsample_stride < 1:
            raise ValidationError("subsample_stride must be >= 1")
        for name in ("merge_cos_threshold", "vote_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValidationError(f"{name} must be in [0, 1]")
        return self


@dataclass
class ClusterModel:
    """Clustering state shared by all views of a sequence."""

    k: int
    centroids: np.ndarray  # (k, S) unit rows
    labels: list  # per view (H, W) int arrays
    salient: np.ndarray = None  # (k,) bool
    mean_attention: np.ndarray = None  # (n_views, k), NaN where absent
    counts: np.ndarray = None  # (k,) member pixels over all views

    def __post_init__(self):
        if self.salient is None:
            self.salient = np.zeros(self.k, dtype=bool)

    def validate(self):
        norms = np.linalg.norm(self.centroids, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValidationError("centroids must be unit-norm")
        for lab in self.labels:
            if lab.min() < 0 or lab.max() >= self.k:
                raise ValidationError("labels out of range")
        return self


def _normalize_rows(x):
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def _assign(X, centers):
    # unit centers: argmin Euclidean == argmax dot; first index wins ties
    sims = X @ centers.T
    labels = np.argmax(sims, axis=1)
    d2 = np.maximum((X * X).sum(1) - 2 * sims[np.arange(len(X)), labels] + (centers[labels] ** 2).sum(1), 0.0)
    return labels, d2


def _update_centers(X, labels, k, old_centers):
    centers = old_centers.copy()
    for c in range(k):
        members = labels == c
        if not members.any():
            continue
        mean = X[members].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm > 1e-12:
            centers[c] = mean / norm
    return centers


def _kmeanspp_init(X, k, rng):
    n = len(X)
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = ((X - centers[0]) ** 2).sum(1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[c:] = X[rng.integers(n, size=k - c)]
            break
        probs = d2 / total
        centers[c] = X[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((X - centers[c]) ** 2).sum(1))
    return _normalize_rows(centers)


def _lloyd(X, centers, max_iter=50, tol=1e-10):
    """Spherical Lloyd iterations (centers renormalized each step)."""
    k = len(centers)
    prev = np.inf
    for _ in range(max_iter):
        labels, d2 = _assign(X, centers)
        # re-seed empty clusters at the worst-fit point, deterministically
        for c in range(k):
            if not np.any(labels == c):
                far = int(np.argmax(d2))
                centers[c] = X[far]
                labels[far] = c
                d2[far] = 0.0
        wcss = float(d2.sum())
        centers = _update_centers(X, labels, k, centers)
        if prev - wcss <= tol:
            break
        prev = wcss
    labels, d2 = _assign(X, centers)
    return labels, centers, float(d2.sum())


def _best_kmeans(X, k, cfg, seed, warm_centers=None):
    """Best-of-trials k-means++ runs; an extra warm-started run continues the
    previous k's solution so WCSS never increases with k."""
    best = None
    for trial in range(cfg.trials_per_k):
        rng = np.random.default_rng([seed, k, trial])
        centers0 = _kmeanspp_init(X, k, rng)
        result = _lloyd(X, centers0.copy())
        if best is None or result[2] < best[2]:
            best = result
    if warm_centers is not None:
        labels, d2 = _assign(X, warm_centers)
        far = int(np.argmax(d2))
        centers0 = np.concatenate([warm_centers, X[far : far + 1]], axis=0)
        result = _lloyd(X, centers0.copy())
        if result[2] < best[2]:
            best = result
    return best


def elbow_kmeans(points, cfg: ClusterConfig = None, seed=0, return_curve=False):
    """Pick k by the WCSS-ratio elbow on a subsample, then assign all points.

    k grows from 1 while the best-of-trials WCSS keeps improving; the chosen
    k is the last one before WCSS(k+1)/WCSS(k) exceeds the elbow threshold
    (a perfect fit at some k also stops the search).
    """
    cfg = (cfg or ClusterConfig()).validate()
    X = _normalize_rows(points)
    if X.ndim != 2 or len(X) < 2:
        raise ValidationError("elbow_kmeans needs at least 2 points")
    sub = X[:: cfg.subsample_stride]
    if len(sub) < 1:
        sub = X

    curve = []
    chosen = None
    prev = None  # (labels, centers, wcss)
    for k in range(1, cfg.max_k + 1):
        if k > len(sub):
            chosen = prev
            break
        warm = prev[1] if prev is not None else None
        result = _best_kmeans(sub, k, cfg, seed, warm_centers=warm)
        curve.append(result[2])
        if prev is not None:
            if prev[2] <= 0.0 or result[2] / prev[2] > cfg.elbow_threshold:
                chosen = prev
                break
        if result[2] == 0.0 and k >= 1:
            chosen = result
            break
        prev = result
    if chosen is None:
        chosen = prev
    centers = _normalize_rows(chosen[1])
    labels, _ = _assign(X, centers)
    model = ClusterModel(
        k=len(centers),
        centroids=centers,
        labels=[labels],
        counts=np.bincount(labels, minlength=len(centers)),
    )
    if return_curve:
        return model, curve
    return model


def merge_clusters(model: ClusterModel, cfg: ClusterConfig = None) -> ClusterModel:
    """Transitively merge centroids with pairwise cosine above the threshold.

    Components are merged into their lowest member index; the new centroid is
    the member-count-weighted mean, renormalized.  Repeats until no pair
    exceeds the threshold, so a second call is a no-op.
    """
    cfg = (cfg or ClusterConfig()).validate()
    centroids = model.centroids.copy()
    counts = (
        model.counts.astype(np.float64)
        if model.counts is not None
        else np.ones(model.k)
    )
    salient = model.salient.copy()
    mapping = np.arange(model.k)  # original index -> current group row

    while True:
        k = len(centroids)
        sims = centroids @ centroids.T
        parent = list(range(k))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        merged_any = False
        for i in range(k):
            for j in range(i + 1, k):
                if sims[i, j] > cfg.merge_cos_threshold:
                    ri, rj = find(i), find(j)
                    if ri != rj:
                        parent[max(ri, rj)] = min(ri, rj)
                        merged_any = True
        if not merged_any:
            break
        roots = sorted({find(i) for i in range(k)})
        root_to_new = {r: n for n, r in enumerate(roots)}
        new_k = len(roots)
        new_centroids = np.zeros((new_k, centroids.shape[1]))
        new_counts = np.zeros(new_k)
        new_salient = np.zeros(new_k, dtype=bool)
        for i in range(k):
            n = root_to_new[find(i)]
            new_centroids[n] += counts[i] * centroids[i]
            new_counts[n] += counts[i]
            new_salient[n] |= bool(salient[i])
        new_centroids = _normalize_rows(new_centroids)
        remap = np.array([root_to_new[find(i)] for i in range(k)])
        mapping = remap[mapping]
        centroids, counts, salient = new_centroids, new_counts, new_salient

    return ClusterModel(
        k=len(centroids),
        centroids=centroids,
        labels=[mapping[lab] for lab in model.labels],
        salient=salient,
        counts=counts.astype(np.int64),
    )


def _per_image_cluster_means(labels, value_maps, k, min_pixels):
    """(n_images, k) means of a per-pixel value over each cluster; NaN where
    the cluster has fewer than min_pixels in that image."""
    out = np.full((len(value_maps), k), np.nan)
    for i, (lab, vals) in enumerate(zip(labels, value_maps)):
        lab = np.asarray(lab).ravel()
        vals = np.asarray(vals, dtype=np.float64).reshape(len(lab), -1)
        mags = np.linalg.norm(vals, axis=1) if vals.shape[1] > 1 else vals[:, 0]
        for c in range(k):
            members = lab == c
            if members.sum() >= min_pixels:
                out[i, c] = mags[members].mean()
    return out


def _vote(passed, present, vote_fraction):
    flags = np.zeros(passed.shape[1], dtype=bool)
    for c in range(passed.shape[1]):
        n_present = int(present[:, c].sum())
        if n_present == 0:
            continue
        flags[c] = passed[:, c].sum() / n_present > vote_fraction
    return flags


def saliency_vote(model: ClusterModel, attention_maps, cfg: ClusterConfig = None):
    """Per-image attention test with a strict cross-image majority.

    A cluster counts as salient in image i when its mean attention there
    exceeds the saliency threshold; images where the cluster occupies fewer
    than presence_min_pixels do not vote.  Salient overall when the yes
    fraction strictly exceeds vote_fraction.
    """
    cfg = (cfg or ClusterConfig()).validate()
    if len(attention_maps) != len(model.labels):
        raise ValidationError("one attention map per labeled view required")
    means = _per_image_cluster_means(
        model.labels, attention_maps, model.k, cfg.presence_min_pixels
    )
    present = ~np.isnan(means)
    passed = present & (np.nan_to_num(means, nan=-np.inf) > cfg.saliency_threshold)
    flags = _vote(passed, present, cfg.vote_fraction)
    model.mean_attention = means
    model.salient = flags
    return flags


def flow_salient_filter(
    model: ClusterModel, projected_flow_maps, cfg: ClusterConfig = None
):
    """Conjunctive saliency: mean projected-flow magnitude AND mean attention
    must both exceed their thresholds per image, then the same strict vote.

    Uses the per-image attention means recorded by saliency_vote; flow maps
    are (H, W, 2) pixel displacements rendered at a fixed camera.
    """
    cfg = (cfg or ClusterConfig()).validate()
    if model.mean_attention is None:
        raise ValidationError("run saliency_vote first to record attention means")
    if len(projected_flow_maps) != len(model.labels):
        raise ValidationError("one flow map per labeled view required")
    flow_means = _per_image_cluster_means(
        model.labels, projected_flow_maps, model.k, cfg.presence_min_pixels
    )
    att_means = model.mean_attention
    present = ~np.isnan(flow_means) & ~np.isnan(att_means)
    passed = (
        present
        & (np.nan_to_num(flow_means, nan=-np.inf) > cfg.flow_threshold)
        & (np.nan_to_num(att_means, nan=-np.inf) > cfg.saliency_threshold)
    )
    return _vote(passed, present, cfg.vote_fraction)


def assign_view(features, model: ClusterModel):
    """Label each pixel with its argmax-cosine centroid.

    Returns (labels (H, W), foreground mask (H, W)); ties go to the lowest
    cluster index.
    """
    features = np.asarray(features, dtype=np.float64)
    H, W = features.shape[:2]
    flat = _normalize_rows(features.reshape(-1, features.shape[-1]))
    sims = flat @ model.centroids.T
    labels = np.argmax(sims, axis=1).reshape(H, W)
    foreground = model.salient[labels]
    return labels, foreground


def isolate_object(cache, model: ClusterModel, target=None):
    """Re-composite a cached frame keeping only samples whose combined
    semantics are closest to the target cluster(s).

    target None selects every salient cluster (error if there is none); an
    integer selects one salient cluster; an iterable selects exactly those
    clusters.  Dropped samples get zero density and the frame is re-rendered
    from the cache.
    """
    if target is None:
        ids = np.flatnonzero(model.salient)
        if ids.size == 0:
            raise ValidationError("no salient cluster to isolate")
    elif np.isscalar(target):
        if not model.salient[int(target)]:
            raise ValidationError(f"cluster {int(target)} is not salient")
        ids = np.array([int(target)])
    else:
        ids = np.asarray(list(target), dtype=int)
    sem = cache.mixed_semantic()  # (R, K, S)
    R, K, S = sem.shape
    flat = _normalize_rows(sem.reshape(-1, S))
    labels = np.argmax(flat @ model.centroids.T, axis=1).reshape(R, K)
    keep = np.isin(labels, ids)
    return composite_cache(cache, keep=keep)


def blend_quantile_baseline(blend_maps, q=0.8):
    """Foreground = pixels strictly above the per-image blend quantile."""
    masks = []
    for v in blend_maps:
        v = np.asarray(v, dtype=np.float64)
        masks.append(v > np.quantile(v, q))
    return masks


def oracle_select(model: ClusterModel, gt_masks):
    """Salient iff a strict majority of the cluster's pixels (over all
    images) fall inside any ground-truth foreground object."""
    if len(gt_masks) != len(model.labels):
        raise ValidationError("one ground-truth mask per labeled view required")
    inside = np.zeros(model.k, dtype=np.int64)
    total = np.zeros(model.k, dtype=np.int64)
    for lab, mask in zip(model.labels, gt_masks):
        lab = np.asarray(lab).ravel()
        fg = (np.asarray(mask) > 0).ravel()
        total += np.bincount(lab, minlength=model.k)
        inside += np.bincount(lab[fg], minlength=model.k)
    flags = np.zeros(model.k, dtype=bool)
    nonzero = total > 0
    flags[nonzero] = inside[nonzero] * 2 > total[nonzero]
    return flags


class SaliencyClusterer(BaseEstimator):
    """Fit the full decomposition on per-view feature + attention maps.

    fit() stacks every pixel of every view, runs elbow k-means, merges
    near-duplicate centroids, and records the saliency vote; predict()
    labels new feature maps with the stored centroids.
    """

    def __init__(
        self,
        max_k=25,
        elbow_threshold=0.975,
        trials_per_k=10,
        subsample_stride=5,
        merge_cos_threshold=0.5,
        saliency_threshold=0.07,
        vote_fraction=0.7,
        flow_threshold=0.07,
        presence_min_pixels=10,
        seed=0,
    ):
        self.max_k = max_k
        self.elbow_threshold = elbow_threshold
        self.trials_per_k = trials_per_k
        self.subsample_stride = subsample_stride
        self.merge_cos_threshold = merge_cos_threshold
        self.saliency_threshold = saliency_threshold
        self.vote_fraction = vote_fraction
        self.flow_threshold = flow_threshold
        self.presence_min_pixels = presence_min_pixels
        self.seed = seed

    def _config(self):
        return ClusterConfig(
            max_k=self.max_k,
            elbow_threshold=self.elbow_threshold,
            trials_per_k=self.trials_per_k,
            subsample_stride=self.subsample_stride,
            merge_cos_threshold=self.merge_cos_threshold,
            saliency_threshold=self.saliency_threshold,
            vote_fraction=self.vote_fraction,
            flow_threshold=self.flow_threshold,
            presence_min_pixels=self.presence_min_pixels,
        ).validate()

    def fit(self, feature_maps, attention_maps):
        if len(feature_maps) != len(attention_maps):
            raise ValidationError("need matching feature and attention maps")
        cfg = self._config()
        shapes = [np.asarray(f).shape[:2] for f in feature_maps]
        stacked = np.concatenate(
            [np.asarray(f, dtype=np.float64).reshape(-1, np.asarray(f).shape[-1]) for f in feature_maps]
        )
        model = elbow_kmeans(stacked, cfg, seed=self.seed)
        flat = model.labels[0]
        labels, off = [], 0
        for H, W in shapes:
            labels.append(flat[off : off + H * W].reshape(H, W))
            off += H * W
        model.labels = labels
        model = merge_clusters(model, cfg)
        saliency_vote(model, attention_maps, cfg)
        self.model_ = model
        return self

    def predict(self, features):
        if not hasattr(self, "model_"):
            raise ValidationError("SaliencyClusterer is not fitted")
        return assign_view(features, self.model_)

    def fit_predict(self, feature_maps, attention_maps):
        self.fit(feature_maps, attention_maps)
        return self.model_.labels

    def apply_flow_filter(self, projected_flow_maps):
        """Replace the stored saliency flags with the conjunctive
        attention-and-motion vote."""
        flags = flow_salient_filter(self.model_, projected_flow_maps, self._config())
        self.model_.salient = flags
        return flags
