"""Synthetic dynamic scenes with analytic ground truth.

A scene is a textured background plane plus K opaque ellipsoidal blobs, each
carrying a constant unit-norm semantic vector, a scalar attention level, and
a rigid linear velocity.  Cameras sit on an orbital arc looking at the
origin.  Because every surface is opaque and analytic, all supervision maps
are closed-form: RGB by nearest-hit ray casting, depth as the exact hit
distance, flow as the exact projection of rigid motion (camera parallax
included), semantic/attention windows from the dominant surface per patch,
and instance masks from hit identity.

Each feature-window patch takes the descriptor of the surface that covers
the majority of its footprint (ties to the background), the way a real
patch-token extractor snaps to one object per token.  Pooling patches by
averaging instead would fabricate a continuum of background/object feature
mixtures along every silhouette — directions no real extractor emits — and
that continuum is exactly what defeats downstream cosine-threshold cluster
merging: mixture centroids sit within the merge threshold of both sides and
chain otherwise well-separated clusters together.

The depth prior is deliberately an affine distortion of true depth (plus
optional noise) so scale/shift-invariant losses are exercised honestly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pyramid import PyramidConfig, make_layout
from .scene_io import (
    CameraPose,
    FrameBundle,
    HoldoutView,
    SceneDataset,
    save_raw_dataset,
)
from .validation import ValidationError


@dataclass
class BlobSpec:
    """One rigid ellipsoid: center at time t is center + velocity * t."""

    center: tuple
    radii: tuple
    velocity: tuple
    color: tuple
    attention: float

    def center_at(self, t):
        return np.asarray(self.center, dtype=np.float64) + t * np.asarray(
            self.velocity, dtype=np.float64
        )


@dataclass
class SynthSpec:
    image_height: int = 64
    image_width: int = 64
    n_frames: int = 8
    orbit_radius: float = 3.0
    orbit_height: float = 0.35
    arc_degrees: float = 8.0
    focal: float = 70.0
    include_background: bool = True
    plane_z: float = -1.2
    plane_attention: float = 0.02
    blobs: list = None
    semantic_dim: int = 64
    max_pair_cos: float = 0.3
    feature_noise: float = 1e-3
    depth_scale: float = 0.85
    depth_shift: float = 0.2
    depth_noise: float = 0.005
    depth_range: tuple = (1.2, 6.0)
    n_holdout: int = 4
    pyramid_levels: int = 2
    window_width: int = 32
    window_height: int = 32
    window_stride: int = 16
    patch_stride: int = 2

    def __post_init__(self):
        if self.blobs is None:
            self.blobs = default_blobs()

    def validate(self):
        if not self.blobs and not self.include_background:
            raise ValidationError("scene needs at least one blob or a background")
        if self.n_frames < 2:
            raise ValidationError("n_frames must be >= 2")
        for name in ("image_height", "image_width", "window_height", "window_width"):
            if getattr(self, name) % self.patch_stride != 0:
                raise ValidationError(f"{name} must be divisible by patch_stride")
        if not 0 < self.max_pair_cos <= 1:
            raise ValidationError("max_pair_cos must be in (0, 1]")
        return self

    def pyramid_config(self):
        return PyramidConfig(
            n_levels=self.pyramid_levels,
            window_width=self.window_width,
            window_height=self.window_height,
            window_stride=self.window_stride,
            patch_stride=self.patch_stride,
            pca_dims=min(64, self.semantic_dim),
        )


def default_blobs():
    """Two-blob benchmark: one salient mover, one salient but static."""
    return [
        BlobSpec(
            center=(-0.55, 0.05, 0.15),
            radii=(0.30, 0.24, 0.26),
            velocity=(0.13, 0.012, 0.0),
            color=(0.85, 0.25, 0.20),
            attention=0.75,
        ),
        BlobSpec(
            center=(0.55, -0.28, -0.10),
            radii=(0.26, 0.30, 0.24),
            velocity=(0.0, 0.0, 0.0),
            color=(0.20, 0.45, 0.85),
            attention=0.55,
        ),
    ]


@dataclass
class GroundTruth:
    """Analytic per-frame and per-holdout supervision kept out of the dataset."""

    masks: list  # per frame (H, W) uint8: 0 background, 1..K blobs
    holdout_masks: list
    true_depth: list  # per frame (H, W) exact hit distance
    semantic_vectors: np.ndarray  # (K+1, S): row 0 background
    attention_values: np.ndarray  # (K+1,)
    semantic_maps: list  # per frame (H, W, S) true semantics
    attention_maps: list  # per frame (H, W) true saliency


def semantic_vocabulary(k, dim, max_pair_cos, seed):
    """K+1 unit vectors (background first) with pairwise |cos| strictly below
    the limit; rejection-sampled, which converges fast at dim >= 16."""
    rng = np.random.default_rng([seed, 7])
    for _ in range(200):
        vecs = rng.standard_normal((k + 1, dim))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        gram = np.abs(vecs @ vecs.T - np.eye(k + 1))
        if gram.max() < max_pair_cos:
            return vecs
    raise ValidationError(
        f"could not draw {k + 1} vectors with pairwise |cos| < {max_pair_cos} in {dim} dims"
    )


def _look_at_pose(spec: SynthSpec, angle_rad, height, radius, time_index):
    eye = np.array([radius * np.sin(angle_rad), height, radius * np.cos(angle_rad)])
    forward = -eye / np.linalg.norm(eye)  # look at the origin
    right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    rotation = np.stack([right, true_up, -forward], axis=1)
    return CameraPose(
        rotation=rotation,
        translation=eye,
        fx=spec.focal,
        fy=spec.focal,
        cx=spec.image_width / 2.0,
        cy=spec.image_height / 2.0,
        time_index=time_index,
    ).validate()


def camera_poses(spec: SynthSpec):
    half = np.deg2rad(spec.arc_degrees) / 2.0
    angles = np.linspace(-half, half, spec.n_frames)
    return [
        _look_at_pose(spec, a, spec.orbit_height, spec.orbit_radius, float(i))
        for i, a in enumerate(angles)
    ]


def holdout_poses(spec: SynthSpec):
    """Novel poses at novel (fractional) times, interleaved along the arc."""
    half = np.deg2rad(spec.arc_degrees) / 2.0
    fracs = np.linspace(0.12, 0.88, spec.n_holdout)
    poses = []
    for f in fracs:
        angle = -half + 2 * half * f + np.deg2rad(1.5)
        t = f * (spec.n_frames - 1)
        poses.append(
            _look_at_pose(
                spec, angle, spec.orbit_height + 0.12, spec.orbit_radius - 0.15, float(t)
            )
        )
    return poses


def _pixel_rays(spec: SynthSpec, pose: CameraPose):
    H, W = spec.image_height, spec.image_width
    rows, cols = np.mgrid[0:H, 0:W]
    uv = np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5], axis=-1)
    dirs = pose.pixel_directions(uv)
    origins = np.broadcast_to(
        np.asarray(pose.translation, dtype=np.float64), dirs.shape
    )
    return uv, origins, dirs


def intersect_scene(spec: SynthSpec, origins, dirs, t):
    """Nearest opaque hit per ray: (distance, hit id) with id 0 = background
    plane, 1..K = blobs, -1 = miss (distance = far bound)."""
    n = len(dirs)
    best_t = np.full(n, np.inf)
    hit_id = np.full(n, -1, dtype=np.int64)
    if spec.include_background:
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_pl = (spec.plane_z - origins[:, 2]) / dz
        ok = (np.abs(dz) > 1e-12) & (t_pl > 0)
        best_t = np.where(ok, t_pl, np.inf)
        hit_id = np.where(ok, 0, -1)
    for b, blob in enumerate(spec.blobs):
        c = blob.center_at(t)
        r = np.asarray(blob.radii, dtype=np.float64)
        oc = (origins - c) / r
        dd = dirs / r
        A = (dd * dd).sum(1)
        B = 2.0 * (oc * dd).sum(1)
        C = (oc * oc).sum(1) - 1.0
        disc = B * B - 4.0 * A * C
        has_root = disc >= 0
        sq = np.sqrt(np.where(has_root, disc, 0.0))
        t_near = (-B - sq) / (2.0 * A)
        t_far_root = (-B + sq) / (2.0 * A)
        # entering hit if in front of the camera; inside-origin rays use exit
        t_hit = np.where(t_near > 1e-9, t_near, t_far_root)
        ok = has_root & (t_hit > 1e-9)
        closer = ok & (t_hit < best_t)
        best_t = np.where(closer, t_hit, best_t)
        hit_id = np.where(closer, b + 1, hit_id)
    missed = ~np.isfinite(best_t)
    best_t = np.where(missed, spec.depth_range[1], best_t)
    return best_t, hit_id


def _plane_texture(points):
    """Smooth low-frequency RGB texture over world (x, y)."""
    x, y = points[:, 0], points[:, 1]
    return np.stack(
        [
            0.45 + 0.25 * np.sin(2.1 * x + 0.7),
            0.45 + 0.25 * np.sin(1.7 * y - 0.3),
            0.50 + 0.20 * np.sin(1.3 * (x + y)),
        ],
        axis=-1,
    )


def render_view(spec: SynthSpec, vectors, pose: CameraPose, t):
    """Analytic maps for one camera at continuous time t.

    Returns dict with rgb, depth, mask, semantic, attention, hit points and
    the pixel grid, all at full resolution.
    """
    H, W = spec.image_height, spec.image_width
    uv, origins, dirs = _pixel_rays(spec, pose)
    dist, hit = intersect_scene(spec, origins, dirs, t)
    points = origins + dist[:, None] * dirs

    rgb = np.zeros((H * W, 3))
    sem = np.zeros((H * W, spec.semantic_dim))
    att = np.zeros(H * W)
    bg = hit == 0
    if bg.any():
        rgb[bg] = _plane_texture(points[bg])
        sem[bg] = vectors[0]
        att[bg] = spec.plane_attention
    for b, blob in enumerate(spec.blobs):
        m = hit == b + 1
        if m.any():
            rgb[m] = np.asarray(blob.color, dtype=np.float64)
            sem[m] = vectors[b + 1]
            att[m] = blob.attention
    mask = np.where(hit > 0, hit, 0).astype(np.uint8)
    return {
        "rgb": rgb.reshape(H, W, 3),
        "depth": dist.reshape(H, W),
        "mask": mask.reshape(H, W),
        "semantic": sem.reshape(H, W, spec.semantic_dim),
        "attention": att.reshape(H, W),
        "points": points,
        "hit": hit,
        "uv": uv,
    }


def exact_flow(spec: SynthSpec, view, pose_other: CameraPose, dt):
    """Pixel displacement of each hit point into the other camera after
    advecting blob points by dt frames of their rigid velocity."""
    points = view["points"].copy()
    hit = view["hit"]
    for b, blob in enumerate(spec.blobs):
        m = hit == b + 1
        points[m] += dt * np.asarray(blob.velocity, dtype=np.float64)
    uv_other, depth = pose_other.project(points)
    flow = uv_other - view["uv"]
    flow[(hit < 0) | (depth <= 0)] = 0.0
    H, W = spec.image_height, spec.image_width
    return flow.reshape(H, W, 2)


def window_grids(spec: SynthSpec, layout, view, vectors, rng):
    """Per-window semantic and attention grids, one surface per patch.

    Each patch cell is labeled with the surface covering the majority of its
    full-resolution footprint (ties to the background) and takes that
    surface's semantic vector and attention level verbatim; silhouettes
    quantize to patch boundaries instead of averaging into feature mixtures.
    """
    H, W = spec.image_height, spec.image_width
    ps = layout.patch_stride
    labels = np.maximum(view["hit"], 0).reshape(H, W)
    n_regions = len(spec.blobs) + 1
    att_lut = np.array(
        [spec.plane_attention] + [b.attention for b in spec.blobs]
    )
    feats, atts = [], []
    for p in layout.windows:
        lh, lw = layout.level_sizes[p.level]
        bh, bw = H // lh, W // lw
        block = labels[
            p.row * bh : (p.row + p.height) * bh,
            p.col * bw : (p.col + p.width) * bw,
        ]
        gh, gw = p.height // ps, p.width // ps
        cells = (
            block.reshape(gh, ps * bh, gw, ps * bw)
            .transpose(0, 2, 1, 3)
            .reshape(gh, gw, -1)
        )
        counts = (cells[..., None] == np.arange(n_regions)).sum(axis=2)
        mode = counts.argmax(axis=-1)
        s_grid = vectors[mode]
        a_grid = att_lut[mode]
        if spec.feature_noise > 0:
            s_grid = s_grid + spec.feature_noise * rng.standard_normal(s_grid.shape)
        feats.append(s_grid.astype(np.float32))
        atts.append(np.clip(a_grid, 0.0, 1.0).astype(np.float32))
    return feats, atts


def generate_scene(spec: SynthSpec = None, seed=0):
    """Build the full raw-coordinate dataset plus its analytic ground truth."""
    spec = (spec or SynthSpec()).validate()
    vectors = semantic_vocabulary(
        len(spec.blobs), spec.semantic_dim, spec.max_pair_cos, seed
    )
    layout = make_layout(spec.pyramid_config(), (spec.image_height, spec.image_width))
    poses = camera_poses(spec)
    rng = np.random.default_rng([seed, 11])

    frames = []
    masks, true_depths, sem_maps, att_maps = [], [], [], []
    views = [render_view(spec, vectors, p, float(i)) for i, p in enumerate(poses)]
    for i, (pose, view) in enumerate(zip(poses, views)):
        H, W = spec.image_height, spec.image_width
        if i + 1 < len(poses):
            flow_fwd = exact_flow(spec, view, poses[i + 1], +1.0)
        else:
            flow_fwd = np.zeros((H, W, 2))
        if i > 0:
            flow_bwd = exact_flow(spec, view, poses[i - 1], -1.0)
        else:
            flow_bwd = np.zeros((H, W, 2))
        depth_prior = spec.depth_scale * view["depth"] + spec.depth_shift
        if spec.depth_noise > 0:
            depth_prior = depth_prior + spec.depth_noise * rng.standard_normal(
                depth_prior.shape
            )
        feats, atts = window_grids(spec, layout, view, vectors, rng)
        frames.append(
            FrameBundle(
                rgb=view["rgb"].astype(np.float32),
                depth_prior=depth_prior.astype(np.float32),
                flow_fwd=flow_fwd.astype(np.float32),
                flow_bwd=flow_bwd.astype(np.float32),
                window_features=feats,
                window_attention=atts,
                pose=pose,
                mask=view["mask"],
            )
        )
        masks.append(view["mask"])
        true_depths.append(view["depth"])
        sem_maps.append(view["semantic"])
        att_maps.append(view["attention"])

    holdout = []
    holdout_masks = []
    for pose in holdout_poses(spec):
        view = render_view(spec, vectors, pose, pose.time_index)
        holdout.append(
            HoldoutView(pose=pose, rgb=view["rgb"].astype(np.float32), mask=view["mask"])
        )
        holdout_masks.append(view["mask"])

    dataset = SceneDataset(
        frames=frames,
        holdout=holdout,
        bounds=None,
        space=None,
        pyramid_layout=layout,
        depth_range=spec.depth_range,
    )
    gt = GroundTruth(
        masks=masks,
        holdout_masks=holdout_masks,
        true_depth=true_depths,
        semantic_vectors=vectors,
        attention_values=np.concatenate(
            [[spec.plane_attention], [b.attention for b in spec.blobs]]
        ),
        semantic_maps=sem_maps,
        attention_maps=att_maps,
    )
    return dataset, gt


def ground_truth_decomposition(gt: GroundTruth):
    """Exact labels from blob membership: background label 0 (not salient),
    every blob label salient."""
    k = len(gt.attention_values) - 1
    salient = np.concatenate([[False], np.ones(k, dtype=bool)])
    return [m.astype(np.int64) for m in gt.masks], salient


def write_synth_dataset(root, spec: SynthSpec = None, seed=0):
    """Generate and save a raw dataset directory; returns the ground truth."""
    dataset, gt = generate_scene(spec, seed)
    save_raw_dataset(dataset, root)
    return dataset, gt
