"""Losses, regularizers, the decay schedule, Adam, and the fit loop.

All loss terms take differentiable tensors for rendered quantities and plain
arrays for supervision targets, and return scalar tensors.  The total loss
for a ray batch combines reconstruction against the frame's own maps with
warped-reprojection terms against each temporal neighbor, weighted by the
rendered occlusion confidence; depth and flow prior terms decay by 10x every
300k iterations while the feature terms keep full weight (an ablation switch
applies the same schedule to them).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from . import tape
from .field import (
    EncodingConfig,
    FieldConfig,
    backward as field_backward,
    init_field_params,
)
from .pyramid import PyramidConfig, build_pyramids
from .render import (
    composite,
    composite_warped,
    make_sample_batch,
    project_scene_flow,
    render_frame,
)
from .scene_io import generate_rays, normalize_dataset
from .validation import ValidationError

ENTROPY_EPS = 1e-7


class TrainingError(RuntimeError):
    """Raised when optimization cannot proceed (non-finite loss)."""


# ---------------------------------------------------------------------------
# weights + schedule
# ---------------------------------------------------------------------------


@dataclass
class LossWeights:
    reproj_color: float = 1.0
    depth_prior: float = 0.04
    flow_prior: float = 0.02
    semantic_reproj: float = 1.0
    attention_reproj: float = 1.0
    semantic_recon: float = 0.04
    attention_recon: float = 0.04
    flow_mag: float = 0.1
    flow_smooth: float = 0.1
    occ_prior: float = 0.1
    cycle: float = 1.0
    entropy: float = 0.001

    def validate(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValidationError(f"loss weight {name} must be >= 0")
        return self


@dataclass
class DecaySchedule:
    """Prior-term decay: multiplier 10^-(iter // period).

    Applies to the depth and flow prior terms only; `decay_features` extends
    the same schedule to the semantic/attention terms (ablation behavior,
    off by default).
    """

    period: int = 300_000
    factor: float = 10.0
    decay_features: bool = False

    def rate(self, iteration):
        if iteration < 0:
            raise ValidationError("iteration must be >= 0")
        return float(self.factor ** -(iteration // self.period))

    def feature_rate(self, iteration):
        return self.rate(iteration) if self.decay_features else 1.0


# ---------------------------------------------------------------------------
# individual loss terms
# ---------------------------------------------------------------------------


def _per_ray_sq(pred, target):
    """Channel-summed squared error per ray; accepts (R,) or (R, C)."""
    diff = pred - np.asarray(target, dtype=np.float64)
    sq = tape.square(diff)
    if len(sq.shape) == 1:
        return sq
    return tape.tsum(sq, axis=-1)


def photometric_loss(rendered_color, target_rgb):
    """Mean over rays of the squared L2 color error."""
    target_rgb = np.asarray(target_rgb, dtype=np.float64)
    if target_rgb.size == 0:
        raise ValidationError("empty ray batch")
    return tape.tmean(_per_ray_sq(rendered_color, target_rgb))


def reprojection_loss(warped, target, w_hat):
    """Occlusion-weighted squared error against the neighbor's map."""
    target = np.asarray(target, dtype=np.float64)
    if target.size == 0:
        raise ValidationError("empty ray batch")
    return tape.tmean(w_hat * _per_ray_sq(warped, target))


def align_depth_affine(rendered_values, prior_values):
    """Least-squares (a, b) aligning prior to rendered depth; shift-only
    (a=1) when the prior is degenerate.  Plain numpy: gradients are not
    supposed to flow through the alignment."""
    d = np.asarray(rendered_values, dtype=np.float64)
    p = np.asarray(prior_values, dtype=np.float64)
    var = np.mean((p - p.mean()) ** 2)
    if var < 1e-12:
        return 1.0, float(d.mean() - p.mean())
    a = float(np.mean(p * d) - p.mean() * d.mean()) / var
    return a, float(d.mean() - a * p.mean())


def depth_prior_loss(rendered_depth, prior_depth):
    """Mean L1 between rendered depth and the best affine fit of the prior."""
    prior_depth = np.asarray(prior_depth, dtype=np.float64)
    if prior_depth.size < 2:
        raise ValidationError("depth prior loss needs at least 2 rays")
    a, b = align_depth_affine(rendered_depth.data, prior_depth)
    return tape.tmean(tape.tabs(rendered_depth - (a * prior_depth + b)))


def flow_prior_loss(projected, prior_flow):
    """Mean over rays of the L1 displacement error (2 components summed)."""
    prior_flow = np.asarray(prior_flow, dtype=np.float64)
    if prior_flow.size == 0:
        raise ValidationError("empty ray batch")
    return tape.tmean(tape.tsum(tape.tabs(projected - prior_flow), axis=-1))


def occlusion_prior(occ_weights):
    """Mean (1 - w)^2 over the provided occlusion tensors."""
    terms = [tape.tmean(tape.square(1.0 - w)) for w in occ_weights]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def flow_magnitude(flows):
    """Mean per-sample L1 norm of scene flow vectors."""
    terms = [tape.tmean(tape.tsum(tape.tabs(f), axis=-1)) for f in flows]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def flow_smoothness(flow_grids):
    """Mean L1 difference between flow at adjacent samples along each ray;
    grids are (R, K, 3)."""
    terms = []
    for g in flow_grids:
        diff = g[:, :-1, :] - g[:, 1:, :]
        terms.append(tape.tmean(tape.tsum(tape.tabs(diff), axis=-1)))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def cycle_consistency(pairs):
    """Mean L1 of f_src(x, i) + f_back(x + f_src, j) over direction pairs."""
    terms = [
        tape.tmean(tape.tsum(tape.tabs(f_src + f_back), axis=-1))
        for f_src, f_back in pairs
    ]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def blend_entropy(blend):
    """Mean binary entropy of the blending weight; exactly 0 at v in {0, 1}."""
    v = blend
    vc = tape.clip(v, ENTROPY_EPS, 1.0 - ENTROPY_EPS)
    ent = -(vc * tape.log(vc)) - (1.0 - vc) * tape.log(1.0 - vc)
    interior = (v.data > 0.0) & (v.data < 1.0)
    return tape.tmean(tape.where(interior, ent, tape.as_tensor(np.zeros(ent.shape))))


def feature_reconstruction_loss(pred, level_targets, level_weights):
    """Sum over levels of the per-pixel-weighted squared error, ray-averaged.

    level_weights is (R, L) and sums to 1 per ray; targets are per-level maps
    sampled at the batch rays.
    """
    level_weights = np.asarray(level_weights, dtype=np.float64)
    if len(level_targets) != level_weights.shape[1]:
        raise ValidationError("one weight column per pyramid level required")
    total = None
    for lvl, target in enumerate(level_targets):
        term = tape.tmean(level_weights[:, lvl] * _per_ray_sq(pred, target))
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# frame context + total loss
# ---------------------------------------------------------------------------


@dataclass
class FrameContext:
    """Flattened supervision maps for one input frame."""

    index: int
    rays: object  # full-frame RayBatch
    pose: object
    rgb: np.ndarray  # (M, 3)
    depth_prior: np.ndarray  # (M,)
    flow_fwd: np.ndarray  # (M, 2)
    flow_bwd: np.ndarray  # (M, 2)
    feature_levels: list  # [(M, D)] reduced features per level
    attention_levels: list  # [(M,)]
    level_weights: np.ndarray  # (M, L)
    combined_feature: np.ndarray  # (M, D)
    combined_attention: np.ndarray  # (M,)


def build_contexts(ds, pyramids):
    H, W = ds.image_shape
    contexts = []
    for i, (frame, pyr) in enumerate(zip(ds.frames, pyramids)):
        rays = generate_rays(frame.pose, H, W, ds.bounds)
        contexts.append(
            FrameContext(
                index=i,
                rays=rays,
                pose=frame.pose,
                rgb=np.asarray(frame.rgb, dtype=np.float64).reshape(-1, 3),
                depth_prior=np.asarray(frame.depth_prior, dtype=np.float64).ravel(),
                flow_fwd=np.asarray(frame.flow_fwd, dtype=np.float64).reshape(-1, 2),
                flow_bwd=np.asarray(frame.flow_bwd, dtype=np.float64).reshape(-1, 2),
                feature_levels=[
                    fl.reshape(-1, fl.shape[-1]) for fl in pyr.feature_levels
                ],
                attention_levels=[al.reshape(-1) for al in pyr.attention_levels],
                level_weights=pyr.weights.reshape(-1, pyr.weights.shape[-1]),
                combined_feature=pyr.combined_feature().reshape(
                    -1, pyr.feature_levels[0].shape[-1]
                ),
                combined_attention=pyr.combined_attention().reshape(-1),
            )
        )
    return contexts


def total_loss(
    params,
    field_cfg,
    contexts,
    frame_index,
    ray_idx,
    weights: LossWeights,
    schedule: DecaySchedule,
    iteration,
    n_samples,
    stratified=False,
    sample_seed=0,
):
    """Full objective for one ray batch; returns (loss tensor, breakdown).

    Neighbor terms use j in {i-1, i+1} clipped at the sequence ends (boundary
    neighbors are dropped, not reflected).
    """
    ctx = contexts[frame_index]
    rays = ctx.rays.select(ray_idx)
    batch = make_sample_batch(
        params, field_cfg, rays, n_samples, stratified=stratified, rng_seed=sample_seed
    )
    out = composite(batch)
    decay = schedule.rate(iteration)
    feature_decay = schedule.feature_rate(iteration)

    terms = {}
    terms["photometric"] = photometric_loss(out.color, ctx.rgb[ray_idx])
    terms["recon_semantic"] = feature_reconstruction_loss(
        out.semantic,
        [fl[ray_idx] for fl in ctx.feature_levels],
        ctx.level_weights[ray_idx],
    )
    terms["recon_attention"] = feature_reconstruction_loss(
        out.attention,
        [al[ray_idx] for al in ctx.attention_levels],
        ctx.level_weights[ray_idx],
    )
    terms["depth_prior"] = depth_prior_loss(out.depth, ctx.depth_prior[ray_idx])
    terms["entropy"] = blend_entropy(batch.static.blend)
    terms["occ_prior"] = occlusion_prior(
        [batch.dynamic.occ_fwd, batch.dynamic.occ_bwd]
    )
    terms["flow_mag"] = flow_magnitude(
        [batch.dynamic.flow_fwd, batch.dynamic.flow_bwd]
    )
    terms["flow_smooth"] = flow_smoothness(
        [
            batch._grid(batch.dynamic.flow_fwd, 3),
            batch._grid(batch.dynamic.flow_bwd, 3),
        ]
    )

    neighbors = [
        j for j in (frame_index - 1, frame_index + 1) if 0 <= j < len(contexts)
    ]
    reproj_c = reproj_s = reproj_a = flow_p = cycle = None
    for j in neighbors:
        warped = composite_warped(batch, j)
        nctx = contexts[j]
        w_hat = warped.occlusion
        rc = reprojection_loss(warped.color, nctx.rgb[ray_idx], w_hat)
        rs = reprojection_loss(warped.semantic, nctx.combined_feature[ray_idx], w_hat)
        ra = reprojection_loss(
            warped.attention, nctx.combined_attention[ray_idx], w_hat
        )
        projected, _ = project_scene_flow(batch, j, nctx.pose)
        prior = ctx.flow_fwd[ray_idx] if j > frame_index else ctx.flow_bwd[ray_idx]
        fp = flow_prior_loss(projected, prior)
        if j > frame_index:
            cyc = cycle_consistency(
                [(batch.dynamic.flow_fwd, warped.requeried.flow_bwd)]
            )
        else:
            cyc = cycle_consistency(
                [(batch.dynamic.flow_bwd, warped.requeried.flow_fwd)]
            )
        reproj_c = rc if reproj_c is None else reproj_c + rc
        reproj_s = rs if reproj_s is None else reproj_s + rs
        reproj_a = ra if reproj_a is None else reproj_a + ra
        flow_p = fp if flow_p is None else flow_p + fp
        cycle = cyc if cycle is None else cycle + cyc
    scale = 1.0 / len(neighbors)
    terms["reproj_color"] = reproj_c * scale
    terms["reproj_semantic"] = reproj_s * scale
    terms["reproj_attention"] = reproj_a * scale
    terms["flow_prior"] = flow_p * scale
    terms["cycle"] = cycle * scale

    total = (
        terms["photometric"]
        + weights.reproj_color * terms["reproj_color"]
        + (weights.depth_prior * decay) * terms["depth_prior"]
        + (weights.flow_prior * decay) * terms["flow_prior"]
        + (weights.semantic_reproj * feature_decay) * terms["reproj_semantic"]
        + (weights.attention_reproj * feature_decay) * terms["reproj_attention"]
        + (weights.semantic_recon * feature_decay) * terms["recon_semantic"]
        + (weights.attention_recon * feature_decay) * terms["recon_attention"]
        + weights.flow_mag * terms["flow_mag"]
        + weights.flow_smooth * terms["flow_smooth"]
        + weights.occ_prior * terms["occ_prior"]
        + weights.cycle * terms["cycle"]
        + weights.entropy * terms["entropy"]
    )
    breakdown = {name: float(t.data) for name, t in terms.items()}
    breakdown["decay"] = decay
    breakdown["feature_decay"] = feature_decay
    breakdown["total"] = float(total.data)
    return total, breakdown


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0


def init_adam_state(values):
    return AdamState(
        m={k: np.zeros_like(v) for k, v in values.items()},
        v={k: np.zeros_like(v) for k, v in values.items()},
    )


def adam_step(
    values,
    grads,
    state: AdamState,
    lr=5e-4,
    betas=(0.9, 0.999),
    eps=1e-8,
    clip_norm=None,
):
    """In-place Adam update; returns (global grad norm, whether clipped)."""
    b1, b2 = betas
    norm_sq = 0.0
    for g in grads.values():
        norm_sq += float((g * g).sum())
    norm = float(np.sqrt(norm_sq))
    scale = 1.0
    clipped = False
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
        clipped = True
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, g in grads.items():
        g = g * scale
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        values[name] = values[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return norm, clipped


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def short_schedule_weights():
    """Loss weights calibrated for runs of a few thousand iterations.

    On short schedules the occlusion confidences can sink toward zero inside
    occupied regions — that silences every reprojection term for less than it
    costs under a 0.1-weight occlusion prior, and the 0.04-weight
    reconstruction terms alone are then too weak to train the semantic and
    attention heads.  Raising the occlusion prior makes that shortcut
    unprofitable, and raising the reconstruction weights gives the feature
    heads an anchor that does not route through the occlusion confidences.
    `LossWeights()` keeps the long-schedule reference values.
    """

    return LossWeights(semantic_recon=1.0, attention_recon=1.0, occ_prior=1.0)


@dataclass
class TrainConfig:
    n_iterations: int = 3000
    batch_rays: int = 320
    n_samples: int = 18
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 100.0
    seed: int = 0
    stratified: bool = True
    log_every: int = 25
    field_layers: int = 3
    field_width: int = 64
    n_freq_position: int = 6
    n_freq_direction: int = 2
    n_freq_time: int = 2
    pca_dims: int | None = None
    weights: LossWeights = dc_field(default_factory=short_schedule_weights)
    schedule: DecaySchedule = dc_field(default_factory=DecaySchedule)

    def validate(self):
        if self.n_iterations < 0:
            raise ValidationError("n_iterations must be >= 0")
        if self.batch_rays < 2:
            raise ValidationError("batch_rays must be >= 2")
        if self.n_samples < 1:
            raise ValidationError("n_samples must be >= 1")
        self.weights.validate()
        return self


@dataclass
class TrainResult:
    params: object  # FieldParams
    field_config: FieldConfig
    reducer: object  # PcaReducer
    pyramid_config: PyramidConfig
    contexts: list
    log: list
    dataset: object


def layout_pyramid_config(layout, pca_dims):
    """Reconstruct the pyramid parameters implied by a stored layout."""
    finest = [p for p in layout.windows if p.level == len(layout.level_sizes) - 1]
    heights = sorted({p.height for p in finest})
    widths = sorted({p.width for p in finest})
    starts = sorted({p.col for p in finest} | {p.row for p in finest})
    diffs = [b - a for a, b in zip(starts, starts[1:]) if b > a]
    stride = min(diffs) if diffs else max(1, widths[-1] // 2)
    return PyramidConfig(
        n_levels=len(layout.level_sizes),
        window_width=widths[-1],
        window_height=heights[-1],
        window_stride=stride,
        patch_stride=layout.patch_stride,
        pca_dims=pca_dims,
    )


def fit(dataset, config: TrainConfig = None, log_path=None):
    """Optimize field parameters on a dataset; deterministic given the seed.

    Returns a TrainResult with the fitted parameters, the PCA reducer for
    feature maps, per-frame contexts, and the training log (one record per
    log_every iterations: every loss term, decay rate, gradient norm).
    """
    config = (config or TrainConfig()).validate()
    if dataset.space is None:
        dataset = normalize_dataset(dataset)
    feat_dim = dataset.frames[0].window_features[0].shape[-1]
    pca_dims = config.pca_dims or min(64, feat_dim)
    cfgp = layout_pyramid_config(dataset.pyramid_layout, pca_dims)
    pyramids, reducer = build_pyramids(dataset.frames, dataset.pyramid_layout, cfgp)
    field_cfg = FieldConfig(
        n_layers=config.field_layers,
        width=config.field_width,
        semantic_dim=reducer.dims,
        encoding=EncodingConfig(
            n_freq_position=config.n_freq_position,
            n_freq_direction=config.n_freq_direction,
            n_freq_time=config.n_freq_time,
        ),
        n_frames=dataset.n_frames,
    )
    params = init_field_params(field_cfg, seed=config.seed)
    contexts = build_contexts(dataset, pyramids)
    state = init_adam_state(params.values)
    H, W = dataset.image_shape
    M = H * W
    log = []
    log_file = open(log_path, "w") if log_path else None
    try:
        for it in range(config.n_iterations):
            rng = np.random.default_rng([config.seed, 101, it])
            i = int(rng.integers(dataset.n_frames))
            ray_idx = rng.choice(M, size=min(config.batch_rays, M), replace=False)
            tensors = params.tensors(requires_grad=True)
            loss, breakdown = total_loss(
                tensors,
                field_cfg,
                contexts,
                i,
                ray_idx,
                config.weights,
                config.schedule,
                it,
                config.n_samples,
                stratified=config.stratified,
                sample_seed=int(rng.integers(2**31)),
            )
            if not np.isfinite(breakdown["total"]):
                raise TrainingError(f"non-finite loss at iteration {it}")
            grads = field_backward(loss, tensors)
            norm, clipped = adam_step(
                params.values,
                grads,
                state,
                lr=config.learning_rate,
                betas=(config.beta1, config.beta2),
                eps=config.adam_eps,
                clip_norm=config.clip_norm,
            )
            if it % config.log_every == 0 or it == config.n_iterations - 1:
                record = {
                    "iter": it,
                    "frame": i,
                    "grad_norm": norm,
                    "clipped": clipped,
                }
                record.update(breakdown)
                log.append(record)
                if log_file:
                    log_file.write(json.dumps(record, sort_keys=True) + "\n")
                    log_file.flush()
    finally:
        if log_file:
            log_file.close()
    return TrainResult(
        params=params,
        field_config=field_cfg,
        reducer=reducer,
        pyramid_config=cfgp,
        contexts=contexts,
        log=log,
        dataset=dataset,
    )


class SceneReconstructor(BaseEstimator):
    """sklearn-style wrapper around fit(): estimator in, trained fields out."""

    def __init__(
        self,
        n_iterations=2200,
        batch_rays=320,
        n_samples=18,
        learning_rate=5e-4,
        seed=0,
        stratified=True,
        log_every=25,
        clip_norm=100.0,
        field_layers=3,
        field_width=64,
        n_freq_position=6,
        n_freq_direction=2,
        n_freq_time=2,
        pca_dims=None,
    ):
        self.n_iterations = n_iterations
        self.batch_rays = batch_rays
        self.n_samples = n_samples
        self.learning_rate = learning_rate
        self.seed = seed
        self.stratified = stratified
        self.log_every = log_every
        self.clip_norm = clip_norm
        self.field_layers = field_layers
        self.field_width = field_width
        self.n_freq_position = n_freq_position
        self.n_freq_direction = n_freq_direction
        self.n_freq_time = n_freq_time
        self.pca_dims = pca_dims

    def _config(self):
        return TrainConfig(
            n_iterations=self.n_iterations,
            batch_rays=self.batch_rays,
            n_samples=self.n_samples,
            learning_rate=self.learning_rate,
            seed=self.seed,
            stratified=self.stratified,
            log_every=self.log_every,
            clip_norm=self.clip_norm,
            field_layers=self.field_layers,
            field_width=self.field_width,
            n_freq_position=self.n_freq_position,
            n_freq_direction=self.n_freq_direction,
            n_freq_time=self.n_freq_time,
            pca_dims=self.pca_dims,
        ).validate()

    def fit(self, dataset, log_path=None):
        self.result_ = fit(dataset, self._config(), log_path=log_path)
        return self

    def render_view(self, pose, time_index, n_samples=None, chunk=4096, return_cache=False):
        if not hasattr(self, "result_"):
            raise ValidationError("SceneReconstructor is not fitted")
        res = self.result_
        return render_frame(
            res.params.tensors(requires_grad=False),
            res.field_config,
            pose,
            res.dataset.image_shape,
            res.dataset.bounds,
            time_index,
            n_samples or self.n_samples,
            chunk=chunk,
            return_cache=return_cache,
        )
