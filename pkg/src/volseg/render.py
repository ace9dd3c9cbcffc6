"""Ray sampling and differentiable volume compositing.

Discretization along a ray with samples t_1 < ... < t_K inside
[t_near, t_far]:

    delta_k = t_{k+1} - t_k            (last delta = t_far - t_K)
    alpha_k = 1 - exp(-sigma_k delta_k)
    T_k     = prod_{j<k} (1 - alpha_j) = exp(-sum_{j<k} sigma_j delta_j)
    output  = sum_k T_k alpha_k u_k

The static and dynamic components mix per sample: combined density
sigma = v sigma_st + (1 - v) sigma_dy, and a combined channel u satisfies
sigma u = v sigma_st u_st + (1 - v) sigma_dy u_dy.  Where sigma = 0 the
channel is taken as 0 (its compositing weight is 0 there anyway).  The
fraction form keeps the v = 1 / v = 0 endpoints bitwise equal to
single-component compositing.

Warped compositing advects each sample point by the scene flow toward a
neighboring time step, re-queries the dynamic field there, and composites
along the *original* ray ordering using the warped densities.  Occlusion
confidence is integrated with the warped transmittance but the weights are
the source-time predictions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .field import DynamicSample, FieldConfig, StaticSample, eval_dynamic, eval_static
from .scene_io import CameraPose, RayBatch, generate_rays
from .tape import Tensor
from .validation import ValidationError


def sample_ray(rays: RayBatch, n_samples, stratified=False, rng_seed=0):
    """Sample distances (R, K) in [t_near, t_far]: bin midpoints, or one
    uniform draw per bin when stratified."""
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    R = len(rays)
    near = rays.t_near[:, None]
    far = rays.t_far[:, None]
    if stratified:
        rng = np.random.default_rng(rng_seed)
        offsets = rng.uniform(0.0, 1.0, size=(R, n_samples))
    else:
        offsets = np.full((R, n_samples), 0.5)
    bins = (np.arange(n_samples)[None, :] + offsets) / n_samples
    return near + bins * (far - near)


def ray_deltas(t, t_far):
    """Quadrature segment lengths; the last segment extends to t_far."""
    t = np.asarray(t)
    if t.ndim != 2:
        raise ValidationError("t must be (R, K)")
    if np.any(np.diff(t, axis=-1) <= 0):
        raise ValidationError("sample distances must be strictly increasing")
    last = np.asarray(t_far).reshape(-1, 1) - t[:, -1:]
    if np.any(last < 0):
        raise ValidationError("samples exceed t_far")
    return np.concatenate([np.diff(t, axis=-1), last], axis=-1)


@dataclass
class RaySampleBatch:
    """Field queries at every sample of a batch of rays from one time step."""

    rays: RayBatch
    t: np.ndarray  # (R, K)
    deltas: np.ndarray  # (R, K)
    points: np.ndarray  # (R, K, 3)
    static: StaticSample  # flat (R*K, ...) tensors
    dynamic: DynamicSample
    params: dict
    cfg: FieldConfig

    @property
    def n_rays(self):
        return self.t.shape[0]

    @property
    def n_samples(self):
        return self.t.shape[1]

    def _grid(self, tensor, channels=None):
        R, K = self.t.shape
        if channels is None:
            return tape.reshape(tensor, R, K)
        return tape.reshape(tensor, R, K, channels)


def make_sample_batch(
    params, cfg: FieldConfig, rays: RayBatch, n_samples, stratified=False, rng_seed=0
) -> RaySampleBatch:
    """Sample the rays and query both fields at every sample point."""
    t = sample_ray(rays, n_samples, stratified=stratified, rng_seed=rng_seed)
    deltas = ray_deltas(t, rays.t_far)
    points = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    flat = points.reshape(-1, 3)
    omega_flat = np.repeat(rays.directions, n_samples, axis=0)
    static = eval_static(params, cfg, flat, omega_flat)
    dynamic = eval_dynamic(params, cfg, flat, omega_flat, rays.time_index)
    return RaySampleBatch(
        rays=rays,
        t=t,
        deltas=deltas,
        points=points,
        static=static,
        dynamic=dynamic,
        params=params,
        cfg=cfg,
    )


@dataclass
class RenderedRays:
    """Composited per-ray channels (Tensors over R rays)."""

    color: Tensor  # (R, 3)
    depth: Tensor  # (R,)
    semantic: Tensor  # (R, S)
    attention: Tensor  # (R,)
    opacity: Tensor  # (R,)
    weights: Tensor  # (R, K) compositing weights T_k alpha_k
    blend: Tensor | None = None  # (R,) integrated v channel
    extras: dict | None = None  # direct channels integrated with T alpha


def _alpha_transmittance(sigma, deltas):
    s = sigma * Tensor(deltas)
    alpha = -tape.expm1(-s)
    T = tape.exp(-tape.exclusive_cumsum(s, axis=-1))
    return alpha, T


def _integrate(weights, channel, n_channels=None):
    if n_channels is None:
        return tape.tsum(weights * channel, axis=-1)
    return tape.tsum(tape.reshape(weights, *weights.shape, 1) * channel, axis=1)


def _composite_core(sigma, deltas, t, color, semantic, attention, extras):
    alpha, T = _alpha_transmittance(sigma, deltas)
    w = T * alpha
    out_extras = {name: _integrate(w, ch) for name, ch in (extras or {}).items()}
    return RenderedRays(
        color=_integrate(w, color, 3),
        depth=_integrate(w, Tensor(t)),
        semantic=_integrate(w, semantic, semantic.shape[-1]),
        attention=_integrate(w, attention),
        opacity=tape.tsum(w, axis=-1),
        weights=w,
        extras=out_extras,
    )


def _mixed_channels(batch: RaySampleBatch, dynamic: DynamicSample):
    """Combined density and channels from static + (possibly re-queried)
    dynamic samples, as (R, K[, C]) tensors."""
    R, K = batch.t.shape
    S = batch.static.semantic.shape[-1]
    v = batch._grid(batch.static.blend)
    sig_st = batch._grid(batch.static.density)
    sig_dy = tape.reshape(dynamic.density, R, K)
    sigma = v * sig_st + (1.0 - v) * sig_dy

    pos = sigma.data > 0.0
    safe = tape.where(pos, sigma, Tensor(np.ones_like(sigma.data)))
    zeros = Tensor(np.zeros_like(sigma.data))
    w_st = tape.where(pos, v * sig_st / safe, zeros)
    w_dy = tape.where(pos, (1.0 - v) * sig_dy / safe, zeros)

    def mix(u_st, u_dy, channels=None):
        a = batch._grid(u_st, channels)
        b = tape.reshape(u_dy, R, K) if channels is None else tape.reshape(u_dy, R, K, channels)
        if channels is None:
            return w_st * a + w_dy * b
        w3_st = tape.reshape(w_st, R, K, 1)
        w3_dy = tape.reshape(w_dy, R, K, 1)
        return w3_st * a + w3_dy * b

    color = mix(batch.static.color, dynamic.color, 3)
    semantic = mix(batch.static.semantic, dynamic.semantic, S)
    attention = mix(batch.static.attention, dynamic.attention)
    return sigma, color, semantic, attention, v


def composite(batch: RaySampleBatch) -> RenderedRays:
    """Composite the combined static+dynamic field along each ray."""
    sigma, color, semantic, attention, v = _mixed_channels(batch, batch.dynamic)
    out = _composite_core(
        sigma, batch.deltas, batch.t, color, semantic, attention, extras={"blend": v}
    )
    out.blend = out.extras.pop("blend")
    return out


def composite_single(batch: RaySampleBatch, which) -> RenderedRays:
    """Composite one component alone ("static" or "dynamic")."""
    if which not in ("static", "dynamic"):
        raise ValidationError("which must be 'static' or 'dynamic'")
    sample = batch.static if which == "static" else batch.dynamic
    S = sample.semantic.shape[-1]
    sigma = batch._grid(sample.density)
    return _composite_core(
        sigma,
        batch.deltas,
        batch.t,
        batch._grid(sample.color, 3),
        batch._grid(sample.semantic, S),
        batch._grid(sample.attention),
        extras=None,
    )


@dataclass
class WarpedRender:
    """Channels composited after advecting samples to a neighboring time."""

    color: Tensor  # (R, 3)
    semantic: Tensor  # (R, S)
    attention: Tensor  # (R,)
    occlusion: Tensor  # (R,) integrated source-time confidence w-hat
    opacity: Tensor  # (R,)
    weights: Tensor  # (R, K)
    advected: Tensor  # (R, K, 3) flowed sample points
    requeried: DynamicSample  # dynamic field at (advected, omega, j), flat


def _neighbor_flow(batch: RaySampleBatch, j):
    i = batch.rays.time_index
    if j == i + 1:
        return batch.dynamic.flow_fwd, batch.dynamic.occ_fwd
    if j == i - 1:
        return batch.dynamic.flow_bwd, batch.dynamic.occ_bwd
    raise ValidationError(f"warp target {j} is not a neighbor of time {i}")


def composite_warped(batch: RaySampleBatch, j) -> WarpedRender:
    """Advect samples by scene flow, re-query the dynamic field at time j,
    and composite along the original ray with the warped densities."""
    R, K = batch.t.shape
    flow, occ_src = _neighbor_flow(batch, j)
    advected = Tensor(batch.points.reshape(-1, 3)) + flow
    omega_flat = np.repeat(batch.rays.directions, K, axis=0)
    warped = eval_dynamic(batch.params, batch.cfg, advected, omega_flat, j)

    sigma, color, semantic, attention, _ = _mixed_channels(batch, warped)
    out = _composite_core(
        sigma,
        batch.deltas,
        batch.t,
        color,
        semantic,
        attention,
        extras={"occ": tape.reshape(occ_src, R, K)},
    )
    return WarpedRender(
        color=out.color,
        semantic=out.semantic,
        attention=out.attention,
        occlusion=out.extras["occ"],
        opacity=out.opacity,
        weights=out.weights,
        advected=tape.reshape(advected, R, K, 3),
        requeried=warped,
    )


def project_scene_flow(batch: RaySampleBatch, j, pose_j: CameraPose):
    """Expected 2D pixel displacement from advecting samples to time j and
    projecting onto pose_j's image plane.

    Returns (p_hat (R, 2) Tensor, n_behind).  Samples landing behind the
    target camera contribute zero and are tallied in n_behind.
    """
    R, K = batch.t.shape
    flow, _ = _neighbor_flow(batch, j)
    advected = Tensor(batch.points.reshape(-1, 3)) + flow

    rot = np.asarray(pose_j.rotation, dtype=float)
    pos = np.asarray(pose_j.translation, dtype=float)
    cam = (advected - Tensor(pos[None, :])) @ Tensor(rot)  # world -> camera
    depth = -cam[:, 2]
    in_front = depth.data > 0.0
    n_behind = int(np.count_nonzero(~in_front))
    safe_depth = tape.where(in_front, depth, Tensor(np.ones_like(depth.data)))
    u = pose_j.fx * cam[:, 0] / safe_depth + pose_j.cx
    v = -pose_j.fy * cam[:, 1] / safe_depth + pose_j.cy
    uv = tape.stack([u, v], axis=-1)  # (R*K, 2)

    src = np.repeat(batch.rays.pixel_uv, K, axis=0)
    disp = uv - Tensor(src)
    disp = tape.reshape(disp, R, K, 2)

    sigma, _, _, _, _ = _mixed_channels(batch, batch.dynamic)
    alpha, T = _alpha_transmittance(sigma, batch.deltas)
    w = T * alpha * Tensor(in_front.reshape(R, K).astype(batch.t.dtype))
    p_hat = tape.tsum(tape.reshape(w, R, K, 1) * disp, axis=1)
    return p_hat, n_behind


# ---------------------------------------------------------------------------
# full-frame rendering
# ---------------------------------------------------------------------------


@dataclass
class FrameRenderCache:
    """Per-sample component values for a full frame, for re-compositing
    subsets (object isolation) without touching the network again."""

    t: np.ndarray  # (R, K)
    deltas: np.ndarray
    sigma_st: np.ndarray  # (R, K)
    sigma_dy: np.ndarray
    blend: np.ndarray
    color_st: np.ndarray  # (R, K, 3)
    color_dy: np.ndarray
    sem_st: np.ndarray  # (R, K, S)
    sem_dy: np.ndarray
    att_st: np.ndarray  # (R, K)
    att_dy: np.ndarray
    image_shape: tuple

    def mixed_semantic(self):
        """Per-sample combined semantic channel (R, K, S), zero where sigma=0."""
        sigma = self.blend * self.sigma_st + (1.0 - self.blend) * self.sigma_dy
        safe = np.where(sigma > 0, sigma, 1.0)
        w_st = np.where(sigma > 0, self.blend * self.sigma_st / safe, 0.0)
        w_dy = np.where(sigma > 0, (1.0 - self.blend) * self.sigma_dy / safe, 0.0)
        return w_st[..., None] * self.sem_st + w_dy[..., None] * self.sem_dy


def composite_cache(cache: FrameRenderCache, keep=None):
    """Numpy re-composite of cached samples; ``keep`` (R, K) bool zeroes the
    density of dropped samples.  Mirrors the differentiable path exactly."""
    sig_st = cache.sigma_st
    sig_dy = cache.sigma_dy
    if keep is not None:
        keepf = keep.astype(sig_st.dtype)
        sig_st = sig_st * keepf
        sig_dy = sig_dy * keepf
    v = cache.blend
    sigma = v * sig_st + (1.0 - v) * sig_dy
    pos = sigma > 0.0
    safe = np.where(pos, sigma, 1.0)
    w_st = np.where(pos, v * sig_st / safe, 0.0)
    w_dy = np.where(pos, (1.0 - v) * sig_dy / safe, 0.0)

    s = sigma * cache.deltas
    alpha = -np.expm1(-s)
    shifted = np.cumsum(s, axis=-1)
    shifted = np.concatenate([np.zeros_like(shifted[:, :1]), shifted[:, :-1]], axis=-1)
    T = np.exp(-shifted)
    w = T * alpha

    def mix(a, b):
        if a.ndim == 3:
            return w_st[..., None] * a + w_dy[..., None] * b
        return w_st * a + w_dy * b

    H, W = cache.image_shape
    S = cache.sem_st.shape[-1]
    color = (w[..., None] * mix(cache.color_st, cache.color_dy)).sum(axis=1)
    sem = (w[..., None] * mix(cache.sem_st, cache.sem_dy)).sum(axis=1)
    att = (w * mix(cache.att_st, cache.att_dy)).sum(axis=1)
    depth = (w * cache.t).sum(axis=1)
    blend_img = (w * v).sum(axis=1)
    return {
        "color": color.reshape(H, W, 3),
        "depth": depth.reshape(H, W),
        "semantic": sem.reshape(H, W, S),
        "attention": att.reshape(H, W),
        "blend": blend_img.reshape(H, W),
        "opacity": w.sum(axis=1).reshape(H, W),
    }


def render_frame(
    params,
    cfg: FieldConfig,
    pose: CameraPose,
    image_shape,
    bounds,
    time_index,
    n_samples,
    chunk=4096,
    return_cache=False,
):
    """Render every pixel of a frame (no gradients), row-major chunks.

    Returns a dict of maps: color (H, W, 3), depth, semantic (H, W, S),
    attention, blend, opacity — plus a FrameRenderCache when requested.
    """
    H, W = image_shape
    rays = generate_rays(pose, H, W, bounds)
    rays.time_index = time_index
    maps = {}
    cache_parts = []
    with tape.no_grad():
        outs = []
        for start in range(0, len(rays), chunk):
            sub = rays.select(slice(start, start + chunk))
            batch = make_sample_batch(params, cfg, sub, n_samples)
            out = composite(batch)
            outs.append(
                {
                    "color": out.color.data,
                    "depth": out.depth.data,
                    "semantic": out.semantic.data,
                    "attention": out.attention.data,
                    "blend": out.blend.data,
                    "opacity": out.opacity.data,
                }
            )
            if return_cache:
                R, K = batch.t.shape
                S = batch.static.semantic.shape[-1]
                cache_parts.append(
                    FrameRenderCache(
                        t=batch.t,
                        deltas=batch.deltas,
                        sigma_st=batch.static.density.data.reshape(R, K),
                        sigma_dy=batch.dynamic.density.data.reshape(R, K),
                        blend=batch.static.blend.data.reshape(R, K),
                        color_st=batch.static.color.data.reshape(R, K, 3),
                        color_dy=batch.dynamic.color.data.reshape(R, K, 3),
                        sem_st=batch.static.semantic.data.reshape(R, K, S),
                        sem_dy=batch.dynamic.semantic.data.reshape(R, K, S),
                        att_st=batch.static.attention.data.reshape(R, K),
                        att_dy=batch.dynamic.attention.data.reshape(R, K),
                        image_shape=(H, W),
                    )
                )
    for key in outs[0]:
        arr = np.concatenate([o[key] for o in outs], axis=0)
        maps[key] = arr.reshape((H, W) + arr.shape[1:])
    if return_cache:
        cache = _concat_caches(cache_parts, (H, W))
        return maps, cache
    return maps


def _concat_caches(parts, image_shape):
    def cat(attr):
        return np.concatenate([getattr(p, attr) for p in parts], axis=0)

    return FrameRenderCache(
        t=cat("t"),
        deltas=cat("deltas"),
        sigma_st=cat("sigma_st"),
        sigma_dy=cat("sigma_dy"),
        blend=cat("blend"),
        color_st=cat("color_st"),
        color_dy=cat("color_dy"),
        sem_st=cat("sem_st"),
        sem_dy=cat("sem_dy"),
        att_st=cat("att_st"),
        att_dy=cat("att_dy"),
        image_shape=image_shape,
    )


def render_flow_map(
    params,
    cfg: FieldConfig,
    pose: CameraPose,
    image_shape,
    bounds,
    time_index,
    neighbor,
    pose_target=None,
    n_samples=24,
    chunk=4096,
):
    """Expected 2D displacement per pixel toward a neighboring time (H, W, 2).

    pose_target is the camera the advected points are projected into; it
    defaults to the source pose itself, which cancels camera parallax so the
    magnitude reflects object motion only.  Pass the neighbor frame's pose to
    get an optical-flow-style displacement instead.
    """
    H, W = image_shape
    rays = generate_rays(pose, H, W, bounds)
    rays.time_index = time_index
    target = pose_target if pose_target is not None else pose
    rows = []
    with tape.no_grad():
        for start in range(0, len(rays), chunk):
            sub = rays.select(slice(start, start + chunk))
            batch = make_sample_batch(params, cfg, sub, n_samples)
            p_hat, _ = project_scene_flow(batch, neighbor, target)
            rows.append(p_hat.data)
    return np.concatenate(rows, axis=0).reshape(H, W, 2)
