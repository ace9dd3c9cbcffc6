"""Training losses, decay, Adam, and the fit loop.

Every loss reduction is checked against an explicit-loop reference, and every
term's analytic gradient is checked against central finite differences on a
tiny two-layer network.
"""

import json
import math

import numpy as np
import pytest

from volseg import tape
from volseg.field import (
    EncodingConfig,
    FieldConfig,
    backward as field_backward,
    init_field_params,
)
from volseg.pyramid import make_layout
from volseg.render import (
    composite,
    composite_warped,
    make_sample_batch,
    project_scene_flow,
)
from volseg.scene_io import Bounds, CameraPose, generate_rays
from volseg.synth import SynthSpec, generate_scene
from volseg.training import (
    AdamState,
    DecaySchedule,
    LossWeights,
    SceneReconstructor,
    TrainConfig,
    TrainingError,
    adam_step,
    align_depth_affine,
    blend_entropy,
    build_contexts,
    cycle_consistency,
    depth_prior_loss,
    feature_reconstruction_loss,
    fit,
    flow_magnitude,
    flow_prior_loss,
    flow_smoothness,
    init_adam_state,
    layout_pyramid_config,
    occlusion_prior,
    photometric_loss,
    reprojection_loss,
    total_loss,
)
from volseg.validation import ValidationError


# ---------------------------------------------------------------------------
# explicit-loop reference reductions
# ---------------------------------------------------------------------------


def loop_photometric(color, rgb):
    total = 0.0
    for r in range(rgb.shape[0]):
        for c in range(rgb.shape[1]):
            total += (color[r, c] - rgb[r, c]) ** 2
    return total / rgb.shape[0]


def loop_reprojection(warped, target, w):
    target = np.atleast_2d(target.T).T if target.ndim == 1 else target
    warped = warped.reshape(target.shape)
    total = 0.0
    for r in range(target.shape[0]):
        err = 0.0
        for c in range(target.shape[1]):
            err += (warped[r, c] - target[r, c]) ** 2
        total += w[r] * err
    return total / target.shape[0]


def loop_flow_prior(projected, prior):
    total = 0.0
    for r in range(prior.shape[0]):
        for c in range(prior.shape[1]):
            total += abs(projected[r, c] - prior[r, c])
    return total / prior.shape[0]


def loop_occ(weight_arrays):
    terms = [np.mean((1.0 - w) ** 2) for w in weight_arrays]
    return float(np.mean(terms))


def loop_flow_mag(flows):
    terms = [np.mean(np.sum(np.abs(f), axis=-1)) for f in flows]
    return float(np.mean(terms))


def loop_flow_smooth(grids):
    terms = []
    for g in grids:
        R, K, _ = g.shape
        total = 0.0
        for r in range(R):
            for k in range(K - 1):
                for c in range(3):
                    total += abs(g[r, k, c] - g[r, k + 1, c])
        terms.append(total / (R * (K - 1)))
    return float(np.mean(terms))


def loop_cycle(pairs):
    terms = [np.mean(np.sum(np.abs(a + b), axis=-1)) for a, b in pairs]
    return float(np.mean(terms))


def loop_entropy(v):
    total = 0.0
    for x in np.asarray(v, dtype=float).ravel():
        if 0.0 < x < 1.0:
            total += -x * math.log(x) - (1 - x) * math.log(1 - x)
    return total / v.size


def loop_recon(pred, targets, weights):
    pred = np.atleast_2d(pred.T).T if pred.ndim == 1 else pred
    total = 0.0
    for lvl, t in enumerate(targets):
        t = np.atleast_2d(t.T).T if t.ndim == 1 else t
        level = 0.0
        for r in range(t.shape[0]):
            err = 0.0
            for c in range(t.shape[1]):
                err += (pred[r, c] - t[r, c]) ** 2
            level += weights[r, lvl] * err
        total += level / t.shape[0]
    return total


# ---------------------------------------------------------------------------
# loss reductions vs references
# ---------------------------------------------------------------------------


class TestLossReductions:
    def test_photometric_constant_offset(self):
        rgb = np.random.default_rng(0).uniform(0.2, 0.8, size=(7, 3))
        rendered = tape.as_tensor(rgb + 0.1)
        assert photometric_loss(rendered, rgb).data == pytest.approx(0.03, abs=1e-12)

    def test_photometric_matches_loop(self):
        rng = np.random.default_rng(1)
        rgb = rng.uniform(size=(9, 3))
        pred = rng.uniform(size=(9, 3))
        got = photometric_loss(tape.as_tensor(pred), rgb).data
        assert got == pytest.approx(loop_photometric(pred, rgb), rel=1e-12)

    def test_photometric_empty_batch_raises(self):
        with pytest.raises(ValidationError):
            photometric_loss(tape.as_tensor(np.zeros((0, 3))), np.zeros((0, 3)))

    def test_reprojection_zero_confidence_is_zero(self):
        rng = np.random.default_rng(2)
        warped = tape.as_tensor(rng.uniform(size=(6, 3)))
        target = rng.uniform(size=(6, 3))
        w = tape.as_tensor(np.zeros(6))
        assert reprojection_loss(warped, target, w).data == 0.0

    def test_reprojection_full_confidence_matches_unweighted(self):
        rng = np.random.default_rng(3)
        warped = rng.uniform(size=(6, 3))
        target = rng.uniform(size=(6, 3))
        w = tape.as_tensor(np.ones(6))
        got = reprojection_loss(tape.as_tensor(warped), target, w).data
        assert got == pytest.approx(loop_photometric(warped, target), rel=1e-12)

    def test_reprojection_matches_loop_with_weights(self):
        rng = np.random.default_rng(4)
        warped = rng.uniform(size=(5, 4))
        target = rng.uniform(size=(5, 4))
        w = rng.uniform(size=5)
        got = reprojection_loss(tape.as_tensor(warped), target, tape.as_tensor(w)).data
        assert got == pytest.approx(loop_reprojection(warped, target, w), rel=1e-12)

    def test_reprojection_scalar_channel(self):
        rng = np.random.default_rng(5)
        warped = rng.uniform(size=6)
        target = rng.uniform(size=6)
        w = rng.uniform(size=6)
        got = reprojection_loss(tape.as_tensor(warped), target, tape.as_tensor(w)).data
        assert got == pytest.approx(
            np.mean(w * (warped - target) ** 2), rel=1e-12
        )

    def test_flow_prior_unit_offset(self):
        rng = np.random.default_rng(6)
        prior = rng.uniform(size=(8, 2))
        projected = tape.as_tensor(prior + 1.0)
        assert flow_prior_loss(projected, prior).data == pytest.approx(2.0, abs=1e-12)

    def test_flow_prior_matches_loop(self):
        rng = np.random.default_rng(7)
        prior = rng.normal(size=(8, 2))
        proj = rng.normal(size=(8, 2))
        got = flow_prior_loss(tape.as_tensor(proj), prior).data
        assert got == pytest.approx(loop_flow_prior(proj, prior), rel=1e-12)


class TestDepthPriorLoss:
    def test_affine_transforms_give_zero(self):
        rng = np.random.default_rng(8)
        for trial in range(50):
            prior = rng.uniform(1.0, 5.0, size=16)
            a = rng.uniform(-2.0, 2.0)
            b = rng.uniform(-3.0, 3.0)
            rendered = tape.as_tensor(a * prior + b)
            loss = depth_prior_loss(rendered, prior).data
            assert loss < 1e-10, f"trial {trial}: affine ({a}, {b}) gave {loss}"

    def test_alignment_matches_polyfit(self):
        rng = np.random.default_rng(9)
        d = rng.uniform(size=32)
        p = rng.uniform(size=32)
        a, b = align_depth_affine(d, p)
        slope, intercept = np.polyfit(p, d, 1)
        assert a == pytest.approx(slope, rel=1e-9)
        assert b == pytest.approx(intercept, rel=1e-9)

    def test_residual_matches_manual_l1(self):
        rng = np.random.default_rng(10)
        d = rng.uniform(1, 4, size=20)
        p = rng.uniform(1, 4, size=20)
        a, b = align_depth_affine(d, p)
        expected = np.mean(np.abs(d - (a * p + b)))
        got = depth_prior_loss(tape.as_tensor(d), p).data
        assert got == pytest.approx(expected, rel=1e-12)

    def test_degenerate_prior_falls_back_to_shift(self):
        d = np.array([2.0, 3.0, 5.0, 6.0])
        p = np.full(4, 1.5)
        a, b = align_depth_affine(d, p)
        assert a == 1.0
        assert b == pytest.approx(d.mean() - 1.5)
        got = depth_prior_loss(tape.as_tensor(d), p).data
        assert got == pytest.approx(np.mean(np.abs(d - d.mean())), rel=1e-12)

    def test_needs_two_rays(self):
        with pytest.raises(ValidationError):
            depth_prior_loss(tape.as_tensor(np.ones(1)), np.ones(1))


class TestRegularizers:
    def test_full_confidence_gives_zero_occ(self):
        w = tape.as_tensor(np.ones(12))
        assert occlusion_prior([w, w]).data == 0.0

    def test_occ_matches_loop(self):
        rng = np.random.default_rng(11)
        a, b = rng.uniform(size=10), rng.uniform(size=10)
        got = occlusion_prior([tape.as_tensor(a), tape.as_tensor(b)]).data
        assert got == pytest.approx(loop_occ([a, b]), rel=1e-12)

    def test_zero_flow_gives_zero_everywhere(self):
        z = tape.as_tensor(np.zeros((8, 3)))
        zg = tape.as_tensor(np.zeros((2, 4, 3)))
        assert flow_magnitude([z, z]).data == 0.0
        assert flow_smoothness([zg, zg]).data == 0.0
        assert cycle_consistency([(z, z)]).data == 0.0

    def test_flow_mag_matches_loop(self):
        rng = np.random.default_rng(12)
        f, g = rng.normal(size=(9, 3)), rng.normal(size=(9, 3))
        got = flow_magnitude([tape.as_tensor(f), tape.as_tensor(g)]).data
        assert got == pytest.approx(loop_flow_mag([f, g]), rel=1e-12)

    def test_flow_smooth_matches_loop(self):
        rng = np.random.default_rng(13)
        g1 = rng.normal(size=(4, 5, 3))
        g2 = rng.normal(size=(4, 5, 3))
        got = flow_smoothness([tape.as_tensor(g1), tape.as_tensor(g2)]).data
        assert got == pytest.approx(loop_flow_smooth([g1, g2]), rel=1e-12)

    def test_constant_flow_along_ray_is_smooth(self):
        g = np.broadcast_to(
            np.array([0.3, -0.2, 0.5]), (6, 7, 3)
        ).copy()
        assert flow_smoothness([tape.as_tensor(g)]).data == 0.0

    def test_cycle_matches_loop_and_inverse_flow_is_zero(self):
        rng = np.random.default_rng(14)
        f = rng.normal(size=(10, 3))
        back = rng.normal(size=(10, 3))
        got = cycle_consistency([(tape.as_tensor(f), tape.as_tensor(back))]).data
        assert got == pytest.approx(loop_cycle([(f, back)]), rel=1e-12)
        exact = cycle_consistency([(tape.as_tensor(f), tape.as_tensor(-f))]).data
        assert exact == 0.0

    def test_entropy_exactly_zero_at_hard_assignments(self):
        v = tape.as_tensor(np.array([0.0, 1.0, 0.0, 1.0]))
        assert blend_entropy(v).data == 0.0

    def test_entropy_ln2_at_half(self):
        v = tape.as_tensor(np.full(6, 0.5))
        assert blend_entropy(v).data == pytest.approx(math.log(2), rel=1e-12)

    def test_entropy_matches_loop(self):
        rng = np.random.default_rng(15)
        v = rng.uniform(0.01, 0.99, size=20)
        got = blend_entropy(tape.as_tensor(v)).data
        assert got == pytest.approx(loop_entropy(v), rel=1e-10)


class TestFeatureReconstruction:
    def test_single_level_is_plain_mse(self):
        rng = np.random.default_rng(16)
        pred = rng.normal(size=(7, 5))
        target = rng.normal(size=(7, 5))
        weights = np.ones((7, 1))
        got = feature_reconstruction_loss(tape.as_tensor(pred), [target], weights).data
        assert got == pytest.approx(loop_photometric(pred, target), rel=1e-12)

    def test_three_levels_match_loop(self):
        rng = np.random.default_rng(17)
        pred = rng.normal(size=(6, 4))
        targets = [rng.normal(size=(6, 4)) for _ in range(3)]
        w = rng.uniform(size=(6, 3))
        w /= w.sum(axis=1, keepdims=True)
        got = feature_reconstruction_loss(
            tape.as_tensor(pred), targets, w
        ).data
        assert got == pytest.approx(loop_recon(pred, targets, w), rel=1e-12)

    def test_scalar_channel_levels(self):
        rng = np.random.default_rng(18)
        pred = rng.uniform(size=8)
        targets = [rng.uniform(size=8) for _ in range(2)]
        w = np.full((8, 2), 0.5)
        got = feature_reconstruction_loss(tape.as_tensor(pred), targets, w).data
        expected = sum(np.mean(0.5 * (pred - t) ** 2) for t in targets)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_level_count_mismatch_raises(self):
        with pytest.raises(ValidationError):
            feature_reconstruction_loss(
                tape.as_tensor(np.zeros((4, 2))), [np.zeros((4, 2))], np.ones((4, 2))
            )


# ---------------------------------------------------------------------------
# decay schedule
# ---------------------------------------------------------------------------


class TestDecaySchedule:
    def test_boundary_values(self):
        s = DecaySchedule()
        assert s.rate(0) == 1.0
        assert s.rate(299_999) == 1.0
        assert s.rate(300_000) == pytest.approx(0.1, rel=1e-15)
        assert s.rate(599_999) == pytest.approx(0.1, rel=1e-15)
        assert s.rate(600_000) == pytest.approx(0.01, rel=1e-15)

    def test_feature_terms_never_decay_by_default(self):
        s = DecaySchedule()
        for it in (0, 299_999, 300_000, 900_000):
            assert s.feature_rate(it) == 1.0

    def test_ablation_applies_schedule_to_features(self):
        s = DecaySchedule(decay_features=True)
        assert s.feature_rate(299_999) == 1.0
        assert s.feature_rate(300_000) == pytest.approx(0.1, rel=1e-15)

    def test_negative_iteration_rejected(self):
        with pytest.raises(ValidationError):
            DecaySchedule().rate(-1)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class TestAdam:
    def test_zero_gradient_leaves_values_unchanged(self):
        values = {"w": np.array([1.0, -2.0, 3.0])}
        before = values["w"].copy()
        state = init_adam_state(values)
        adam_step(values, {"w": np.zeros(3)}, state)
        assert np.array_equal(values["w"], before)

    def test_single_step_closed_form(self):
        g = np.array([0.3, -0.7])
        values = {"w": np.array([1.0, 1.0])}
        state = init_adam_state(values)
        lr = 5e-4
        adam_step(values, {"w": g.copy()}, state, lr=lr)
        expected = 1.0 - lr * g / (np.abs(g) + 1e-8)
        assert np.allclose(values["w"], expected, atol=1e-12)

    def test_two_steps_match_manual_recurrence(self):
        rng = np.random.default_rng(19)
        g1, g2 = rng.normal(size=4), rng.normal(size=4)
        values = {"w": rng.normal(size=4)}
        expected = values["w"].copy()
        state = init_adam_state(values)
        lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
        m = v = np.zeros(4)
        for t, g in enumerate([g1, g2], start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            expected = expected - lr * (m / (1 - b1**t)) / (
                np.sqrt(v / (1 - b2**t)) + eps
            )
        adam_step(values, {"w": g1}, state, lr=lr)
        adam_step(values, {"w": g2}, state, lr=lr)
        assert np.allclose(values["w"], expected, atol=1e-12)

    def test_clipping_scales_global_norm(self):
        g = {"a": np.array([30.0, 40.0]), "b": np.array([120.0])}  # norm 130
        values = {"a": np.zeros(2), "b": np.zeros(1)}
        state = init_adam_state(values)
        norm, clipped = adam_step(values, g, state, clip_norm=100.0)
        assert norm == pytest.approx(130.0)
        assert clipped
        ref_values = {"a": np.zeros(2), "b": np.zeros(1)}
        ref_state = init_adam_state(ref_values)
        scaled = {k: v * (100.0 / 130.0) for k, v in g.items()}
        adam_step(ref_values, scaled, ref_state, clip_norm=None)
        for k in values:
            assert np.allclose(values[k], ref_values[k], atol=1e-15)

    def test_no_clip_below_threshold(self):
        g = {"a": np.array([3.0, 4.0])}  # norm 5
        values = {"a": np.zeros(2)}
        state = init_adam_state(values)
        norm, clipped = adam_step(values, g, state, clip_norm=100.0)
        assert norm == pytest.approx(5.0)
        assert not clipped


# ---------------------------------------------------------------------------
# gradient suite: analytic vs central finite differences on a tiny net
# ---------------------------------------------------------------------------


TINY_CFG = FieldConfig(
    n_layers=2,
    width=8,
    semantic_dim=4,
    encoding=EncodingConfig(n_freq_position=2, n_freq_direction=1, n_freq_time=1),
    n_frames=3,
)


def tiny_env(seed=0):
    """4 rays, 3 samples each, random supervision targets."""
    rng = np.random.default_rng(seed)
    pose = CameraPose(
        rotation=np.eye(3),
        translation=np.zeros(3),
        fx=8.0,
        fy=8.0,
        cx=1.0,
        cy=1.0,
        time_index=1,
    )
    bounds = Bounds(lo=np.array([-5.0, -5.0, -5.0]), hi=np.array([5.0, 5.0, -0.5]))
    rays = generate_rays(pose, 2, 2, bounds)
    params = init_field_params(TINY_CFG, seed=seed)
    targets = {
        "rgb": rng.uniform(0.1, 0.9, size=(4, 3)),
        "depth": rng.uniform(1.0, 4.0, size=4),
        "flow": rng.uniform(-1.0, 1.0, size=(4, 2)),
        "feat": [rng.normal(size=(4, 4)) for _ in range(2)],
        "att": [rng.uniform(size=4) for _ in range(2)],
        "weights": np.column_stack([np.full(4, 0.25), np.full(4, 0.75)]),
        "combined_feat": rng.normal(size=(4, 4)),
        "combined_att": rng.uniform(size=4),
    }
    pose_next = CameraPose(
        rotation=np.eye(3),
        translation=np.array([0.15, 0.0, 0.0]),
        fx=8.0,
        fy=8.0,
        cx=1.0,
        cy=1.0,
        time_index=2,
    )
    return rays, params, targets, pose_next


def term_value(name, tensors, rays, targets, pose_next, frozen_ab=None):
    """One named loss term as a scalar Tensor of the parameters."""
    batch = make_sample_batch(tensors, TINY_CFG, rays, 3)
    if name == "photometric":
        return photometric_loss(composite(batch).color, targets["rgb"])
    if name == "recon_semantic":
        return feature_reconstruction_loss(
            composite(batch).semantic, targets["feat"], targets["weights"]
        )
    if name == "recon_attention":
        return feature_reconstruction_loss(
            composite(batch).attention, targets["att"], targets["weights"]
        )
    if name == "depth_prior":
        a, b = frozen_ab
        rendered = composite(batch).depth
        return tape.tmean(tape.tabs(rendered - (a * targets["depth"] + b)))
    if name == "flow_prior":
        projected, _ = project_scene_flow(batch, 2, pose_next)
        return flow_prior_loss(projected, targets["flow"])
    if name == "reproj_color":
        warped = composite_warped(batch, 2)
        return reprojection_loss(warped.color, targets["rgb"], warped.occlusion)
    if name == "reproj_semantic":
        warped = composite_warped(batch, 2)
        return reprojection_loss(
            warped.semantic, targets["combined_feat"], warped.occlusion
        )
    if name == "reproj_attention":
        warped = composite_warped(batch, 2)
        return reprojection_loss(
            warped.attention, targets["combined_att"], warped.occlusion
        )
    if name == "occ_prior":
        return occlusion_prior([batch.dynamic.occ_fwd, batch.dynamic.occ_bwd])
    if name == "flow_mag":
        return flow_magnitude([batch.dynamic.flow_fwd, batch.dynamic.flow_bwd])
    if name == "flow_smooth":
        return flow_smoothness(
            [
                batch._grid(batch.dynamic.flow_fwd, 3),
                batch._grid(batch.dynamic.flow_bwd, 3),
            ]
        )
    if name == "cycle":
        warped = composite_warped(batch, 2)
        return cycle_consistency(
            [(batch.dynamic.flow_fwd, warped.requeried.flow_bwd)]
        )
    if name == "entropy":
        return blend_entropy(batch.static.blend)
    raise KeyError(name)


ALL_TERMS = [
    "photometric",
    "recon_semantic",
    "recon_attention",
    "depth_prior",
    "flow_prior",
    "reproj_color",
    "reproj_semantic",
    "reproj_attention",
    "occ_prior",
    "flow_mag",
    "flow_smooth",
    "cycle",
    "entropy",
]


def check_term_gradient(name, eps=1e-3, n_entries=20, n_directions=3):
    """Max relative error between analytic and central-difference gradients,
    over the largest-magnitude parameter entries and random full-parameter
    directions."""
    rays, params, targets, pose_next = tiny_env(seed=0)

    frozen_ab = None
    if name == "depth_prior":
        base_batch = make_sample_batch(
            params.tensors(requires_grad=False), TINY_CFG, rays, 3
        )
        frozen_ab = align_depth_affine(
            composite(base_batch).depth.data, targets["depth"]
        )

    def value_at(values):
        tensors = {k: tape.Tensor(v) for k, v in values.items()}
        return float(
            term_value(name, tensors, rays, targets, pose_next, frozen_ab).data
        )

    tensors = params.tensors(requires_grad=True)
    loss = term_value(name, tensors, rays, targets, pose_next, frozen_ab)
    grads = field_backward(loss, tensors)

    def rel_err(a, b):
        scale = max(abs(a), abs(b))
        if scale < 1e-6:
            return 0.0 if abs(a - b) < 1e-8 else 1.0
        return abs(a - b) / scale

    flat = np.concatenate([grads[k].ravel() for k in params.values])
    order = np.argsort(-np.abs(flat))[:n_entries]
    names, offsets = list(params.values), [0]
    for k in names:
        offsets.append(offsets[-1] + params.values[k].size)

    errs = []
    for pos in order:
        k = next(
            n for i, n in enumerate(names) if offsets[i] <= pos < offsets[i + 1]
        )
        local = pos - offsets[names.index(k)]
        values = {n: v.copy() for n, v in params.values.items()}
        flat_k = values[k].ravel()
        orig = flat_k[local]
        flat_k[local] = orig + eps
        up = value_at(values)
        flat_k[local] = orig - eps
        down = value_at(values)
        flat_k[local] = orig
        errs.append(rel_err((up - down) / (2 * eps), float(flat[pos])))

    rng = np.random.default_rng(42)
    for _ in range(n_directions):
        u = {k: rng.normal(size=v.shape) for k, v in params.values.items()}
        norm = np.sqrt(sum(float((x * x).sum()) for x in u.values()))
        u = {k: x / norm for k, x in u.items()}
        up_vals = {k: params.values[k] + eps * u[k] for k in u}
        down_vals = {k: params.values[k] - eps * u[k] for k in u}
        fd = (value_at(up_vals) - value_at(down_vals)) / (2 * eps)
        analytic = sum(float((grads[k] * u[k]).sum()) for k in u)
        errs.append(rel_err(fd, analytic))
    return max(errs)


class TestGradientSuite:
    @pytest.mark.parametrize("name", ALL_TERMS)
    def test_term_gradient_matches_finite_differences(self, name):
        assert check_term_gradient(name) < 1e-4

    def test_total_loss_gradient_matches_finite_differences(self):
        spec = SynthSpec(
            image_height=8,
            image_width=8,
            n_frames=3,
            window_width=8,
            window_height=8,
            window_stride=8,
            pyramid_levels=1,
            semantic_dim=6,
            n_holdout=1,
        )
        ds, _ = generate_scene(spec, seed=1)
        from volseg.scene_io import normalize_dataset
        from volseg.pyramid import build_pyramids

        ds = normalize_dataset(ds)
        cfgp = layout_pyramid_config(ds.pyramid_layout, 6)
        pyramids, _ = build_pyramids(ds.frames, ds.pyramid_layout, cfgp)
        contexts = build_contexts(ds, pyramids)
        cfg = FieldConfig(
            n_layers=2,
            width=8,
            semantic_dim=contexts[0].combined_feature.shape[1],
            encoding=EncodingConfig(2, 1, 1),
            n_frames=3,
        )
        params = init_field_params(cfg, seed=3)
        idx = np.arange(4)
        weights, schedule = LossWeights(), DecaySchedule()

        def value_at(values):
            tensors = {k: tape.Tensor(v) for k, v in values.items()}
            loss, _ = total_loss(
                tensors, cfg, contexts, 1, idx, weights, schedule, 0, 3
            )
            return float(loss.data)

        tensors = params.tensors(requires_grad=True)
        loss, _ = total_loss(
            tensors, cfg, contexts, 1, idx, weights, schedule, 0, 3
        )
        grads = field_backward(loss, tensors)
        rng = np.random.default_rng(7)
        eps = 1e-3
        for _ in range(3):
            u = {k: rng.normal(size=v.shape) for k, v in params.values.items()}
            norm = np.sqrt(sum(float((x * x).sum()) for x in u.values()))
            u = {k: x / norm for k, x in u.items()}
            fd = (
                value_at({k: params.values[k] + eps * u[k] for k in u})
                - value_at({k: params.values[k] - eps * u[k] for k in u})
            ) / (2 * eps)
            analytic = sum(float((grads[k] * u[k]).sum()) for k in u)
            assert abs(fd - analytic) / max(abs(fd), abs(analytic)) < 1e-4


# ---------------------------------------------------------------------------
# total loss behavior
# ---------------------------------------------------------------------------


def small_dataset(seed=0, n_frames=3):
    spec = SynthSpec(
        image_height=16,
        image_width=16,
        n_frames=n_frames,
        window_width=16,
        window_height=16,
        window_stride=8,
        pyramid_levels=1,
        semantic_dim=8,
        n_holdout=1,
    )
    return generate_scene(spec, seed=seed)


class TestTotalLoss:
    def setup_method(self):
        from volseg.pyramid import build_pyramids
        from volseg.scene_io import normalize_dataset

        ds, _ = small_dataset()
        self.ds = normalize_dataset(ds)
        cfgp = layout_pyramid_config(self.ds.pyramid_layout, 8)
        pyramids, _ = build_pyramids(self.ds.frames, self.ds.pyramid_layout, cfgp)
        self.contexts = build_contexts(self.ds, pyramids)
        cfg = FieldConfig(
            n_layers=2,
            width=8,
            semantic_dim=8,
            encoding=EncodingConfig(2, 1, 1),
            n_frames=self.ds.n_frames,
        )
        self.cfg = cfg
        self.params = init_field_params(cfg, seed=0)

    def run_loss(self, frame, iteration=0, schedule=None):
        return total_loss(
            self.params.tensors(requires_grad=False),
            self.cfg,
            self.contexts,
            frame,
            np.arange(8),
            LossWeights(),
            schedule or DecaySchedule(),
            iteration,
            4,
        )

    def test_breakdown_contains_every_term(self):
        _, breakdown = self.run_loss(1)
        expected = {
            "photometric",
            "reproj_color",
            "reproj_semantic",
            "reproj_attention",
            "depth_prior",
            "flow_prior",
            "recon_semantic",
            "recon_attention",
            "occ_prior",
            "flow_mag",
            "flow_smooth",
            "cycle",
            "entropy",
            "decay",
            "feature_decay",
            "total",
        }
        assert expected <= set(breakdown)
        assert all(np.isfinite(v) for v in breakdown.values())

    def test_boundary_frames_use_single_neighbor(self):
        _, first = self.run_loss(0)
        _, last = self.run_loss(2)
        assert np.isfinite(first["reproj_color"])
        assert np.isfinite(last["reproj_color"])

    def test_decay_reduces_only_prior_terms(self):
        loss0, b0 = self.run_loss(1, iteration=0)
        loss1, b1 = self.run_loss(1, iteration=300_000)
        for key in ("photometric", "depth_prior", "flow_prior", "recon_semantic"):
            assert b0[key] == pytest.approx(b1[key], rel=1e-12)
        w = LossWeights()
        expected_drop = 0.9 * (
            w.depth_prior * b0["depth_prior"] + w.flow_prior * b0["flow_prior"]
        )
        assert float(loss0.data) - float(loss1.data) == pytest.approx(
            expected_drop, rel=1e-9
        )

    def test_feature_decay_ablation_also_reduces_feature_terms(self):
        schedule = DecaySchedule(decay_features=True)
        loss0, b0 = self.run_loss(1, iteration=0, schedule=schedule)
        loss1, b1 = self.run_loss(1, iteration=300_000, schedule=schedule)
        w = LossWeights()
        expected_drop = 0.9 * (
            w.depth_prior * b0["depth_prior"]
            + w.flow_prior * b0["flow_prior"]
            + w.semantic_reproj * b0["reproj_semantic"]
            + w.attention_reproj * b0["reproj_attention"]
            + w.semantic_recon * b0["recon_semantic"]
            + w.attention_recon * b0["recon_attention"]
        )
        assert float(loss0.data) - float(loss1.data) == pytest.approx(
            expected_drop, rel=1e-9
        )

    def test_total_is_weighted_sum_of_breakdown(self):
        w = LossWeights()
        _, b = self.run_loss(1)
        manual = (
            b["photometric"]
            + w.reproj_color * b["reproj_color"]
            + w.depth_prior * b["depth_prior"]
            + w.flow_prior * b["flow_prior"]
            + w.semantic_reproj * b["reproj_semantic"]
            + w.attention_reproj * b["reproj_attention"]
            + w.semantic_recon * b["recon_semantic"]
            + w.attention_recon * b["recon_attention"]
            + w.flow_mag * b["flow_mag"]
            + w.flow_smooth * b["flow_smooth"]
            + w.occ_prior * b["occ_prior"]
            + w.cycle * b["cycle"]
            + w.entropy * b["entropy"]
        )
        assert b["total"] == pytest.approx(manual, rel=1e-9)


# ---------------------------------------------------------------------------
# fit loop
# ---------------------------------------------------------------------------


def tiny_train_config(**kw):
    base = dict(
        n_iterations=8,
        batch_rays=32,
        n_samples=6,
        field_layers=2,
        field_width=16,
        n_freq_position=2,
        n_freq_direction=1,
        n_freq_time=1,
        log_every=2,
        seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestFit:
    def test_zero_iterations_returns_initialization(self):
        ds, _ = small_dataset()
        res = fit(ds, tiny_train_config(n_iterations=0))
        init = init_field_params(res.field_config, seed=0)
        assert res.params.checksum() == init.checksum()
        assert res.log == []

    def test_same_seed_reproduces_checksum(self):
        ds, _ = small_dataset()
        r1 = fit(ds, tiny_train_config())
        r2 = fit(ds, tiny_train_config())
        assert r1.params.checksum() == r2.params.checksum()
        assert [rec["total"] for rec in r1.log] == [rec["total"] for rec in r2.log]

    def test_different_seed_changes_parameters(self):
        ds, _ = small_dataset()
        r1 = fit(ds, tiny_train_config(seed=0))
        r2 = fit(ds, tiny_train_config(seed=1))
        assert r1.params.checksum() != r2.params.checksum()

    def test_short_run_reduces_photometric_loss(self):
        ds, _ = small_dataset()
        res = fit(ds, tiny_train_config(n_iterations=120, log_every=10))
        early = np.mean([rec["photometric"] for rec in res.log[:3]])
        late = np.mean([rec["photometric"] for rec in res.log[-3:]])
        assert late < early

    def test_nan_target_aborts_with_iteration_index(self):
        ds, _ = small_dataset()
        for frame in ds.frames:
            frame.rgb[:] = np.nan
        with pytest.raises(TrainingError, match="iteration 0"):
            fit(ds, tiny_train_config())

    def test_jsonl_log_written(self, tmp_path):
        ds, _ = small_dataset()
        path = tmp_path / "log.jsonl"
        res = fit(ds, tiny_train_config(), log_path=path)
        lines = [json.loads(l) for l in path.read_text().splitlines()]
        assert len(lines) == len(res.log)
        for line in lines:
            assert {"iter", "total", "photometric", "decay", "grad_norm"} <= set(line)

    def test_two_frame_dataset_trains(self):
        ds, _ = small_dataset(n_frames=2)
        res = fit(ds, tiny_train_config(n_iterations=4))
        assert np.isfinite(res.log[-1]["total"])

    def test_invalid_config_rejected(self):
        ds, _ = small_dataset()
        with pytest.raises(ValidationError):
            fit(ds, tiny_train_config(n_iterations=-1))
        with pytest.raises(ValidationError):
            fit(ds, tiny_train_config(batch_rays=1))


class TestLayoutRoundTrip:
    def test_pyramid_config_recovered_from_layout(self):
        from volseg.pyramid import PyramidConfig

        cfg = PyramidConfig(
            n_levels=2,
            window_width=16,
            window_height=16,
            window_stride=8,
            patch_stride=4,
            pca_dims=8,
        )
        layout = make_layout(cfg, (32, 32))
        back = layout_pyramid_config(layout, 8)
        assert back.n_levels == 2
        assert back.window_width == 16
        assert back.window_height == 16
        assert back.window_stride == 8
        assert back.patch_stride == 4


class TestSceneReconstructor:
    def test_clone_roundtrip(self):
        from sklearn.base import clone

        est = SceneReconstructor(n_iterations=3, seed=7, field_width=16)
        params = est.get_params()
        assert params["n_iterations"] == 3
        assert params["seed"] == 7
        cloned = clone(est)
        assert cloned.get_params() == params

    def test_unfitted_render_raises(self):
        with pytest.raises(ValidationError):
            SceneReconstructor().render_view(None, 0)

    def test_fit_then_render(self):
        ds, _ = small_dataset()
        est = SceneReconstructor(
            n_iterations=4,
            batch_rays=32,
            n_samples=6,
            field_layers=2,
            field_width=16,
            n_freq_position=2,
            n_freq_direction=1,
            n_freq_time=1,
        )
        est.fit(ds)
        maps = est.render_view(
            est.result_.dataset.frames[0].pose, 0, n_samples=6
        )
        assert maps["color"].shape == (16, 16, 3)
        assert np.isfinite(maps["depth"]).all()
