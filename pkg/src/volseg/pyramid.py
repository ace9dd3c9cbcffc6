"""Multi-scale per-pixel feature/attention targets from windowed extractor maps.

A pyramid level is a virtual frame size; sliding windows of a fixed size are
placed over it with a fixed stride (clamped so the final window touches the
frame edge).  Each window carries a patch-grid map of features and attention.
Fusion bilinearly upsamples every window grid into level pixel coordinates,
averages over all windows covering a pixel, then upsamples the level to the
finest (input) resolution.

Per-level loss weights blend from interior values (coarse->fine {1/9, 4/9,
4/9}) to uniform {1/3, 1/3, 1/3} at the frame boundary over a linear ramp one
window stride wide.

Feature maps are reduced with PCA: global mean removal, per-pixel L2
normalization, then projection onto the top principal components (largest-
magnitude coefficient of each component made positive so the basis is
deterministic).
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .scene_io import PyramidLayout, WindowPlacement, read_tensor, write_tensor
from .validation import ValidationError

INTERIOR_WEIGHTS_3 = (1.0 / 9.0, 4.0 / 9.0, 4.0 / 9.0)
BOUNDARY_WEIGHTS_3 = (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)


def _default_weights(n_levels, boundary):
    if n_levels == 3:
        return BOUNDARY_WEIGHTS_3 if boundary else INTERIOR_WEIGHTS_3
    return tuple([1.0 / n_levels] * n_levels)


@dataclass
class PyramidConfig:
    n_levels: int = 3
    window_width: int = 240
    window_height: int = 128
    window_stride: int = 64
    patch_stride: int = 4
    pca_dims: int = 64
    interior_weights: tuple | None = None  # coarse -> fine, defaults per n_levels
    boundary_weights: tuple | None = None

    def resolved_interior(self):
        w = self.interior_weights or _default_weights(self.n_levels, False)
        return np.asarray(w, dtype=np.float64)

    def resolved_boundary(self):
        w = self.boundary_weights or _default_weights(self.n_levels, True)
        return np.asarray(w, dtype=np.float64)

    def validate(self):
        if self.n_levels < 1:
            raise ValidationError("n_levels must be >= 1")
        for name in ("window_width", "window_height", "window_stride", "patch_stride"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        for arr, name in (
            (self.resolved_interior(), "interior_weights"),
            (self.resolved_boundary(), "boundary_weights"),
        ):
            if arr.shape != (self.n_levels,):
                raise ValidationError(f"{name} must have one entry per level")
            if abs(arr.sum() - 1.0) > 1e-9:
                raise ValidationError(f"{name} must sum to 1")
        return self


def level_sizes(cfg: PyramidConfig, input_shape):
    """Level frame sizes coarse -> fine: level 0 is the window size, the last
    level is the input size, intermediates interpolate geometrically."""
    H, W = input_shape
    h0 = min(cfg.window_height, H)
    w0 = min(cfg.window_width, W)
    if cfg.n_levels == 1:
        return [(H, W)]
    sizes = []
    for lvl in range(cfg.n_levels):
        f = lvl / (cfg.n_levels - 1)
        h = int(round(h0 * (H / h0) ** f))
        w = int(round(w0 * (W / w0) ** f))
        # keep dimensions divisible by the patch stride
        h = max(cfg.patch_stride, (h // cfg.patch_stride) * cfg.patch_stride)
        w = max(cfg.patch_stride, (w // cfg.patch_stride) * cfg.patch_stride)
        sizes.append((h, w))
    sizes[-1] = (H, W)
    return sizes


def _window_starts(frame, win, stride):
    if win >= frame:
        return [0]
    starts = list(range(0, frame - win + 1, stride))
    if starts[-1] != frame - win:
        starts.append(frame - win)
    return starts


def window_placements(cfg: PyramidConfig, level, level_size):
    """Sliding-window positions covering one level frame."""
    H, W = level_size
    wh = min(cfg.window_height, H)
    ww = min(cfg.window_width, W)
    return [
        WindowPlacement(level=level, row=r, col=c, height=wh, width=ww)
        for r in _window_starts(H, wh, cfg.window_stride)
        for c in _window_starts(W, ww, cfg.window_stride)
    ]


def make_layout(cfg: PyramidConfig, input_shape) -> PyramidLayout:
    cfg.validate()
    sizes = level_sizes(cfg, input_shape)
    windows = []
    for lvl, size in enumerate(sizes):
        windows.extend(window_placements(cfg, lvl, size))
    return PyramidLayout(level_sizes=sizes, windows=windows, patch_stride=cfg.patch_stride)


def bilinear_resize(img, out_h, out_w):
    """Bilinear resampling with half-pixel-centered coordinates."""
    img = np.asarray(img)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    H, W, C = img.shape
    if (H, W) == (out_h, out_w):
        out = img.copy()
        return out[..., 0] if squeeze else out

    def axis_coords(n_out, n_in):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0.0, n_in - 1.0)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = x - lo
        return lo, hi, frac

    r_lo, r_hi, r_f = axis_coords(out_h, H)
    c_lo, c_hi, c_f = axis_coords(out_w, W)
    top = img[r_lo][:, c_lo] * (1 - c_f)[None, :, None] + img[r_lo][:, c_hi] * c_f[None, :, None]
    bot = img[r_hi][:, c_lo] * (1 - c_f)[None, :, None] + img[r_hi][:, c_hi] * c_f[None, :, None]
    out = top * (1 - r_f)[:, None, None] + bot * r_f[:, None, None]
    return out[..., 0] if squeeze else out


def fuse_level(window_maps, placements, level_size, finest_size=None):
    """Average window patch-grids into a level frame, then upsample.

    Each window map is bilinearly upsampled to its placement's pixel size and
    accumulated; every level pixel must be covered by at least one window.
    Returns (fused map at finest_size or level_size, coverage count map).
    """
    if len(window_maps) != len(placements):
        raise ValidationError(
            f"{len(window_maps)} window maps for {len(placements)} placements"
        )
    if not placements:
        raise ValidationError("fuse_level needs at least one window")
    H, W = level_size
    first = np.asarray(window_maps[0])
    C = first.shape[2] if first.ndim == 3 else 1
    acc = np.zeros((H, W, C), dtype=np.float64)
    count = np.zeros((H, W), dtype=np.int64)
    for wmap, p in zip(window_maps, placements):
        wmap = np.asarray(wmap)
        if p.row < 0 or p.col < 0 or p.row + p.height > H or p.col + p.width > W:
            raise ValidationError(f"window at ({p.row},{p.col}) exceeds level {level_size}")
        up = bilinear_resize(wmap, p.height, p.width)
        if up.ndim == 2:
            up = up[..., None]
        acc[p.row : p.row + p.height, p.col : p.col + p.width] += up
        count[p.row : p.row + p.height, p.col : p.col + p.width] += 1
    if np.any(count == 0):
        r, c = np.argwhere(count == 0)[0]
        raise ValidationError(f"pixel ({r},{c}) not covered by any window")
    fused = acc / count[..., None]
    if finest_size is not None and tuple(finest_size) != (H, W):
        fused = bilinear_resize(fused, *finest_size)
    if first.ndim == 2:
        fused = fused[..., 0]
    return fused, count


def boundary_weight_map(cfg: PyramidConfig, H, W):
    """Per-pixel per-level loss weights (H, W, n_levels): interior values in
    the middle, uniform at the frame edge, linear ramp one stride wide."""
    cfg.validate()
    interior = cfg.resolved_interior()
    boundary = cfg.resolved_boundary()
    rows = np.arange(H)[:, None]
    cols = np.arange(W)[None, :]
    dist = np.minimum(
        np.minimum(rows, H - 1 - rows), np.minimum(cols, W - 1 - cols)
    ).astype(np.float64)
    ramp = np.clip(dist / cfg.window_stride, 0.0, 1.0)[..., None]
    return (1.0 - ramp) * boundary[None, None, :] + ramp * interior[None, None, :]


class PcaReducer(BaseEstimator):
    """Global-mean centering, per-row L2 normalization, then PCA projection.

    Components are rows of ``components_`` (dims, D); deterministic sign is
    enforced by making each component's largest-magnitude coefficient
    positive.  When the data rank falls short of ``dims`` the remaining rows
    are zero and a warning is raised.
    """

    def __init__(self, dims=64):
        self.dims = dims

    def _preprocess(self, X):
        X = np.asarray(X, dtype=np.float64) - self.mean_[None, :]
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        return X / np.where(norms > 0, norms, 1.0)

    def fit(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ValidationError("PcaReducer.fit expects (n_samples, n_features)")
        n, d = X.shape
        if n < self.dims:
            raise ValidationError(f"need at least dims={self.dims} samples, got {n}")
        self.mean_ = X.mean(axis=0)
        pre = self._preprocess(X)
        _, s, vt = np.linalg.svd(pre, full_matrices=False)
        tol = s[0] * max(n, d) * np.finfo(np.float64).eps if s.size else 0.0
        rank = int(np.sum(s > tol))
        keep = min(self.dims, rank)
        comps = np.zeros((self.dims, d), dtype=np.float64)
        comps[:keep] = vt[:keep]
        for i in range(keep):
            j = np.argmax(np.abs(comps[i]))
            if comps[i, j] < 0:
                comps[i] = -comps[i]
        if keep < self.dims:
            warnings.warn(
                f"feature rank {rank} < requested dims {self.dims}; "
                f"padding {self.dims - keep} components with zeros"
            )
        self.components_ = comps
        self.n_components_ = keep
        total = float(np.sum(s**2))
        ratios = np.zeros(self.dims)
        if total > 0:
            ratios[:keep] = (s[:keep] ** 2) / total
        self.explained_variance_ratio_ = ratios
        return self

    def transform(self, X):
        if not hasattr(self, "components_"):
            raise ValidationError("PcaReducer is not fitted")
        return self._preprocess(np.asarray(X, dtype=np.float64)) @ self.components_.T

    def fit_transform(self, X):
        return self.fit(X).transform(X)

    def inverse_transform(self, Z):
        return np.asarray(Z, dtype=np.float64) @ self.components_

    def transform_map(self, feature_map):
        """Apply to an (H, W, D) map, returning (H, W, dims)."""
        H, W, D = feature_map.shape
        return self.transform(feature_map.reshape(-1, D)).reshape(H, W, self.dims)


@dataclass
class SemanticAttentionPyramid:
    """Fused per-level targets at the finest resolution for one frame."""

    feature_levels: list  # [(H, W, dims)] coarse -> fine
    attention_levels: list  # [(H, W)]
    weights: np.ndarray  # (H, W, n_levels), sums to 1 per pixel
    coverage: list = dc_field(default_factory=list)  # per-level count maps

    def combined_feature(self):
        out = np.zeros_like(self.feature_levels[0])
        for lvl, fmap in enumerate(self.feature_levels):
            out += self.weights[..., lvl : lvl + 1] * fmap
        return out

    def combined_attention(self):
        out = np.zeros_like(self.attention_levels[0])
        for lvl, amap in enumerate(self.attention_levels):
            out += self.weights[..., lvl] * amap
        return out


def _windows_by_level(layout: PyramidLayout):
    groups = [[] for _ in layout.level_sizes]
    for idx, p in enumerate(layout.windows):
        groups[p.level].append((idx, p))
    return groups


def fuse_frame(window_features, window_attention, layout: PyramidLayout):
    """Per-level fused raw-feature and attention maps at finest resolution."""
    finest = layout.level_sizes[-1]
    feature_levels, attention_levels, coverage = [], [], []
    for level, group in enumerate(_windows_by_level(layout)):
        placements = [p for _, p in group]
        feats = [window_features[i] for i, _ in group]
        atts = [window_attention[i] for i, _ in group]
        size = layout.level_sizes[level]
        fmap, count = fuse_level(feats, placements, size, finest)
        amap, _ = fuse_level(atts, placements, size, finest)
        feature_levels.append(fmap)
        attention_levels.append(np.clip(amap, 0.0, 1.0))
        coverage.append(count)
    return feature_levels, attention_levels, coverage


def build_pyramids(frames, layout: PyramidLayout, cfg: PyramidConfig, reducer=None):
    """Fuse every frame, fit a joint PCA over all fused features (all frames,
    all levels), and return per-frame pyramids plus the fitted reducer."""
    cfg.validate()
    if len(layout.level_sizes) != cfg.n_levels:
        raise ValidationError(
            f"layout has {len(layout.level_sizes)} levels, config expects {cfg.n_levels}"
        )
    fused = [fuse_frame(f.window_features, f.window_attention, layout) for f in frames]
    H, W = layout.level_sizes[-1]
    if reducer is None:
        rows = np.concatenate(
            [fl.reshape(-1, fl.shape[-1]) for levels, _, _ in fused for fl in levels]
        )
        reducer = PcaReducer(dims=cfg.pca_dims).fit(rows)
    weights = boundary_weight_map(cfg, H, W)
    pyramids = []
    for levels, atts, coverage in fused:
        pyramids.append(
            SemanticAttentionPyramid(
                feature_levels=[reducer.transform_map(fl) for fl in levels],
                attention_levels=atts,
                weights=weights,
                coverage=coverage,
            )
        )
    return pyramids, reducer


# ---------------------------------------------------------------------------
# disk cache
# ---------------------------------------------------------------------------


def pyramid_cache_key(cfg: PyramidConfig, layout: PyramidLayout, n_frames):
    blob = json.dumps(
        {
            "cfg": {
                "n_levels": cfg.n_levels,
                "window": [cfg.window_height, cfg.window_width],
                "stride": cfg.window_stride,
                "patch_stride": cfg.patch_stride,
                "pca_dims": cfg.pca_dims,
                "interior": list(cfg.resolved_interior()),
                "boundary": list(cfg.resolved_boundary()),
            },
            "layout": layout.to_dict(),
            "n_frames": n_frames,
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_pyramid_cache(path, pyramids, reducer, key):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "key": key,
        "n_frames": len(pyramids),
        "n_levels": len(pyramids[0].feature_levels),
    }
    write_tensor(path / "pca_mean.bin", reducer.mean_)
    write_tensor(path / "pca_components.bin", reducer.components_)
    meta["pca_dims"] = reducer.dims
    meta["pca_rank"] = reducer.n_components_
    for fi, pyr in enumerate(pyramids):
        for lvl in range(len(pyr.feature_levels)):
            write_tensor(path / f"f{fi:03d}_l{lvl}_feat.bin", pyr.feature_levels[lvl])
            write_tensor(path / f"f{fi:03d}_l{lvl}_att.bin", pyr.attention_levels[lvl])
        write_tensor(path / f"f{fi:03d}_weights.bin", pyr.weights)
    (path / "cache.json").write_text(json.dumps(meta, indent=2))


def load_pyramid_cache(path, key):
    path = Path(path)
    meta_path = path / "cache.json"
    if not meta_path.exists():
        return None
    meta = json.loads(meta_path.read_text())
    if meta.get("key") != key:
        return None
    reducer = PcaReducer(dims=meta["pca_dims"])
    reducer.mean_ = read_tensor(path / "pca_mean.bin")
    reducer.components_ = read_tensor(path / "pca_components.bin")
    reducer.n_components_ = meta["pca_rank"]
    pyramids = []
    for fi in range(meta["n_frames"]):
        feats, atts = [], []
        for lvl in range(meta["n_levels"]):
            feats.append(read_tensor(path / f"f{fi:03d}_l{lvl}_feat.bin"))
            atts.append(read_tensor(path / f"f{fi:03d}_l{lvl}_att.bin"))
        weights = read_tensor(path / f"f{fi:03d}_weights.bin")
        pyramids.append(
            SemanticAttentionPyramid(
                feature_levels=feats, attention_levels=atts, weights=weights
            )
        )
    return pyramids, reducer
