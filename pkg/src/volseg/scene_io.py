"""Dataset storage, the bounded scene space, and per-pixel ray generation.

Conventions used throughout the package:

* Camera poses are camera-to-world: ``rotation`` maps camera coordinates to
  world coordinates and ``translation`` is the camera position.  The camera
  looks along -z in its own frame, x right, y up.
* Continuous pixel coordinates put (u, v) = (col + 0.5, row + 0.5) at a
  pixel's center; rays are cast through pixel centers.
* The working coordinate system is a normalized "NDC-like" box: the union of
  all camera frusta (evaluated at the dataset's depth range), padded by 5%,
  is mapped by a uniform scale + shift so its longest axis spans [-1, 1].
  A uniform similarity keeps the pinhole model valid, which a per-axis
  scaling would not.
* A ray is parameterized by samples at ``origin + t * direction``; the
  stored unit direction points from the camera into the scene and is the
  negated view vector of the advection convention (points move along
  ``-direction`` as t decreases).

Tensor files are raw little-endian ``.bin`` payloads with a JSON sidecar
``{"dtype": "f32", "shape": [...], "order": "row-major"}``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .validation import (
    ValidationError,
    check_array,
    check_in_range,
    check_positive,
    check_rotation,
)

MANIFEST_NAME = "manifest.json"
FORMAT_TAG = "volseg-dataset-v1"
FRUSTUM_PAD = 0.05
RAY_T_EPS = 1e-3


class FormatError(ValueError):
    """A tensor file or sidecar does not match its declared layout."""


class DatasetError(RuntimeError):
    """A dataset directory is missing files or is structurally broken."""


# ---------------------------------------------------------------------------
# tensor + image I/O
# ---------------------------------------------------------------------------

_DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "u8": np.dtype("u1"),
    "i32": np.dtype("<i4"),
    "i64": np.dtype("<i8"),
}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def write_tensor(path, array):
    """Write ``array`` as raw little-endian bytes plus a JSON sidecar."""
    path = Path(path)
    array = np.ascontiguousarray(array)
    dtype = array.dtype.newbyteorder("<")
    code = _DTYPE_CODES.get(dtype)
    if code is None:
        raise FormatError(f"unsupported dtype for tensor file: {array.dtype}")
    path.write_bytes(array.astype(dtype, copy=False).tobytes())
    meta = {"dtype": code, "shape": list(array.shape), "order": "row-major"}
    _sidecar(path).write_text(json.dumps(meta) + "\n")


def read_tensor(path):
    path = Path(path)
    side = _sidecar(path)
    if not path.exists():
        raise DatasetError(f"missing tensor file: {path}")
    if not side.exists():
        raise DatasetError(f"missing tensor sidecar: {side}")
    try:
        meta = json.loads(side.read_text())
        code, shape, order = meta["dtype"], meta["shape"], meta["order"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"bad tensor sidecar {side}: {exc}") from exc
    if order != "row-major":
        raise FormatError(f"{side}: unsupported order {order!r}")
    if code not in _DTYPES:
        raise FormatError(f"{side}: unknown dtype code {code!r}")
    dtype = _DTYPES[code]
    payload = path.read_bytes()
    expect = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expect:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, header implies {expect}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def write_image(path, rgb):
    """Write an H×W×3 float image in [0,1] as 8-bit RGB PNG."""
    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_image(path):
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing image file: {path}")
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def write_mask(path, labels):
    """Write an integer label map (background 0) as 8-bit grayscale PNG."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise FormatError("mask labels must fit in uint8")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path, format="PNG")


def read_mask(path):
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing mask file: {path}")
    return np.asarray(Image.open(path).convert("L"), dtype=np.uint8)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass
class CameraPose:
    """Camera-to-world rigid pose with pinhole intrinsics."""

    rotation: np.ndarray  # 3x3, camera-to-world
    translation: np.ndarray  # camera position, scene units
    fx: float
    fy: float
    cx: float
    cy: float
    time_index: float = 0.0

    def validate(self):
        check_rotation("pose.rotation", self.rotation)
        check_array("pose.translation", self.translation, shape=(3,), finite=True)
        check_positive("pose.fx", self.fx)
        check_positive("pose.fy", self.fy)
        return self

    def to_dict(self):
        return {
            "rotation": np.asarray(self.rotation, dtype=np.float64).tolist(),
            "translation": np.asarray(self.translation, dtype=np.float64).tolist(),
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "time": float(self.time_index),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            rotation=np.asarray(d["rotation"], dtype=np.float64),
            translation=np.asarray(d["translation"], dtype=np.float64),
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            time_index=float(d["time"]),
        ).validate()

    def pixel_directions(self, uv):
        """World-space unit directions through continuous pixel coords uv (M,2)."""
        uv = np.asarray(uv, dtype=np.float64)
        d_cam = np.stack(
            [
                (uv[:, 0] - self.cx) / self.fx,
                -(uv[:, 1] - self.cy) / self.fy,
                -np.ones(len(uv)),
            ],
            axis=-1,
        )
        d_world = d_cam @ np.asarray(self.rotation, dtype=np.float64).T
        return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)

    def project(self, points):
        """Project world points (..., 3) to continuous pixel coords.

        Returns (uv, depth) where depth > 0 means in front of the camera
        (distance along the optical axis).
        """
        pts = np.asarray(points, dtype=np.float64)
        cam = (pts - np.asarray(self.translation)) @ np.asarray(self.rotation)
        depth = -cam[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.cx + self.fx * cam[..., 0] / depth
            v = self.cy - self.fy * cam[..., 1] / depth
        return np.stack([u, v], axis=-1), depth


@dataclass
class WindowPlacement:
    """One sliding-window location inside a pyramid level."""

    level: int
    row: int
    col: int
    height: int
    width: int

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass
class PyramidLayout:
    """Level sizes + window placements shared by all frames of a dataset."""

    level_sizes: list  # [(h, w)] coarse -> fine
    windows: list  # list[WindowPlacement]
    patch_stride: int

    @property
    def n_levels(self):
        return len(self.level_sizes)

    def grid_shape(self, placement):
        return (
            placement.height // self.patch_stride,
            placement.width // self.patch_stride,
        )

    def to_dict(self):
        return {
            "patch_stride": int(self.patch_stride),
            "levels": [{"height": int(h), "width": int(w)} for h, w in self.level_sizes],
            "windows": [w.to_dict() for w in self.windows],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            level_sizes=[(int(l["height"]), int(l["width"])) for l in d["levels"]],
            windows=[WindowPlacement.from_dict(w) for w in d["windows"]],
            patch_stride=int(d["patch_stride"]),
        )


@dataclass
class FrameBundle:
    """One input frame with its prior maps."""

    rgb: np.ndarray  # (H, W, 3) float32 in [0,1]
    depth_prior: np.ndarray  # (H, W) float32, relative units
    flow_fwd: np.ndarray  # (H, W, 2) float32, pixel offsets to frame i+1
    flow_bwd: np.ndarray  # (H, W, 2) float32, pixel offsets to frame i-1
    window_features: list  # per-window (gh, gw, D) float32
    window_attention: list  # per-window (gh, gw) float32 in [0,1]
    pose: CameraPose
    mask: np.ndarray | None = None  # (H, W) uint8 instance labels, optional


@dataclass
class HoldoutView:
    pose: CameraPose
    rgb: np.ndarray | None = None
    mask: np.ndarray | None = None


@dataclass
class Bounds:
    """Axis-aligned scene box in normalized coordinates."""

    lo: np.ndarray
    hi: np.ndarray

    def contains(self, points, atol=1e-9):
        pts = np.asarray(points)
        return np.all((pts >= self.lo - atol) & (pts <= self.hi + atol), axis=-1)

    def ray_spans(self, origins, directions):
        """Slab intersection: (t_enter, t_exit) per ray; miss if exit <= enter."""
        o = np.asarray(origins, dtype=np.float64)
        d = np.asarray(directions, dtype=np.float64)
        zero = np.abs(d) < 1e-12
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (self.lo - o) / d
            t2 = (self.hi - o) / d
        inside = (o >= self.lo) & (o <= self.hi)
        neg_inf = np.full_like(t1, -np.inf)
        pos_inf = np.full_like(t1, np.inf)
        t1 = np.where(zero, np.where(inside, neg_inf, pos_inf), t1)
        t2 = np.where(zero, np.where(inside, pos_inf, neg_inf), t2)
        t_lo = np.minimum(t1, t2).max(axis=-1)
        t_hi = np.maximum(t1, t2).min(axis=-1)
        return t_lo, t_hi

    def to_dict(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["lo"], float), np.asarray(d["hi"], float))


@dataclass
class SpaceTransform:
    """Uniform similarity mapping raw world coordinates to the scene box."""

    center: np.ndarray
    scale: float

    def apply_points(self, pts):
        return (np.asarray(pts, dtype=np.float64) - self.center) * self.scale

    def apply_pose(self, pose: CameraPose) -> CameraPose:
        return CameraPose(
            rotation=np.asarray(pose.rotation, dtype=np.float64).copy(),
            translation=self.apply_points(pose.translation),
            fx=pose.fx,
            fy=pose.fy,
            cx=pose.cx,
            cy=pose.cy,
            time_index=pose.time_index,
        )

    def to_dict(self):
        return {"center": self.center.tolist(), "scale": float(self.scale)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["center"], float), float(d["scale"]))


@dataclass
class SceneDataset:
    frames: list  # list[FrameBundle]
    holdout: list  # list[HoldoutView]
    bounds: Bounds
    space: SpaceTransform
    pyramid_layout: PyramidLayout
    depth_range: tuple  # (near, far) along-ray, in normalized units

    @property
    def n_frames(self):
        return len(self.frames)

    @property
    def image_shape(self):
        return self.frames[0].rgb.shape[:2]


# ---------------------------------------------------------------------------
# scene bounds + normalization
# ---------------------------------------------------------------------------


def _frustum_points(pose: CameraPose, H, W, depth_range):
    corners = np.array(
        [[0.0, 0.0], [W, 0.0], [0.0, H], [W, H]], dtype=np.float64
    )
    dirs = pose.pixel_directions(corners)
    origin = np.asarray(pose.translation, dtype=np.float64)
    pts = [origin]
    for t in depth_range:
        pts.append(origin + dirs * t)
    return np.concatenate([p.reshape(-1, 3) for p in pts], axis=0)


def frustum_space(poses, H, W, depth_range, pad=FRUSTUM_PAD):
    """Padded frustum-union box -> (Bounds in normalized coords, transform)."""
    pts = np.concatenate(
        [_frustum_points(p, H, W, depth_range) for p in poses], axis=0
    )
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = hi - lo
    lo = lo - pad * extent
    hi = hi + pad * extent
    center = 0.5 * (lo + hi)
    scale = 2.0 / float((hi - lo).max())
    xform = SpaceTransform(center=center, scale=scale)
    bounds = Bounds(lo=xform.apply_points(lo), hi=xform.apply_points(hi))
    return bounds, xform


# ---------------------------------------------------------------------------
# rays
# ---------------------------------------------------------------------------


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float
    pixel: tuple  # (row, col)
    time_index: float


class RayBatch:
    """Struct-of-arrays collection of rays, one per pixel, row-major."""

    def __init__(self, origins, directions, t_near, t_far, pixel_uv, time_index):
        self.origins = origins  # (M, 3)
        self.directions = directions  # (M, 3) unit
        self.t_near = t_near  # (M,)
        self.t_far = t_far  # (M,)
        self.pixel_uv = pixel_uv  # (M, 2) continuous (u, v)
        self.time_index = time_index

    def __len__(self):
        return len(self.origins)

    def __getitem__(self, i):
        u, v = self.pixel_uv[i]
        return Ray(
            origin=self.origins[i],
            direction=self.directions[i],
            t_near=float(self.t_near[i]),
            t_far=float(self.t_far[i]),
            pixel=(int(v - 0.5), int(u - 0.5)),
            time_index=self.time_index,
        )

    def select(self, idx):
        return RayBatch(
            self.origins[idx],
            self.directions[idx],
            self.t_near[idx],
            self.t_far[idx],
            self.pixel_uv[idx],
            self.time_index,
        )


class RayGenerationError(RuntimeError):
    """A pose's frustum misses the scene bounds entirely."""


def generate_rays(pose: CameraPose, H, W, bounds: Bounds) -> RayBatch:
    """One ray per pixel through pixel centers, clipped to the scene box."""
    pose.validate()
    rows, cols = np.mgrid[0:H, 0:W]
    uv = np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5], axis=-1)
    dirs = pose.pixel_directions(uv)
    origin = np.broadcast_to(
        np.asarray(pose.translation, dtype=np.float64), dirs.shape
    ).copy()
    t_lo, t_hi = bounds.ray_spans(origin, dirs)
    miss = t_hi <= np.maximum(t_lo, 0.0)
    if np.any(miss):
        raise RayGenerationError(
            f"{int(miss.sum())} of {len(dirs)} rays miss the scene bounds "
            f"(camera at {np.round(pose.translation, 3)})"
        )
    t_near = np.maximum(t_lo, RAY_T_EPS)
    return RayBatch(
        origins=origin,
        directions=dirs,
        t_near=t_near,
        t_far=t_hi,
        pixel_uv=uv,
        time_index=pose.time_index,
    )


# ---------------------------------------------------------------------------
# dataset load/save
# ---------------------------------------------------------------------------


def _frame_paths(i):
    stem = f"frames/{i:05d}"
    return {
        "rgb": f"{stem}_rgb.png",
        "depth_prior": f"{stem}_depth.bin",
        "flow_fwd": f"{stem}_flow_fwd.bin",
        "flow_bwd": f"{stem}_flow_bwd.bin",
        "mask": f"{stem}_mask.png",
    }


def save_dataset(ds: SceneDataset, root):
    """Write a dataset directory (normalized coordinates, space recorded)."""
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    if ds.holdout:
        (root / "holdout").mkdir(exist_ok=True)
    H, W = ds.image_shape
    frames_meta = []
    for i, fr in enumerate(ds.frames):
        paths = _frame_paths(i)
        write_image(root / paths["rgb"], fr.rgb)
        write_tensor(root / paths["depth_prior"], fr.depth_prior.astype(np.float32))
        write_tensor(root / paths["flow_fwd"], fr.flow_fwd.astype(np.float32))
        write_tensor(root / paths["flow_bwd"], fr.flow_bwd.astype(np.float32))
        windows_meta = []
        for w, (feat, att) in enumerate(zip(fr.window_features, fr.window_attention)):
            fpath = f"frames/{i:05d}_w{w:03d}_s.bin"
            apath = f"frames/{i:05d}_w{w:03d}_a.bin"
            write_tensor(root / fpath, feat.astype(np.float32))
            write_tensor(root / apath, att.astype(np.float32))
            windows_meta.append({"features": fpath, "attention": apath})
        meta = {
            "time": float(fr.pose.time_index),
            "rgb": paths["rgb"],
            "depth_prior": paths["depth_prior"],
            "flow_fwd": paths["flow_fwd"],
            "flow_bwd": paths["flow_bwd"],
            "pose": fr.pose.to_dict(),
            "windows": windows_meta,
            "mask": None,
        }
        if fr.mask is not None:
            write_mask(root / paths["mask"], fr.mask)
            meta["mask"] = paths["mask"]
        frames_meta.append(meta)
    holdout_meta = []
    for i, hv in enumerate(ds.holdout):
        meta = {"pose": hv.pose.to_dict(), "rgb": None, "mask": None}
        if hv.rgb is not None:
            path = f"holdout/{i:04d}_rgb.png"
            write_image(root / path, hv.rgb)
            meta["rgb"] = path
        if hv.mask is not None:
            path = f"holdout/{i:04d}_mask.png"
            write_mask(root / path, hv.mask)
            meta["mask"] = path
        holdout_meta.append(meta)
    manifest = {
        "format": FORMAT_TAG,
        "height": int(H),
        "width": int(W),
        "n_frames": ds.n_frames,
        "space": ds.space.to_dict() if ds.space is not None else None,
        "bounds": ds.bounds.to_dict() if ds.bounds is not None else None,
        "depth_range": [float(ds.depth_range[0]), float(ds.depth_range[1])],
        "pyramid": ds.pyramid_layout.to_dict(),
        "frames": frames_meta,
        "holdout": holdout_meta,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def normalize_dataset(ds: SceneDataset) -> SceneDataset:
    """Map a raw-coordinate dataset into the normalized scene box."""
    H, W = ds.image_shape
    poses = [fr.pose for fr in ds.frames] + [hv.pose for hv in ds.holdout]
    bounds, xform = frustum_space(poses, H, W, ds.depth_range)
    frames = [dataclasses.replace(fr, pose=xform.apply_pose(fr.pose)) for fr in ds.frames]
    holdout = [dataclasses.replace(hv, pose=xform.apply_pose(hv.pose)) for hv in ds.holdout]
    depth_range = (ds.depth_range[0] * xform.scale, ds.depth_range[1] * xform.scale)
    return SceneDataset(
        frames=frames,
        holdout=holdout,
        bounds=bounds,
        space=xform,
        pyramid_layout=ds.pyramid_layout,
        depth_range=depth_range,
    )


def load_dataset(root) -> SceneDataset:
    """Load and validate a dataset directory; normalizes raw datasets."""
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise DatasetError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != FORMAT_TAG:
        raise FormatError(f"{manifest_path}: unknown format tag")
    H, W = int(manifest["height"]), int(manifest["width"])
    layout = PyramidLayout.from_dict(manifest["pyramid"])
    frames = []
    times = []
    for i, meta in enumerate(manifest["frames"]):
        rgb = read_image(root / meta["rgb"])
        check_array(f"frame {i} rgb", rgb, shape=(H, W, 3))
        depth = read_tensor(root / meta["depth_prior"])
        check_array(f"frame {i} depth_prior", depth, shape=(H, W), finite=True)
        flow_fwd = read_tensor(root / meta["flow_fwd"])
        check_array(f"frame {i} flow_fwd", flow_fwd, shape=(H, W, 2), finite=True)
        flow_bwd = read_tensor(root / meta["flow_bwd"])
        check_array(f"frame {i} flow_bwd", flow_bwd, shape=(H, W, 2), finite=True)
        feats, atts = [], []
        for w, wmeta in enumerate(meta["windows"]):
            placement = layout.windows[w]
            gh, gw = layout.grid_shape(placement)
            feat = read_tensor(root / wmeta["features"])
            check_array(f"frame {i} window {w} features", feat, ndim=3)
            if feat.shape[:2] != (gh, gw):
                raise ValidationError(
                    f"frame {i} window {w} features: expected grid {(gh, gw)}, "
                    f"got {feat.shape[:2]}"
                )
            att = read_tensor(root / wmeta["attention"])
            check_array(f"frame {i} window {w} attention", att, shape=(gh, gw))
            check_in_range(f"frame {i} window {w} attention", att, 0.0, 1.0)
            feats.append(feat)
            atts.append(att)
        if len(feats) != len(layout.windows):
            raise ValidationError(
                f"frame {i}: expected {len(layout.windows)} windows, got {len(feats)}"
            )
        pose = CameraPose.from_dict(meta["pose"])
        mask = read_mask(root / meta["mask"]) if meta.get("mask") else None
        if mask is not None:
            check_array(f"frame {i} mask", mask, shape=(H, W))
        frames.append(
            FrameBundle(
                rgb=rgb,
                depth_prior=depth,
                flow_fwd=flow_fwd,
                flow_bwd=flow_bwd,
                window_features=feats,
                window_attention=atts,
                pose=pose,
                mask=mask,
            )
        )
        times.append(pose.time_index)
    if len(frames) < 2:
        raise ValidationError(f"dataset needs at least 2 frames, got {len(frames)}")
    if len(set(times)) != len(times):
        raise ValidationError("frame time indices are not unique")
    holdout = []
    for i, meta in enumerate(manifest.get("holdout", [])):
        rgb = read_image(root / meta["rgb"]) if meta.get("rgb") else None
        mask = read_mask(root / meta["mask"]) if meta.get("mask") else None
        holdout.append(
            HoldoutView(pose=CameraPose.from_dict(meta["pose"]), rgb=rgb, mask=mask)
        )
    depth_range = tuple(float(x) for x in manifest["depth_range"])
    if manifest.get("space"):
        ds = SceneDataset(
            frames=frames,
            holdout=holdout,
            bounds=Bounds.from_dict(manifest["bounds"]),
            space=SpaceTransform.from_dict(manifest["space"]),
            pyramid_layout=layout,
            depth_range=depth_range,
        )
    else:
        raw = SceneDataset(
            frames=frames,
            holdout=holdout,
            bounds=Bounds(np.zeros(3), np.zeros(3)),
            space=SpaceTransform(np.zeros(3), 1.0),
            pyramid_layout=layout,
            depth_range=depth_range,
        )
        ds = normalize_dataset(raw)
    positions = np.stack([fr.pose.translation for fr in ds.frames])
    if not np.all(ds.bounds.contains(positions)):
        raise ValidationError("scene bounds do not contain all camera positions")
    return ds


def save_raw_dataset(ds: SceneDataset, root):
    """Write a dataset in raw coordinates (``space: null`` in the manifest).

    Used by the synthetic generator so loading exercises normalization.
    """
    save_dataset(ds, root)
    path = Path(root) / MANIFEST_NAME
    manifest = json.loads(path.read_text())
    manifest["space"] = None
    manifest.pop("bounds", None)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
