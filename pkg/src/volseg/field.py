"""Static and dynamic neural fields.

Two MLPs share an architecture family:

* the static field maps (position, view direction) to color, density, a
  static/dynamic blending weight, a semantic descriptor and an attention
  scalar;
* the dynamic field additionally conditions on time and predicts scene flow
  (forward/backward 3-vectors) and occlusion-confidence weights.

The view direction conditions *only* the color branch: semantics, attention,
density, blend, flow and occlusion are taken off the backbone before the
direction encoding is injected, so they are bitwise independent of it.

Head activations: softplus density (>= 0), sigmoid for blend/occlusion/
attention (0..1), tanh for semantics (-1..1), linear scene flow.  Each head
is a single linear layer off the backbone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import tape
from .scene_io import read_tensor, write_tensor
from .tape import Tensor
from .validation import ValidationError


@dataclass
class EncodingConfig:
    n_freq_position: int = 10
    n_freq_direction: int = 4
    n_freq_time: int = 4
    include_input: bool = True

    def validate(self):
        for name in ("n_freq_position", "n_freq_direction", "n_freq_time"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        return self


@dataclass
class FieldConfig:
    n_layers: int = 4
    width: int = 128
    skip_at: int | None = None  # default: middle layer when n_layers >= 5
    semantic_dim: int = 64
    encoding: EncodingConfig = dc_field(default_factory=EncodingConfig)
    encode_time: bool = True  # raw scalar time when False
    n_frames: int = 2  # for time normalization to [-1, 1]

    def resolved_skip(self):
        if self.skip_at is not None:
            return self.skip_at
        return self.n_layers // 2 if self.n_layers >= 5 else None


def encoded_dim(n_dims, n_freq, include_input):
    return n_dims * (2 * n_freq + (1 if include_input else 0))


def encode(u, n_freq, include_input=True):
    """Sinusoidal features [sin(2^k pi u), cos(2^k pi u)], k = 0..n_freq-1.

    Layout per input component block: optional raw input first, then one
    (sin, cos) pair of blocks per frequency.  Accepts arrays or Tensors
    (differentiable, used when encoding flow-advected points).
    """
    u = tape.as_tensor(u)
    parts = [u] if include_input else []
    for k in range(n_freq):
        scaled = u * float(2.0**k * np.pi)
        parts.append(tape.sin(scaled))
        parts.append(tape.cos(scaled))
    if not parts:
        return u
    if len(parts) == 1:
        return parts[0]
    return tape.concat(parts, axis=-1)


def normalize_time(time_index, n_frames):
    """Map time 0..N-1 onto [-1, 1] (continuous values permitted)."""
    if n_frames < 2:
        raise ValidationError("time normalization needs n_frames >= 2")
    return 2.0 * float(time_index) / (n_frames - 1) - 1.0


@dataclass
class StaticSample:
    color: Tensor  # (M, 3) in (0,1)
    density: Tensor  # (M,) >= 0
    blend: Tensor  # (M,) in (0,1)
    semantic: Tensor  # (M, S) in (-1,1)
    attention: Tensor  # (M,) in (0,1)


@dataclass
class DynamicSample:
    color: Tensor
    density: Tensor
    flow_fwd: Tensor  # (M, 3) scene units per step
    flow_bwd: Tensor  # (M, 3)
    occ_fwd: Tensor  # (M,) in (0,1)
    occ_bwd: Tensor  # (M,) in (0,1)
    semantic: Tensor
    attention: Tensor


class FieldParams:
    """Named weight arrays for both nets plus the architecture config."""

    def __init__(self, values, config: FieldConfig):
        self.values = values  # dict[str, np.ndarray], insertion-ordered
        self.config = config

    def tensors(self, requires_grad=True):
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.values.items()}

    def copy(self):
        return FieldParams({k: v.copy() for k, v in self.values.items()}, self.config)

    def checksum(self):
        import zlib

        crc = 0
        for name in sorted(self.values):
            crc = zlib.crc32(self.values[name].tobytes(), crc)
        return crc


def _layer_dims(cfg: FieldConfig, in_dim):
    """(input, output) widths of each backbone layer, with skip concat."""
    dims = []
    skip = cfg.resolved_skip()
    for i in range(cfg.n_layers):
        d_in = in_dim if i == 0 else cfg.width
        if skip is not None and i == skip and i > 0:
            d_in += in_dim
        dims.append((d_in, cfg.width))
    return dims


def _head_specs(cfg: FieldConfig, prefix, dir_dim):
    w = cfg.width
    specs = [
        (f"{prefix}.density", w, 1),
        (f"{prefix}.semantic", w, cfg.semantic_dim),
        (f"{prefix}.attention", w, 1),
        (f"{prefix}.color_feat", w, w),
        (f"{prefix}.color_hidden", w + dir_dim, max(w // 2, 1)),
        (f"{prefix}.color", max(w // 2, 1), 3),
    ]
    if prefix == "static":
        specs.append((f"{prefix}.blend", w, 1))
    else:
        specs.append((f"{prefix}.flow", w, 6))
        specs.append((f"{prefix}.occ", w, 2))
    return specs


def init_field_params(cfg: FieldConfig, seed=0, dtype=np.float64) -> FieldParams:
    """Uniform fan-in initialization U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    cfg.encoding.validate()
    rng = np.random.default_rng(seed)
    enc = cfg.encoding
    pos_dim = encoded_dim(3, enc.n_freq_position, enc.include_input)
    dir_dim = encoded_dim(3, enc.n_freq_direction, enc.include_input)
    time_dim = encoded_dim(1, enc.n_freq_time, enc.include_input) if cfg.encode_time else 1
    values = {}

    def add_linear(name, d_in, d_out):
        bound = 1.0 / np.sqrt(d_in)
        values[name + ".w"] = rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dtype)
        values[name + ".b"] = rng.uniform(-bound, bound, size=(d_out,)).astype(dtype)

    for prefix, in_dim in (("static", pos_dim), ("dynamic", pos_dim + time_dim)):
        for i, (d_in, d_out) in enumerate(_layer_dims(cfg, in_dim)):
            add_linear(f"{prefix}.layer{i}", d_in, d_out)
        for name, d_in, d_out in _head_specs(cfg, prefix, dir_dim):
            add_linear(name, d_in, d_out)
    return FieldParams(values, cfg)


def _linear(params, name, x):
    return x @ params[name + ".w"] + params[name + ".b"]


def _backbone(params, cfg, prefix, enc_in):
    h = enc_in
    skip = cfg.resolved_skip()
    for i in range(cfg.n_layers):
        if skip is not None and i == skip and i > 0:
            h = tape.concat([h, enc_in], axis=-1)
        h = tape.relu(_linear(params, f"{prefix}.layer{i}", h))
    return h


def _color_branch(params, cfg, prefix, h, omega):
    enc_d = encode(omega, cfg.encoding.n_freq_direction, cfg.encoding.include_input)
    feat = _linear(params, f"{prefix}.color_feat", h)
    hc = tape.relu(
        _linear(params, f"{prefix}.color_hidden", tape.concat([feat, enc_d], axis=-1))
    )
    return tape.sigmoid(_linear(params, f"{prefix}.color", hc))


def _check_points(x):
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all(np.isfinite(data)):
        raise ValidationError("field input contains non-finite values")


def eval_static(params, cfg: FieldConfig, x, omega) -> StaticSample:
    """Evaluate the static field at points x (M,3) with view directions (M,3)."""
    _check_points(x)
    enc_x = encode(x, cfg.encoding.n_freq_position, cfg.encoding.include_input)
    h = _backbone(params, cfg, "static", enc_x)
    return StaticSample(
        color=_color_branch(params, cfg, "static", h, omega),
        density=tape.softplus(_linear(params, "static.density", h))[:, 0],
        blend=tape.sigmoid(_linear(params, "static.blend", h))[:, 0],
        semantic=tape.tanh(_linear(params, "static.semantic", h)),
        attention=tape.sigmoid(_linear(params, "static.attention", h))[:, 0],
    )


def eval_dynamic(params, cfg: FieldConfig, x, omega, time_index) -> DynamicSample:
    """Evaluate the dynamic field at scalar time ``time_index`` (continuous)."""
    _check_points(x)
    x = tape.as_tensor(x)
    M = x.shape[0]
    tn = normalize_time(time_index, cfg.n_frames)
    t_col = Tensor(np.full((M, 1), tn, dtype=x.data.dtype))
    if cfg.encode_time:
        enc_t = encode(t_col, cfg.encoding.n_freq_time, cfg.encoding.include_input)
    else:
        enc_t = t_col
    enc_x = encode(x, cfg.encoding.n_freq_position, cfg.encoding.include_input)
    enc_in = tape.concat([enc_x, enc_t], axis=-1)
    h = _backbone(params, cfg, "dynamic", enc_in)
    flow = _linear(params, "dynamic.flow", h)
    occ = tape.sigmoid(_linear(params, "dynamic.occ", h))
    return DynamicSample(
        color=_color_branch(params, cfg, "dynamic", h, omega),
        density=tape.softplus(_linear(params, "dynamic.density", h))[:, 0],
        flow_fwd=flow[:, :3],
        flow_bwd=flow[:, 3:],
        occ_fwd=occ[:, 0],
        occ_bwd=occ[:, 1],
        semantic=tape.tanh(_linear(params, "dynamic.semantic", h)),
        attention=tape.sigmoid(_linear(params, "dynamic.attention", h))[:, 0],
    )


def backward(loss: Tensor, param_tensors) -> dict:
    """Gradients of a recorded scalar loss for every named parameter.

    Parameters that do not participate in the loss get zero gradients.
    Raises GraphError (via the tape) when the loss has no recorded graph.
    """
    loss.backward()
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in param_tensors.items()
    }


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MANIFEST = "checkpoint.json"


def _config_to_dict(cfg: FieldConfig):
    return {
        "n_layers": cfg.n_layers,
        "width": cfg.width,
        "skip_at": cfg.skip_at,
        "semantic_dim": cfg.semantic_dim,
        "encode_time": cfg.encode_time,
        "n_frames": cfg.n_frames,
        "encoding": {
            "n_freq_position": cfg.encoding.n_freq_position,
            "n_freq_direction": cfg.encoding.n_freq_direction,
            "n_freq_time": cfg.encoding.n_freq_time,
            "include_input": cfg.encoding.include_input,
        },
    }


def _config_from_dict(d):
    enc = d["encoding"]
    return FieldConfig(
        n_layers=d["n_layers"],
        width=d["width"],
        skip_at=d["skip_at"],
        semantic_dim=d["semantic_dim"],
        encode_time=d["encode_time"],
        n_frames=d["n_frames"],
        encoding=EncodingConfig(
            n_freq_position=enc["n_freq_position"],
            n_freq_direction=enc["n_freq_direction"],
            n_freq_time=enc["n_freq_time"],
            include_input=enc["include_input"],
        ),
    )


def save_checkpoint(path, params: FieldParams):
    """Write one tensor file per parameter plus a JSON manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, (name, arr) in enumerate(params.values.items()):
        fname = f"p{idx:04d}.bin"
        write_tensor(path / fname, arr)
        entries.append({"name": name, "file": fname, "shape": list(arr.shape)})
    manifest = {"config": _config_to_dict(params.config), "tensors": entries}
    (path / CHECKPOINT_MANIFEST).write_text(json.dumps(manifest, indent=2))


def load_checkpoint(path) -> FieldParams:
    path = Path(path)
    manifest_path = path / CHECKPOINT_MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing checkpoint manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    cfg = _config_from_dict(manifest["config"])
    values = {}
    for entry in manifest["tensors"]:
        arr = read_tensor(path / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise ValidationError(
                f"checkpoint tensor {entry['name']}: shape {arr.shape} != "
                f"manifest {entry['shape']}"
            )
        values[entry["name"]] = arr
    return FieldParams(values, cfg)
