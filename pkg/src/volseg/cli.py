"""Command-line front-end wiring the pipeline: synth -> fit -> render ->
decompose -> eval.

Every subcommand accepts --config (JSON overriding the defaults), --seed,
--out, and --print-config; each run writes a machine-readable manifest with
the config hash, library versions, and seeds.  Exit codes: 0 success, 1
validation/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import __version__
from .cluster import (
    ClusterConfig,
    SaliencyClusterer,
    assign_view,
    flow_salient_filter,
)
from .field import load_checkpoint, save_checkpoint
from .metrics import EvalReport, evaluate_split
from .pyramid import PcaReducer
from .postprocess import CrfConfig, crf_refine
from .render import render_flow_map, render_frame
from .scene_io import (
    DatasetError,
    FormatError,
    load_dataset,
    read_image,
    read_mask,
    read_tensor,
    write_image,
    write_mask,
    write_tensor,
)
from .synth import SynthSpec, BlobSpec, generate_scene, ground_truth_decomposition
from .training import (
    DecaySchedule,
    LossWeights,
    TrainConfig,
    TrainingError,
    fit as train_fit,
)
from .scene_io import save_raw_dataset
from .validation import ValidationError


class UsageError(ValueError):
    """Bad command line; handled as exit code 1 with usage text."""


def _put_image(path: Path, rgb):
    path.parent.mkdir(parents=True, exist_ok=True)
    write_image(path, rgb)


def _put_mask(path: Path, labels):
    path.parent.mkdir(parents=True, exist_ok=True)
    write_mask(path, labels)


def _put_tensor(path: Path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    write_tensor(path, arr)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    seed: int = 0
    dataset: str | None = None
    out: str = "runs/out"
    render_samples: int | None = None  # defaults to train.n_samples
    flow_filter: bool = False
    post_process: bool = False
    synth: SynthSpec = dc_field(default_factory=SynthSpec)
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    cluster: ClusterConfig = dc_field(default_factory=ClusterConfig)
    crf: CrfConfig = dc_field(default_factory=CrfConfig)


def config_to_dict(cfg: PipelineConfig) -> dict:
    return dataclasses.asdict(cfg)


def _merge(base: dict, override: dict, path=""):
    for key, value in override.items():
        if key not in base:
            raise ValidationError(f"unknown config key: {path}{key}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, f"{path}{key}.")
        else:
            base[key] = value
    return base


def config_from_dict(d: dict) -> PipelineConfig:
    merged = _merge(config_to_dict(PipelineConfig()), d or {})
    synth_d = dict(merged.pop("synth"))
    blobs = synth_d.pop("blobs", None)
    if blobs is not None:
        synth_d["blobs"] = [
            b if isinstance(b, BlobSpec) else BlobSpec(**b) for b in blobs
        ]
    train_d = dict(merged.pop("train"))
    train_d["weights"] = LossWeights(**train_d.pop("weights"))
    train_d["schedule"] = DecaySchedule(**train_d.pop("schedule"))
    return PipelineConfig(
        synth=SynthSpec(**synth_d),
        train=TrainConfig(**train_d),
        cluster=ClusterConfig(**merged.pop("cluster")),
        crf=CrfConfig(**merged.pop("crf")),
        **merged,
    )


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValidationError("config root must be a JSON object")
    return config_from_dict(raw)


def config_hash(cfg: PipelineConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def write_manifest(out_dir: Path, command, cfg: PipelineConfig, outputs, extra=None):
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "volseg": __version__,
        },
        "config": config_to_dict(cfg),
        "outputs": sorted(str(o) for o in outputs),
    }
    if extra:
        manifest.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


# ---------------------------------------------------------------------------
# model bundle I/O (fit output consumed by render/decompose)
# ---------------------------------------------------------------------------


def save_model_bundle(out_dir: Path, result):
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "field", result.params)
    write_tensor(out_dir / "reducer_mean.bin", result.reducer.mean_)
    write_tensor(out_dir / "reducer_components.bin", result.reducer.components_)
    meta = {
        "dims": result.reducer.dims,
        "rank": result.reducer.n_components_,
        "pyramid": dataclasses.asdict(result.pyramid_config),
    }
    (out_dir / "model_meta.json").write_text(json.dumps(meta, indent=2))
    return [
        out_dir / "field",
        out_dir / "reducer_mean.bin",
        out_dir / "reducer_components.bin",
        out_dir / "model_meta.json",
    ]


def load_model_bundle(model_dir: Path):
    model_dir = Path(model_dir)
    meta_path = model_dir / "model_meta.json"
    if not meta_path.exists():
        raise ValidationError(f"not a model directory (no model_meta.json): {model_dir}")
    meta = json.loads(meta_path.read_text())
    params = load_checkpoint(model_dir / "field")
    reducer = PcaReducer(dims=meta["dims"])
    reducer.mean_ = read_tensor(model_dir / "reducer_mean.bin")
    reducer.components_ = read_tensor(model_dir / "reducer_components.bin")
    reducer.n_components_ = meta["rank"]
    return params, reducer, meta


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _semantic_preview(semantic):
    """First three reduced-feature channels scaled to [0, 1] for a preview."""
    rgb = np.zeros(semantic.shape[:2] + (3,))
    for c in range(min(3, semantic.shape[-1])):
        ch = semantic[..., c]
        span = ch.max() - ch.min()
        rgb[..., c] = (ch - ch.min()) / span if span > 0 else 0.5
    return rgb


def _gray_preview(values, lo=None, hi=None):
    v = np.asarray(values, dtype=np.float64)
    lo = v.min() if lo is None else lo
    hi = v.max() if hi is None else hi
    g = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    return np.repeat(np.clip(g, 0, 1)[..., None], 3, axis=-1)


def cmd_synth(cfg: PipelineConfig, args):
    out = Path(cfg.out)
    ds, gt = generate_scene(cfg.synth, seed=cfg.seed)
    save_raw_dataset(ds, out / "dataset")
    truth_masks, salient = ground_truth_decomposition(gt)
    outputs = [out / "dataset"]
    for split, masks in (("input", truth_masks), ("holdout", gt.holdout_masks)):
        for i, mask in enumerate(masks):
            p = out / "truth" / split / f"{i:05d}.png"
            _put_mask(p, np.asarray(mask, dtype=np.uint8))
            outputs.append(p)
    truth_meta = {
        "n_objects": int(len(salient) - 1),
        "salient": [bool(s) for s in salient],
        "moving": [bool(np.any(np.asarray(b.velocity) != 0)) for b in cfg.synth.blobs]
        if cfg.synth.blobs
        else [],
    }
    (out / "truth").mkdir(parents=True, exist_ok=True)
    (out / "truth" / "meta.json").write_text(json.dumps(truth_meta, indent=2))
    outputs.append(out / "truth" / "meta.json")
    write_manifest(out, "synth", cfg, outputs)
    print(f"dataset: {out / 'dataset'} ({ds.n_frames} frames, "
          f"{len(ds.holdout)} holdout views)")
    return 0


def cmd_fit(cfg: PipelineConfig, args):
    if not cfg.dataset:
        raise ValidationError("fit requires a dataset path (--data or config.dataset)")
    ds = load_dataset(cfg.dataset)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train_cfg = dataclasses.replace(cfg.train, seed=cfg.seed)
    result = train_fit(ds, train_cfg, log_path=out / "train_log.jsonl")
    outputs = save_model_bundle(out, result)
    outputs.append(out / "train_log.jsonl")
    write_manifest(
        out,
        "fit",
        cfg,
        outputs,
        extra={"final_loss": result.log[-1]["total"] if result.log else None,
               "checksum": result.params.checksum()},
    )
    last = result.log[-1] if result.log else {}
    print(f"model: {out} (iterations: {train_cfg.n_iterations}, "
          f"final total loss: {last.get('total', float('nan')):.4f})")
    return 0


def _resolve_views(ds, which):
    views = []
    if which in ("input", "both"):
        for i, frame in enumerate(ds.frames):
            views.append(("input", i, frame.pose, frame.pose.time_index))
    if which in ("holdout", "both"):
        for i, hold in enumerate(ds.holdout):
            views.append(("holdout", i, hold.pose, hold.pose.time_index))
    if not views:
        raise ValidationError(f"no views selected for '{which}'")
    return views


def cmd_render(cfg: PipelineConfig, args):
    if not cfg.dataset:
        raise ValidationError("render requires a dataset path")
    ds = load_dataset(cfg.dataset)
    params, reducer, meta = load_model_bundle(Path(args.model))
    out = Path(cfg.out)
    n_samples = cfg.render_samples or cfg.train.n_samples
    tensors = params.tensors(requires_grad=False)
    outputs = []
    for split, idx, pose, time_index in _resolve_views(ds, args.views):
        maps = render_frame(
            tensors,
            params.config,
            pose,
            ds.image_shape,
            ds.bounds,
            time_index,
            n_samples,
        )
        base = out / split
        stem = f"{idx:05d}"
        _put_image(base / f"{stem}_color.png", np.clip(maps["color"], 0, 1))
        _put_image(base / f"{stem}_semantic.png", _semantic_preview(maps["semantic"]))
        _put_image(base / f"{stem}_attention.png", _gray_preview(maps["attention"], 0, 1))
        _put_image(base / f"{stem}_depth.png", _gray_preview(maps["depth"]))
        for key in ("depth", "attention", "blend", "semantic"):
            _put_tensor(base / f"{stem}_{key}.bin", maps[key])
        outputs.append(base / f"{stem}_color.png")
    write_manifest(out, "render", cfg, outputs)
    print(f"rendered {len(outputs)} views -> {out}")
    return 0


def _remap_salient(labels, salient):
    """Salient clusters keep distinct ids 1..n (ordered); the rest become 0."""
    mapping = np.zeros(len(salient), dtype=np.int64)
    next_id = 1
    for c, flag in enumerate(salient):
        if flag:
            mapping[c] = next_id
            next_id += 1
    return mapping[labels]


def cmd_decompose(cfg: PipelineConfig, args):
    if not cfg.dataset:
        raise ValidationError("decompose requires a dataset path")
    ds = load_dataset(cfg.dataset)
    params, reducer, meta = load_model_bundle(Path(args.model))
    out = Path(cfg.out)
    n_samples = cfg.render_samples or cfg.train.n_samples
    tensors = params.tensors(requires_grad=False)

    feature_maps, attention_maps, color_maps, depth_maps = [], [], [], []
    for i, frame in enumerate(ds.frames):
        maps = render_frame(
            tensors,
            params.config,
            frame.pose,
            ds.image_shape,
            ds.bounds,
            frame.pose.time_index,
            n_samples,
        )
        feature_maps.append(maps["semantic"])
        attention_maps.append(maps["attention"])
        color_maps.append(np.clip(maps["color"], 0, 1))
        depth_maps.append(maps["depth"])

    clusterer = SaliencyClusterer(
        seed=cfg.seed,
        **{f.name: getattr(cfg.cluster, f.name)
           for f in dataclasses.fields(cfg.cluster)},
    )
    clusterer.fit(feature_maps, attention_maps)
    model = clusterer.model_

    flow_filtered = False
    if cfg.flow_filter or args.flow_filter:
        flow_maps = []
        for i, frame in enumerate(ds.frames):
            neighbor_delta = 1 if i + 1 < ds.n_frames else -1
            flow_maps.append(
                render_flow_map(
                    tensors,
                    params.config,
                    frame.pose,
                    ds.image_shape,
                    ds.bounds,
                    frame.pose.time_index,
                    frame.pose.time_index + neighbor_delta,
                    n_samples=n_samples,
                )
            )
        flow_salient_filter(model, flow_maps, clusterer._config())
        flow_filtered = True

    outputs = []
    post = cfg.post_process or args.post_process
    for split in ("input", "holdout"):
        if split == "input":
            items = list(enumerate(zip(model.labels, color_maps, depth_maps)))
        else:
            items = []
            for i, hold in enumerate(ds.holdout):
                maps = render_frame(
                    tensors,
                    params.config,
                    hold.pose,
                    ds.image_shape,
                    ds.bounds,
                    hold.pose.time_index,
                    n_samples,
                )
                labels, _ = assign_view(maps["semantic"], model)
                items.append((i, (labels, np.clip(maps["color"], 0, 1), maps["depth"])))
        for i, (labels, color, depth) in items:
            remapped = _remap_salient(labels, model.salient)
            p = out / "labels" / split / f"{i:05d}.png"
            _put_mask(p, remapped.astype(np.uint8))
            outputs.append(p)
            if post:
                refined = crf_refine(remapped, color, depth, cfg.crf)
                rp = out / "labels_refined" / split / f"{i:05d}.png"
                _put_mask(rp, refined.astype(np.uint8))
                outputs.append(rp)

    out.mkdir(parents=True, exist_ok=True)
    cluster_info = {
        "k": model.k,
        "salient": [bool(s) for s in model.salient],
        "counts": [int(c) for c in model.counts],
        "flow_filtered": flow_filtered,
        "mean_attention": np.where(
            np.isnan(model.mean_attention), None, model.mean_attention
        ).tolist(),
    }
    (out / "cluster_model.json").write_text(json.dumps(cluster_info, indent=2))
    outputs.append(out / "cluster_model.json")
    write_manifest(out, "decompose", cfg, outputs,
                   extra={"k": model.k, "n_salient": int(np.sum(model.salient))})
    print(f"decomposition: k={model.k}, salient clusters: "
          f"{int(np.sum(model.salient))}, labels -> {out / 'labels'}")
    return 0


def _paired_maps(pred_dir, truth_dir, loader):
    pred_dir, truth_dir = Path(pred_dir), Path(truth_dir)
    for d in (pred_dir, truth_dir):
        if not d.is_dir():
            raise ValidationError(f"not a directory: {d}")
    pred_files = {p.relative_to(pred_dir) for p in pred_dir.rglob("*.png")}
    truth_files = {p.relative_to(truth_dir) for p in truth_dir.rglob("*.png")}
    common = sorted(pred_files & truth_files)
    if not common:
        raise ValidationError(
            f"no matching files between {pred_dir} and {truth_dir}"
        )
    splits = {}
    for rel in common:
        split = rel.parts[0] if len(rel.parts) > 1 else "all"
        splits.setdefault(split, []).append(
            (loader(pred_dir / rel), loader(truth_dir / rel))
        )
    return splits


def cmd_eval(cfg: PipelineConfig, args):
    splits = _paired_maps(args.pred, args.truth, read_mask)
    image_splits = {}
    if args.pred_images and args.truth_images:
        image_splits = _paired_maps(args.pred_images, args.truth_images, read_image)
    report = EvalReport()
    for split, pairs in sorted(splits.items()):
        preds = [p for p, _ in pairs]
        truths = [t for _, t in pairs]
        images = image_splits.get(split)
        out, frames = evaluate_split(
            preds,
            truths,
            [p for p, _ in images] if images else None,
            [t for _, t in images] if images else None,
        )
        report.ari[split] = out["ari"]
        report.iou[split] = out["iou"]
        if "psnr" in out:
            report.psnr[split] = out["psnr"]
            report.ssim[split] = out["ssim"]
        report.per_frame[split] = frames
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json())
    write_manifest(out_dir, "eval", cfg, [out_dir / "report.json"])
    print(report.summary_table())
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def build_parser():
    parser = _Parser(
        prog="volseg",
        description="Neural scene decomposition pipeline: "
        "synth | fit | render | decompose | eval",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config file overriding defaults")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--out", help="output directory")
        p.add_argument(
            "--print-config",
            action="store_true",
            help="print the effective config as JSON and exit",
        )
        p.add_argument(
            "--deterministic",
            action="store_true",
            help="require an explicitly pinned seed and record it",
        )

    p = sub.add_parser("synth", help="generate a synthetic dataset + ground truth")
    add_common(p)

    p = sub.add_parser("fit", help="optimize the scene fields on a dataset")
    add_common(p)
    p.add_argument("--data", help="dataset directory (overrides config.dataset)")

    p = sub.add_parser("render", help="render views from a fitted model")
    add_common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--model", required=True, help="fit output directory")
    p.add_argument(
        "--views",
        choices=("input", "holdout", "both"),
        default="both",
        help="which camera views to render",
    )

    p = sub.add_parser("decompose", help="cluster a fitted scene into objects")
    add_common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--model", required=True, help="fit output directory")
    p.add_argument(
        "--post-process",
        action="store_true",
        help="also write label maps refined by the dense CRF",
    )
    p.add_argument(
        "--flow-filter",
        action="store_true",
        help="restrict saliency to clusters that also move",
    )

    p = sub.add_parser("eval", help="score predicted label maps against truth")
    add_common(p)
    p.add_argument("--pred", required=True, help="predicted label map directory")
    p.add_argument("--truth", required=True, help="ground-truth label map directory")
    p.add_argument("--pred-images", help="rendered image directory (PSNR/SSIM)")
    p.add_argument("--truth-images", help="reference image directory (PSNR/SSIM)")
    return parser


def _effective_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    explicit_seed = args.seed is not None or (
        args.config and "seed" in json.loads(Path(args.config).read_text())
    )
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out = args.out
    if getattr(args, "data", None):
        cfg.dataset = args.data
    if args.deterministic and not explicit_seed:
        raise ValidationError(
            "--deterministic requires an explicit seed (--seed or config)"
        )
    cfg.train.validate()
    cfg.cluster.validate()
    cfg.crf.validate()
    cfg.synth.validate()
    return cfg


COMMANDS = {
    "synth": cmd_synth,
    "fit": cmd_fit,
    "render": cmd_render,
    "decompose": cmd_decompose,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    try:
        cfg = _effective_config(args)
        if args.print_config:
            print(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True, default=str))
            return 0
        return COMMANDS[args.command](cfg, args)
    except (ValidationError, FormatError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, DatasetError, RuntimeError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
