"""Command-line entry point: gen, mask, run, ablate, cost.

Flag precedence: explicit flags > --config JSON file > built-in defaults.
Defaults mirror the reference 672px ViT-B setup; --toy scales the model to
the 8x8-grid desk configuration. Exit codes: 0 success, 2 usage error,
3 data error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import costs, pipeline
from .masks import (
    GridSpec,
    MaskSchedule,
    accumulate_heatmap,
    load_annotations,
    pad_frame,
    region_scores,
    save_annotations,
    save_mask_json,
    static_mask,
    write_heatmap_pgm,
    write_mask_pgm,
)
from .model import ModelConfig, ViTBackbone, toy_config, vitdet_b_config
from .video import generate, load_frames, make_random_scene, save_frames

DEFAULTS = {
    # schedule
    "period": 8,
    "static_keep": 0.3,
    "dilation": 0,
    # model geometry (reference setup; --toy overrides)
    "backbone": "windowed",
    "embed_dim": 768,
    "heads": 12,
    "blocks": 12,
    "window": 14,
    "ffn_hidden": 3072,
    "region_size": 16,
    "toy": False,
    # seeds
    "seed_scene": 0,
    "seed_model": 0,
    # detector
    "threshold": 0.5,
    # generation
    "frames": 16,
    "height": 128,
    "width": 128,
    "objects": 2,
    "camera_vy": 0,
    "camera_vx": 0,
    "train_scenes": 3,
    # run inputs / outputs
    "frames_file": None,
    "annotations": None,
    "static_annotations": None,
    "oracle": "off",
    "out": "out",
    "dataset": "synthetic",
    # cost
    "frame_height": 672,
    "frame_width": 672,
    "tokens_kept": "",
    "keep_rates": "",
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _merge_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path:
        overrides = json.loads(Path(config_path).read_text())
        unknown = set(overrides) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(overrides)
    for key, value in vars(args).items():
        if key in ("command", "config", "func"):
            continue
        if value is not None:
            cfg[key] = value
    return cfg


def _model_config(cfg: dict, frame_size) -> ModelConfig:
    windowed = cfg["backbone"] == "windowed"
    if cfg["toy"]:
        base = toy_config(frame_size=frame_size, region_size=cfg["region_size"],
                          windowed=windowed, seed=cfg["seed_model"])
        return base
    grid = GridSpec(frame_size[0], frame_size[1], cfg["region_size"])
    num_blocks = cfg["blocks"]
    if windowed:
        stride = max(1, num_blocks // 4)
        global_blocks = frozenset(range(stride, num_blocks + 1, stride))
    else:
        global_blocks = frozenset(range(1, num_blocks + 1))
    return ModelConfig(
        embed_dim=cfg["embed_dim"],
        num_heads=cfg["heads"],
        num_blocks=num_blocks,
        global_blocks=global_blocks,
        window_side=cfg["window"],
        ffn_hidden=cfg["ffn_hidden"],
        grid=grid,
        seed=cfg["seed_model"],
    )


def _parse_int_list(text: str):
    return [int(v) for v in text.split(",") if v.strip()] if text else []


def _parse_float_list(text: str):
    return [float(v) for v in text.split(",") if v.strip()] if text else []


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen(cfg: dict) -> int:
    if cfg["frames"] < 1:
        raise ValueError("num_frames must be >= 1")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    size = (cfg["height"], cfg["width"])
    camera = (cfg["camera_vy"], cfg["camera_vx"])
    print(f"seeds: scene={cfg['seed_scene']}")
    scene = make_random_scene(cfg["seed_scene"], size, cfg["frames"], cfg["objects"], camera)
    frames, annotations = generate(scene, seed=cfg["seed_scene"])

    frames_path = out / "frames.mvdf"
    ann_path = out / "annotations.json"
    save_frames(frames_path, frames)
    save_annotations(ann_path, size, annotations)

    # disjoint scenes supplying the static-mask training boxes
    train = []
    for i in range(cfg["train_scenes"]):
        train_seed = cfg["seed_scene"] + 1000 + i
        train_scene = make_random_scene(train_seed, size, cfg["frames"], cfg["objects"], camera)
        _, anns = generate(train_scene, seed=train_seed)
        offset = len(train)
        train.extend(type(a)(offset + a.index, a.boxes, a.class_ids) for a in anns)
    train_path = out / "static_train.json"
    save_annotations(train_path, size, train)

    for path in (frames_path, ann_path, train_path):
        print(f"wrote {path} sha256={_sha256(path)}")
    return 0


def cmd_mask(cfg: dict) -> int:
    if cfg["annotations"] is None:
        raise ValueError("mask requires --annotations")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (h, w), annotations = load_annotations(cfg["annotations"])
    region = cfg["region_size"]
    spec = GridSpec(h + (-h) % region, w + (-w) % region, region)
    heat = accumulate_heatmap(annotations, spec)
    mask = static_mask(region_scores(heat, spec), cfg["static_keep"], spec)

    heat_path = out / "heatmap.pgm"
    mask_json_path = out / "static_mask.json"
    mask_pgm_path = out / "static_mask.pgm"
    write_heatmap_pgm(heat_path, heat)
    save_mask_json(mask_json_path, mask)
    write_mask_pgm(mask_pgm_path, mask)
    print(f"static mask keeps {mask.keep_count}/{spec.num_tokens} regions "
          f"(keep rate {mask.keep_rate:.4f})")
    for path in (heat_path, mask_json_path, mask_pgm_path):
        print(f"wrote {path} sha256={_sha256(path)}")
    return 0


def _load_run_inputs(cfg: dict):
    if cfg["frames_file"] is None or cfg["annotations"] is None:
        raise ValueError("run requires --frames and --annotations")
    frames = load_frames(cfg["frames_file"])
    (h, w), annotations = load_annotations(cfg["annotations"])
    if (h, w) != frames.shape[1:3]:
        raise ValueError(
            f"annotation frame size ({h}, {w}) does not match frames {frames.shape[1:3]}"
        )
    region = cfg["region_size"]
    if h % region or w % region:
        frames = np.stack([pad_frame(f, region) for f in frames])
    static_annotations = None
    if cfg["static_annotations"]:
        (sh, sw), static_annotations = load_annotations(cfg["static_annotations"])
        if (sh, sw) != (h, w):
            raise ValueError(
                f"static annotation frame size ({sh}, {sw}) does not match ({h}, {w})"
            )
    model = ViTBackbone.build(_model_config(cfg, frames.shape[1:3]))
    schedule = MaskSchedule(cfg["period"], cfg["static_keep"], cfg["dilation"])
    return frames, annotations, static_annotations, model, schedule


def cmd_run(cfg: dict) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    frames, annotations, static_annotations, model, schedule = _load_run_inputs(cfg)
    print(f"seeds: scene={cfg['seed_scene']} model={cfg['seed_model']}")
    result = pipeline.run_sequence(
        frames, annotations, model, schedule,
        static_annotations=static_annotations,
        objectness_threshold=cfg["threshold"],
        with_oracle=cfg["oracle"] == "on",
    )
    doc = {
        "seeds": {"scene": cfg["seed_scene"], "model": cfg["seed_model"]},
        "inputs": {"frames": str(cfg["frames_file"]), "annotations": str(cfg["annotations"]),
                   "static_annotations": str(cfg["static_annotations"] or "")},
        "result": result.to_jsonable(),
    }
    json_path = out / "result.json"
    csv_path = out / "result.csv"
    _write_json(json_path, doc)
    costs.write_cost_csv(csv_path, [pipeline.run_csv_row(result, cfg["dataset"])])
    e = result.evaluation
    print(f"f1={e.f1:.4f} precision={e.precision:.4f} recall={e.recall:.4f} "
          f"keep_rate={result.mean_keep_rate:.4f} gmacs={result.mean_gmacs:.6f}")
    print(f"wrote {json_path}")
    print(f"wrote {csv_path}")
    return 0


def cmd_ablate(cfg: dict) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    frames, annotations, static_annotations, model, schedule = _load_run_inputs(cfg)
    print(f"seeds: scene={cfg['seed_scene']} model={cfg['seed_model']}")
    runs = pipeline.ablate_masks(frames, annotations, model, schedule,
                                 static_annotations=static_annotations,
                                 objectness_threshold=cfg["threshold"])
    doc = {
        "seeds": {"scene": cfg["seed_scene"], "model": cfg["seed_model"]},
        "runs": {mode: run.to_jsonable() for mode, run in runs.items()},
    }
    json_path = out / "ablate.json"
    csv_path = out / "ablate.csv"
    _write_json(json_path, doc)
    rows = [
        pipeline.run_csv_row(run, f"{cfg['dataset']}:{mode}")
        for mode, run in runs.items()
    ]
    costs.write_cost_csv(csv_path, rows)
    for mode in ("combined", "static", "dynamic"):
        e = runs[mode].evaluation
        print(f"{mode}: f1={e.f1:.4f} keep_rate={runs[mode].mean_keep_rate:.4f}")
    print(f"wrote {json_path}")
    print(f"wrote {csv_path}")
    return 0


def cmd_cost(cfg: dict) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    if cfg["toy"]:
        config = toy_config(windowed=cfg["backbone"] == "windowed", seed=cfg["seed_model"])
    else:
        config = _model_config(cfg, (cfg["frame_height"], cfg["frame_width"]))
    tokens = _parse_int_list(cfg["tokens_kept"])
    tokens += [int(rate * config.num_tokens) for rate in _parse_float_list(cfg["keep_rates"])]
    rows = costs.cost_table(config, tokens, dataset=cfg["dataset"])
    csv_path = out / "cost.csv"
    costs.write_cost_csv(csv_path, rows)
    for row in rows:
        print(f"tokens={row['tokens_processed']} keep={row['patch_keep_rate']:.4f} "
              f"gmacs={row['gmacs']:.4f} buffer_mb={row['buffer_mb']:.4f} "
              f"scatter_gather={row['scatter_gather_ops']}")
    print(f"wrote {csv_path}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backbone", choices=["windowed", "global"],
                   help="attention layout (default windowed)")
    p.add_argument("--embed-dim", dest="embed_dim", type=int, help="token embedding width")
    p.add_argument("--heads", type=int, help="attention heads")
    p.add_argument("--blocks", type=int, help="transformer blocks")
    p.add_argument("--window", type=int, help="window side in tokens")
    p.add_argument("--ffn-hidden", dest="ffn_hidden", type=int, help="FFN hidden units")
    p.add_argument("--region-size", dest="region_size", type=int,
                   help="pixels per region side (default 16)")
    p.add_argument("--toy", action="store_const", const=True,
                   help="use the desk-scale model (8x8 grid, dim 64, 4 blocks)")
    p.add_argument("--seed-model", dest="seed_model", type=int, help="weight init seed")


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with defaults for any flag")
    p.add_argument("--out", help="output directory (default ./out)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vidmask",
        description="Region-masked video object detection: generation, masking, "
                    "pipeline runs, ablations and cost tables.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic sequence + annotations")
    _add_common_flags(p)
    p.add_argument("--frames", type=int, help="number of frames (default 16)")
    p.add_argument("--height", type=int, help="frame height px (default 128)")
    p.add_argument("--width", type=int, help="frame width px (default 128)")
    p.add_argument("--objects", type=int, help="moving objects per scene (default 2)")
    p.add_argument("--camera-vy", dest="camera_vy", type=int, help="camera pan px/frame (y)")
    p.add_argument("--camera-vx", dest="camera_vx", type=int, help="camera pan px/frame (x)")
    p.add_argument("--train-scenes", dest="train_scenes", type=int,
                   help="disjoint scenes for static-mask training boxes (default 3)")
    p.add_argument("--seed-scene", dest="seed_scene", type=int, help="scene seed")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("mask", help="build the static mask from annotations")
    _add_common_flags(p)
    p.add_argument("--annotations", help="annotation JSON path")
    p.add_argument("--static-keep", dest="static_keep", type=float,
                   help="static keep rate k_s in [0,1] (default 0.3)")
    p.add_argument("--region-size", dest="region_size", type=int,
                   help="pixels per region side (default 16)")
    p.set_defaults(func=cmd_mask)

    for name, help_text, func in (
        ("run", "run the masked pipeline over a sequence", cmd_run),
        ("ablate", "compare combined/static/dynamic masks", cmd_ablate),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common_flags(p)
        _add_model_flags(p)
        p.add_argument("--frames", dest="frames_file", help="frame container path (.mvdf)")
        p.add_argument("--annotations", help="sequence ground-truth JSON path")
        p.add_argument("--static-annotations", dest="static_annotations",
                       help="static-mask training JSON (defaults to --annotations)")
        p.add_argument("--period", type=int, help="full-frame refresh period P (default 8)")
        p.add_argument("--static-keep", dest="static_keep", type=float,
                       help="static keep rate k_s (default 0.3)")
        p.add_argument("--dilation", type=int, help="dynamic-mask dilation in regions")
        p.add_argument("--threshold", type=float, help="objectness threshold (default 0.5)")
        p.add_argument("--seed-scene", dest="seed_scene", type=int,
                       help="scene seed (echoed in the report header)")
        p.add_argument("--dataset", help="dataset label for the CSV row")
        if name == "run":
            p.add_argument("--oracle", choices=["on", "off"],
                           help="also run the dense comparator per frame")
        p.set_defaults(func=func)

    p = sub.add_parser("cost", help="analytic FLOPs/memory table")
    _add_common_flags(p)
    _add_model_flags(p)
    p.add_argument("--frame-height", dest="frame_height", type=int,
                   help="frame height px (default 672)")
    p.add_argument("--frame-width", dest="frame_width", type=int,
                   help="frame width px (default 672)")
    p.add_argument("--tokens-kept", dest="tokens_kept",
                   help="comma-separated kept-token counts, e.g. 1005,723")
    p.add_argument("--keep-rates", dest="keep_rates",
                   help="comma-separated keep rates, e.g. 0.5,0.3")
    p.add_argument("--dataset", help="dataset label for the CSV rows")
    p.set_defaults(func=cmd_cost)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _merge_config(args)
        return args.func(cfg)
    except (ValueError, OSError, KeyError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
