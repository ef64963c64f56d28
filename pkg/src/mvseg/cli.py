"""Command-line entry point.

Subcommands cover the whole workflow: gen-data, train, eval, ablate,
predict, serve. Each takes an optional JSON config file plus flag
overrides (flags win), and echoes the resolved config into its output
directory so every run is reproducible from (config, seed) alone.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from . import scenegen
from .evaluation import (
    ABLATION_SUITES,
    AblationConfig,
    EvalProtocol,
    PROMPT_VIEW_MODES,
    evaluate,
    plot_suite,
    run_ablation,
)
from .model import PipelineConfig
from .training import (
    LOSS_TYPES,
    TrainConfig,
    _pipeline_from_dict,
    load_checkpoint,
    save_checkpoint,
    single_view_samples,
    train,
)


def _load_json(path):
    with open(path) as f:
        return json.load(f)


def _merge_dataclass(cls, file_section, flag_overrides):
    """defaults < config file < explicit flags; unknown keys rejected."""
    fields = {f.name for f in dataclasses.fields(cls)}
    merged = {}
    if file_section:
        unknown = set(file_section) - fields
        if unknown:
            raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
        merged.update(file_section)
    merged.update({k: v for k, v in flag_overrides.items() if v is not None})
    return cls(**merged)


def _echo_config(out_dir, payload):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def _load_bundles(data_dir):
    if not os.path.isdir(data_dir):
        raise FileNotFoundError(f"scene directory not found: {data_dir}")
    bundles = []
    for name in sorted(os.listdir(data_dir)):
        if os.path.isfile(os.path.join(data_dir, name, "scene.json")):
            bundles.append(scenegen.load_bundle(os.path.join(data_dir, name)))
    if not bundles:
        raise FileNotFoundError(f"no scene bundles under {data_dir}")
    return bundles


def _pipeline_from_config(section):
    """Partial pipeline sections merge over defaults, nested dicts included."""
    base = dataclasses.asdict(PipelineConfig())
    if section:
        for key, value in section.items():
            if key not in base:
                raise ValueError(f"unknown PipelineConfig key: {key}")
            if isinstance(base[key], dict) and isinstance(value, dict):
                unknown = set(value) - set(base[key])
                if unknown:
                    raise ValueError(f"unknown {key} keys: {sorted(unknown)}")
                base[key].update(value)
            else:
                base[key] = value
    return _pipeline_from_dict(base)


def _single_thread():
    import torch

    torch.set_num_threads(1)


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(args):
    file_config = _load_json(args.config) if args.config else {}
    n_scenes = args.scenes if args.scenes is not None else file_config.pop("n_scenes", 4)
    noise = args.noise if args.noise is not None else file_config.pop("noise_scale", 0.0)
    low_conf = (
        args.low_conf
        if args.low_conf is not None
        else file_config.pop("low_conf_fraction", 0.0)
    )
    overrides = {
        "n_views": args.views,
        "height": args.height,
        "width": args.width,
        "n_objects": args.objects,
    }
    base = _merge_dataclass(scenegen.SceneGenConfig, file_config, overrides)
    for i in range(n_scenes):
        config = dataclasses.replace(base, scene_id=f"scene{i:04d}")
        bundle = scenegen.generate_scene(config, seed=args.seed + i)
        if noise > 0 or low_conf > 0:
            bundle = scenegen.corrupt_pointmap(bundle, noise, low_conf, seed=args.seed + i)
        scenegen.save_bundle(bundle, os.path.join(args.out, config.scene_id))
    _echo_config(
        args.out,
        {
            "command": "gen-data",
            "n_scenes": n_scenes,
            "seed": args.seed,
            "noise_scale": noise,
            "low_conf_fraction": low_conf,
            "scene": dataclasses.asdict(dataclasses.replace(base, scene_id="")),
        },
    )
    print(f"wrote {n_scenes} scenes to {args.out}")
    return 0


def cmd_train(args):
    _single_thread()
    file_config = _load_json(args.config) if args.config else {}
    pipeline = _pipeline_from_config(file_config.get("pipeline"))
    overrides = {
        "steps": args.steps,
        "batch_size": args.batch_size,
        "seed": args.seed,
        "learning_rate": args.lr,
        "loss_type": args.loss_type,
        "encoder_frozen": True if args.frozen_encoder else None,
    }
    train_config = _merge_dataclass(TrainConfig, file_config.get("train"), overrides)
    samples = single_view_samples(_load_bundles(args.data))
    print(f"training on {len(samples)} single-view samples")
    result = train(samples, train_config, pipeline=pipeline, log_every=args.log_every)
    save_checkpoint(
        args.out, result.model, step=result.steps, seed=train_config.seed,
        train_config=train_config,
    )
    with open(os.path.join(args.out, "loss.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(result.loss_history, start=1):
            writer.writerow([step, f"{loss:.6f}"])
    _echo_config(
        args.out,
        {
            "command": "train",
            "data": args.data,
            "pipeline": dataclasses.asdict(pipeline),
            "train": dataclasses.asdict(train_config),
        },
    )
    print(f"checkpoint written to {args.out} (final loss {result.loss_history[-1]:.4f})")
    return 0


def _protocol_from_args(args, file_config):
    overrides = {
        "n_positive": args.positives,
        "n_negative": args.negatives,
        "prompt_views": args.prompt_views,
        "frames": args.frames,
        "seed": args.seed,
    }
    return _merge_dataclass(EvalProtocol, file_config.get("protocol"), overrides)


def cmd_eval(args):
    _single_thread()
    file_config = _load_json(args.config) if args.config else {}
    protocol = _protocol_from_args(args, file_config)
    model, _ = load_checkpoint(args.checkpoint)
    bundles = _load_bundles(args.data)
    report = evaluate(model, bundles, protocol, suite="eval", cell="default", scope=args.scope)
    os.makedirs(args.out, exist_ok=True)
    report.to_csv(os.path.join(args.out, "rows.csv"))
    report.to_json(os.path.join(args.out, "report.json"))
    if args.plot:
        plot_suite(report, os.path.join(args.out, "report.svg"))
    _echo_config(
        args.out,
        {
            "command": "eval",
            "data": args.data,
            "checkpoint": args.checkpoint,
            "scope": args.scope,
            "protocol": dataclasses.asdict(protocol),
        },
    )
    agg = report.aggregate()["overall"]
    print(f"mIoU {agg['miou']:.4f}  mAcc {agg['macc']:.4f}  ({agg['count']} rows)")
    return 0


def _parse_cells(suite, raw):
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ValueError("--cells must name at least one cell")
    if suite in ("pe_type", "attention_scope", "loss_type"):
        return parts
    if suite == "standardization":
        return [p.lower() in ("with", "on", "true", "1") for p in parts]
    if suite == "frame_count":
        return [int(p) for p in parts]
    return [float(p) for p in parts]


def cmd_ablate(args):
    _single_thread()
    file_config = _load_json(args.config) if args.config else {}
    cells = _parse_cells(args.suite, args.cells)
    protocol = _protocol_from_args(args, file_config)
    pipeline = _pipeline_from_config(file_config.get("pipeline"))
    train_config = _merge_dataclass(
        TrainConfig, file_config.get("train"), {"seed": args.seed}
    )
    base_model = None
    if args.checkpoint:
        base_model, _ = load_checkpoint(args.checkpoint)
    needs_training = args.suite in (
        "pe_type", "attention_scope", "confidence_threshold", "standardization", "loss_type",
    )
    if needs_training and not args.train_data:
        raise ValueError(f"suite {args.suite} retrains per cell; --train-data is required")
    if not needs_training and base_model is None and not args.train_data:
        raise ValueError(f"suite {args.suite} needs --checkpoint or --train-data")
    setup = AblationConfig(
        pipeline=pipeline,
        train=train_config,
        train_scenes=_load_bundles(args.train_data) if args.train_data else [],
        eval_scenes=_load_bundles(args.eval_data),
        protocol=protocol,
        base_model=base_model,
    )
    report = run_ablation(args.suite, cells, setup)
    os.makedirs(args.out, exist_ok=True)
    report.to_csv(os.path.join(args.out, "rows.csv"))
    report.to_json(os.path.join(args.out, "report.json"))
    if args.plot:
        plot_suite(report, os.path.join(args.out, "report.svg"))
    _echo_config(
        args.out,
        {
            "command": "ablate",
            "suite": args.suite,
            "cells": args.cells,
            "train_data": args.train_data,
            "eval_data": args.eval_data,
            "checkpoint": args.checkpoint,
            "pipeline": dataclasses.asdict(pipeline),
            "train": dataclasses.asdict(train_config),
            "protocol": dataclasses.asdict(protocol),
        },
    )
    for entry in report.aggregate()["cells"]:
        print(f"{entry['suite']}/{entry['cell']}: mIoU {entry['miou']:.4f}")
    return 0


def cmd_predict(args):
    _single_thread()
    from PIL import Image

    bundle = scenegen.load_bundle(args.scene)
    model, _ = load_checkpoint(args.checkpoint)
    spec = _load_json(args.prompts)
    raw = spec.get("prompts", [])
    if not raw:
        raise ValueError(f"no prompts in {args.prompts}")
    prompts = [(p["view"], p["row"], p["col"], p["polarity"]) for p in raw]
    state = model.prepare(bundle.views)
    predictions = model.predict(state, prompts)
    os.makedirs(args.out, exist_ok=True)
    for v, pred in enumerate(predictions):
        Image.fromarray(pred.binary * np.uint8(255)).save(
            os.path.join(args.out, f"mask_v{v}.png")
        )
    _echo_config(
        args.out,
        {
            "command": "predict",
            "scene": args.scene,
            "checkpoint": args.checkpoint,
            "prompts": prompts,
        },
    )
    print(f"wrote {len(predictions)} masks to {args.out}")
    return 0


def cmd_serve(args):
    from .service import ServiceConfig, run_service

    config = ServiceConfig.from_file(
        args.config,
        host=args.host,
        port=args.port,
        data_dir=args.data_dir,
        checkpoint_dir=args.checkpoint_dir,
        frontend_dir=args.frontend_dir,
    )
    run_service(config)
    return 0


# ---------------------------------------------------------------------------
# Argument wiring


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mvseg",
        description="multi-view promptable segmentation: data, training, evaluation, serving",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render synthetic scene bundles")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--scenes", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--objects", type=int)
    p.add_argument("--noise", type=float, help="pointmap noise scale")
    p.add_argument("--low-conf", type=float, help="fraction of pixels marked low confidence")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a checkpoint on scene bundles")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--loss-type", choices=LOSS_TYPES)
    p.add_argument("--frozen-encoder", action="store_true")
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on scene bundles")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--positives", type=int)
    p.add_argument("--negatives", type=int)
    p.add_argument("--prompt-views", choices=PROMPT_VIEW_MODES)
    p.add_argument("--frames", type=int)
    p.add_argument("--scope", choices=("single_view", "full_view"))
    p.add_argument("--plot", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run one control-experiment suite")
    p.add_argument("--suite", required=True, choices=ABLATION_SUITES)
    p.add_argument("--cells", required=True, help="comma-separated cell values")
    p.add_argument("--eval-data", required=True)
    p.add_argument("--train-data")
    p.add_argument("--checkpoint", help="reuse this checkpoint for inference-only suites")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--positives", type=int)
    p.add_argument("--negatives", type=int)
    p.add_argument("--prompt-views", choices=PROMPT_VIEW_MODES)
    p.add_argument("--frames", type=int)
    p.add_argument("--plot", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("predict", help="write per-view masks for a prompt file")
    p.add_argument("--scene", required=True, help="path to one scene bundle directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompts", required=True, help="JSON file: {prompts: [{view,row,col,polarity}]}")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("serve", help="launch the HTTP service")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--data-dir")
    p.add_argument("--checkpoint-dir")
    p.add_argument("--frontend-dir")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, scenegen.ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, scenegen.BundleIOError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
