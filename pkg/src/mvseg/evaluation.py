"""Metrics, prompt protocols, and the ablation runner.

evaluate() drives the full pipeline over scene bundles with ground-truth
derived prompts; run_ablation() reproduces the control-experiment grids
(positional-embedding type, attention scope, confidence threshold, pointmap
noise, frame count, standardization, loss type) at desk scale, retraining
per cell where the factor is baked in at training time and reusing one
checkpoint where it is inference-only.
"""

from __future__ import annotations

import csv
import json
import time
import zlib
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import scenegen
from .model import PipelineConfig, SegmentationModel
from .training import TrainConfig, single_view_samples, train

PROMPT_VIEW_MODES = ("reference_only", "spread_across_views")
ABLATION_SUITES = (
    "pe_type",
    "attention_scope",
    "confidence_threshold",
    "noise_scale",
    "frame_count",
    "standardization",
    "loss_type",
)
MIN_PROMPTABLE_PIXELS = 8


@dataclass
class EvalProtocol:
    n_positive: int = 10
    n_negative: int = 2
    prompt_views: str = "reference_only"
    frames: int = 0  # 0 means every view the scene has
    seed: int = 0

    def __post_init__(self):
        if self.prompt_views not in PROMPT_VIEW_MODES:
            raise ValueError(f"prompt_views must be one of {PROMPT_VIEW_MODES}")
        if self.n_positive < 1:
            raise ValueError("n_positive must be >= 1")
        if self.n_negative < 0:
            raise ValueError("n_negative must be >= 0")


@dataclass
class EvalRow:
    suite: str
    cell: str
    scene: str
    object_id: str
    iou: float
    acc: float
    view_ious: list = field(default_factory=list)
    view_accs: list = field(default_factory=list)


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    runtime_seconds: float = 0.0

    def aggregate(self) -> dict:
        cells = {}
        for row in self.rows:
            cells.setdefault((row.suite, row.cell), []).append(row)
        out = {"overall": _summarize(self.rows), "cells": []}
        for (suite, cell), rows in sorted(cells.items()):
            entry = {"suite": suite, "cell": cell}
            entry.update(_summarize(rows))
            out["cells"].append(entry)
        return out

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["suite", "cell", "scene", "object", "iou", "acc"])
            for row in self.rows:
                writer.writerow(
                    [row.suite, row.cell, row.scene, row.object_id,
                     f"{row.iou:.6f}", f"{row.acc:.6f}"]
                )

    def to_json(self, path: str) -> None:
        payload = {
            "aggregate": self.aggregate(),
            "notes": self.notes,
            "runtime_seconds": self.runtime_seconds,
        }
        with open(path, "w") as f:
            json.dump(payload, f, indent=2)


def _summarize(rows) -> dict:
    if not rows:
        return {"miou": float("nan"), "macc": float("nan"), "count": 0}
    return {
        "miou": float(np.mean([r.iou for r in rows])),
        "macc": float(np.mean([r.acc for r in rows])),
        "count": len(rows),
    }


# ---------------------------------------------------------------------------
# Metrics


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    pred = np.asarray(pred) > 0
    gt = np.asarray(gt) > 0
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def pixel_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred) > 0
    gt = np.asarray(gt) > 0
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return float((pred == gt).mean())


# ---------------------------------------------------------------------------
# Prompt protocol


def _object_rng(protocol: EvalProtocol, scene_id: str, object_id: str) -> np.random.Generator:
    # (scene, object, seed) fully determines the prompt set, independent of
    # evaluation order.
    tag = zlib.crc32(f"{scene_id}/{object_id}".encode())
    return np.random.default_rng([protocol.seed, tag])


def sample_eval_prompts(views, object_id: str, protocol: EvalProtocol, scene_id: str):
    """Deterministic ground-truth prompts for one object over the given views.

    Returns (prompts, reference_view) or (None, None) when the object has no
    promptable mask in any view.
    """
    rng = _object_rng(protocol, scene_id, object_id)
    masks = [np.asarray(v.masks[object_id]) > 0 for v in views]
    visible = [i for i, m in enumerate(masks) if m.sum() >= MIN_PROMPTABLE_PIXELS]
    if not visible:
        return None, None

    prompts = []
    if protocol.prompt_views == "reference_only":
        ref = visible[0]
        interior = np.argwhere(masks[ref])
        exterior = np.argwhere(~masks[ref])
        for i in rng.integers(0, interior.shape[0], size=protocol.n_positive):
            r, c = interior[i]
            prompts.append((ref, int(r), int(c), +1))
        for i in rng.integers(0, exterior.shape[0], size=protocol.n_negative):
            r, c = exterior[i]
            prompts.append((ref, int(r), int(c), -1))
        return prompts, ref

    for _ in range(protocol.n_positive):
        v = int(visible[rng.integers(0, len(visible))])
        interior = np.argwhere(masks[v])
        r, c = interior[rng.integers(0, interior.shape[0])]
        prompts.append((v, int(r), int(c), +1))
    for _ in range(protocol.n_negative):
        v = int(rng.integers(0, len(views)))
        exterior = np.argwhere(~masks[v])
        if exterior.shape[0] == 0:
            continue
        r, c = exterior[rng.integers(0, exterior.shape[0])]
        prompts.append((v, int(r), int(c), -1))
    return prompts, visible[0]


# ---------------------------------------------------------------------------
# Evaluation driver


def evaluate(
    model: Optional[SegmentationModel],
    scenes,
    protocol: EvalProtocol,
    suite: str = "eval",
    cell: str = "default",
    scope: Optional[str] = None,
    predict_fn: Optional[Callable] = None,
) -> EvalReport:
    """Prompt every object of every scene from ground truth and score all views.

    ``predict_fn(views, prompts) -> list of (H, W) binary masks`` replaces the
    model when given (oracle plumbing, external predictors); otherwise the
    model's prepare/predict path runs with per-scene embedding reuse.
    """
    if model is None and predict_fn is None:
        raise ValueError("either a model or a predict_fn is required")
    started = time.time()
    report = EvalReport()
    for bundle in scenes:
        views = bundle.views[: protocol.frames] if protocol.frames > 0 else bundle.views
        if len(views) == 0:
            report.notes.append(f"{bundle.scene_id}: frame subset is empty, skipped")
            continue
        state = None
        if predict_fn is None:
            state = model.prepare(views)
        for object_id in bundle.object_ids():
            prompts, ref = sample_eval_prompts(views, object_id, protocol, bundle.scene_id)
            if prompts is None:
                report.notes.append(
                    f"{bundle.scene_id}/{object_id}: not promptable in available views, skipped"
                )
                continue
            if protocol.prompt_views == "reference_only" and ref != 0:
                report.notes.append(
                    f"{bundle.scene_id}/{object_id}: reference view {ref} (not visible in view 0)"
                )
            if predict_fn is not None:
                binaries = predict_fn(views, prompts)
            else:
                binaries = [p.binary for p in model.predict(state, prompts, scope=scope)]
            view_ious, view_accs = [], []
            for v, binary in enumerate(binaries):
                gt = views[v].masks[object_id]
                view_ious.append(iou(binary, gt))
                view_accs.append(pixel_accuracy(binary, gt))
            report.rows.append(
                EvalRow(
                    suite=suite,
                    cell=cell,
                    scene=bundle.scene_id,
                    object_id=object_id,
                    iou=float(np.mean(view_ious)),
                    acc=float(np.mean(view_accs)),
                    view_ious=view_ious,
                    view_accs=view_accs,
                )
            )
    report.rows.sort(key=lambda r: (r.suite, r.cell, r.scene, r.object_id))
    report.runtime_seconds = time.time() - started
    return report


# ---------------------------------------------------------------------------
# Ablation runner


@dataclass
class AblationConfig:
    pipeline: PipelineConfig
    train: TrainConfig
    train_scenes: list
    eval_scenes: list
    protocol: EvalProtocol
    base_model: Optional[SegmentationModel] = None  # reused by inference-only suites
    corrupt_seed: int = 7
    corrupt_low_conf_fraction: float = 0.15


def _retrain(config: AblationConfig, pipeline: PipelineConfig, train_config: TrainConfig):
    samples = single_view_samples(config.train_scenes)
    return train(samples, train_config, pipeline=pipeline).model


def _base(config: AblationConfig) -> SegmentationModel:
    if config.base_model is not None:
        return config.base_model
    return _retrain(config, config.pipeline, config.train)


def run_ablation(suite: str, grid, config: AblationConfig) -> EvalReport:
    """One report row group per grid cell; seeds held fixed so only the
    ablated factor varies between cells."""
    if suite not in ABLATION_SUITES:
        raise ValueError(f"unknown suite {suite!r}; expected one of {ABLATION_SUITES}")
    merged = EvalReport()
    started = time.time()

    def extend(rep: EvalReport):
        merged.rows.extend(rep.rows)
        merged.notes.extend(rep.notes)

    if suite == "pe_type":
        for cell in grid:
            pipeline = replace(config.pipeline, pe_mode=str(cell))
            model = _retrain(config, pipeline, config.train)
            extend(evaluate(model, config.eval_scenes, config.protocol, suite, str(cell)))
    elif suite == "attention_scope":
        for cell in grid:
            pipeline = replace(
                config.pipeline,
                decoder=replace(config.pipeline.decoder, attention_scope=str(cell)),
            )
            model = _retrain(config, pipeline, config.train)
            extend(evaluate(model, config.eval_scenes, config.protocol, suite, str(cell)))
    elif suite == "confidence_threshold":
        for cell in grid:
            fraction = float(cell)
            # Fraction zero disables confidence embeddings outright: flagging
            # nothing and asking the embeddings to matter is contradictory.
            pipeline = replace(
                config.pipeline,
                use_confidence=fraction > 0.0,
                low_conf_fraction=fraction,
            )
            model = _retrain(config, pipeline, config.train)
            extend(
                evaluate(model, config.eval_scenes, config.protocol, suite, f"{fraction:g}")
            )
    elif suite == "standardization":
        for cell in grid:
            on = cell in (True, "with", "on", "true")
            pipeline = replace(config.pipeline, standardize=on)
            model = _retrain(config, pipeline, config.train)
            label = "with" if on else "without"
            extend(evaluate(model, config.eval_scenes, config.protocol, suite, label))
    elif suite == "loss_type":
        for cell in grid:
            train_config = replace(config.train, loss_type=str(cell))
            model = _retrain(config, config.pipeline, train_config)
            extend(evaluate(model, config.eval_scenes, config.protocol, suite, str(cell)))
    elif suite == "noise_scale":
        model = _base(config)
        for cell in grid:
            scale = float(cell)
            scenes = [
                scenegen.corrupt_pointmap(
                    s, scale, config.corrupt_low_conf_fraction if scale > 0 else 0.0,
                    seed=config.corrupt_seed + i,
                )
                for i, s in enumerate(config.eval_scenes)
            ]
            extend(evaluate(model, scenes, config.protocol, suite, f"{scale:g}"))
    elif suite == "frame_count":
        model = _base(config)
        for cell in grid:
            frames = int(cell)
            protocol = replace(config.protocol, frames=frames)
            for scope in ("single_view", "full_view"):
                extend(
                    evaluate(
                        model, config.eval_scenes, protocol, suite,
                        f"{frames}/{scope}", scope=scope,
                    )
                )

    merged.rows.sort(key=lambda r: (r.suite, r.cell, r.scene, r.object_id))
    merged.runtime_seconds = time.time() - started
    return merged


def plot_suite(report: EvalReport, path: str) -> None:
    """Line plot of per-cell mIoU, one series per suite, written as SVG."""
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    agg = report.aggregate()["cells"]
    suites = {}
    for entry in agg:
        suites.setdefault(entry["suite"], []).append((entry["cell"], entry["miou"]))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for suite, cells in sorted(suites.items()):
        labels = [c for c, _ in cells]
        values = [v for _, v in cells]
        ax.plot(range(len(values)), values, marker="o", label=suite)
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("mIoU")
    ax.set_xlabel("cell")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
