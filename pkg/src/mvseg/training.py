"""Single-view training: prompt sampling, focal+dice objective, loop,
checkpointing.

Every sample is one view with one object mask. Prompts are drawn fresh each
time a sample is visited, either as sparse clicks (up to 10% negative) or as
dense clicks inside a deliberately degraded copy of the mask. The whole loop
is deterministic in (dataset order, config.seed) when torch runs
single-threaded.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from scipy import ndimage

from .decoder import DecoderConfig
from .encoder import ImageEncoderConfig
from .geometry import StandardizationStats, compute_stats
from .model import PipelineConfig, SegmentationModel, build_model

LOSS_TYPES = ("focal+dice", "bce+dice")
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lambda_focal: float = 1.0
    lambda_dice: float = 0.05
    focal_alpha: float = 0.9
    focal_gamma: float = 1.5
    prompts_per_sample: int = 10
    max_negative_fraction: float = 0.10
    dense_drop_fraction: float = 0.80
    dense_perturb_fraction: float = 0.20
    dense_sample_probability: float = 0.5
    learning_rate: float = 1e-3
    steps: int = 1000
    batch_size: int = 4
    seed: int = 0
    encoder_frozen: bool = False
    loss_type: str = "focal+dice"

    def __post_init__(self):
        for name in (
            "max_negative_fraction",
            "dense_drop_fraction",
            "dense_perturb_fraction",
            "dense_sample_probability",
        ):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.prompts_per_sample < 1:
            raise ValueError("prompts_per_sample must be >= 1")
        if self.loss_type not in LOSS_TYPES:
            raise ValueError(f"loss_type must be one of {LOSS_TYPES}")


@dataclass(eq=False)
class TrainSample:
    """One single-view supervision instance.

    ``stats`` carries the standardization constants of the scene the view came
    from. Supervision stays single-view either way, but standardizing against
    the scene's full point cloud keeps the embedded geometry on the same scale
    the model will see when it standardizes a whole multi-view scene at
    inference time. Left as None, the view's own points are used.
    """

    image: np.ndarray       # (H, W, 3) float32
    pointmap: np.ndarray    # (H, W, 3) float32
    confidence: np.ndarray  # (H, W) float32
    mask: np.ndarray        # (H, W) uint8
    stats: Optional[StandardizationStats] = None


@dataclass(eq=False)
class TrainResult:
    model: SegmentationModel
    loss_history: list
    steps: int


# ---------------------------------------------------------------------------
# Losses


def _check_shapes(logits: torch.Tensor, target: torch.Tensor):
    if logits.shape != target.shape:
        raise ValueError(f"logits shape {tuple(logits.shape)} != target {tuple(target.shape)}")


def focal_loss(
    logits: torch.Tensor, target: torch.Tensor, alpha: float = 0.9, gamma: float = 1.5
) -> torch.Tensor:
    """Mean over pixels of -alpha_t (1 - p_t)^gamma log(p_t).

    p_t is the predicted probability of the true class, clamped to
    [1e-7, 1 - 1e-7]; alpha_t is alpha on positives and 1 - alpha on negatives.
    """
    _check_shapes(logits, target)
    t = target.to(logits.dtype)
    p = torch.sigmoid(logits)
    p_t = torch.clamp(p * t + (1.0 - p) * (1.0 - t), 1e-7, 1.0 - 1e-7)
    alpha_t = alpha * t + (1.0 - alpha) * (1.0 - t)
    return (-alpha_t * (1.0 - p_t) ** gamma * torch.log(p_t)).mean()


def dice_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """1 - (2 sum(p t) + 1) / (sum(p) + sum(t) + 1) with p = sigmoid(logits)."""
    _check_shapes(logits, target)
    t = target.to(logits.dtype)
    p = torch.sigmoid(logits)
    num = 2.0 * (p * t).sum() + 1.0
    den = p.sum() + t.sum() + 1.0
    return 1.0 - num / den


def objective(logits: torch.Tensor, target: torch.Tensor, config: TrainConfig) -> torch.Tensor:
    if config.loss_type == "bce+dice":
        # Plain BCE equals the focal formula at gamma 0 with both classes
        # weighted 1/2, times two.
        seg = 2.0 * focal_loss(logits, target, alpha=0.5, gamma=0.0)
    else:
        seg = focal_loss(logits, target, alpha=config.focal_alpha, gamma=config.focal_gamma)
    return config.lambda_focal * seg + config.lambda_dice * dice_loss(logits, target)


# ---------------------------------------------------------------------------
# Prompt sampling


def sample_prompts(mask: np.ndarray, config: TrainConfig, seed: int):
    """Draw the per-sample click set: mostly positive, at most 10% negative.

    Returns (prompts, all_foreground) where prompts is a list of
    (row, col, polarity) and all_foreground warns that the mask left no room
    for negatives.
    """
    mask = np.asarray(mask) > 0
    interior = np.argwhere(mask)
    if interior.shape[0] == 0:
        raise ValueError("cannot sample prompts from an empty mask")
    exterior = np.argwhere(~mask)
    rng = np.random.default_rng(seed)

    max_neg = int(math.floor(config.max_negative_fraction * config.prompts_per_sample))
    n_neg = int(rng.integers(0, max_neg + 1))
    all_foreground = exterior.shape[0] == 0
    if all_foreground:
        n_neg = 0
    n_pos = config.prompts_per_sample - n_neg

    prompts = []
    pos_idx = rng.integers(0, interior.shape[0], size=n_pos)
    for i in pos_idx:
        r, c = interior[i]
        prompts.append((int(r), int(c), +1))
    if n_neg > 0:
        neg_idx = rng.integers(0, exterior.shape[0], size=n_neg)
        for i in neg_idx:
            r, c = exterior[i]
            prompts.append((int(r), int(c), -1))
    return prompts, all_foreground


def degrade_mask(
    mask: np.ndarray,
    drop_fraction: float = 0.80,
    perturb_fraction: float = 0.20,
    seed: int = 0,
) -> np.ndarray:
    """Simulate a sloppy dense prompt: drop most of the mask, then flip pixels
    in the boundary band of what is left."""
    mask = (np.asarray(mask) > 0).astype(np.uint8)
    interior = np.argwhere(mask)
    n = interior.shape[0]
    if n == 0:
        raise ValueError("cannot degrade an empty mask")
    rng = np.random.default_rng(seed)

    n_drop = int(math.floor(drop_fraction * n + 0.5))
    n_drop = min(n_drop, n - 1)  # never drop the final pixel
    out = mask.copy()
    if n_drop > 0:
        drop = rng.choice(n, size=n_drop, replace=False)
        rr, cc = interior[drop, 0], interior[drop, 1]
        out[rr, cc] = 0

    remaining = int(out.sum())
    n_flip = int(math.floor(perturb_fraction * remaining + 0.5))
    if n_flip > 0:
        struct8 = np.ones((3, 3), dtype=bool)
        band = ndimage.binary_dilation(out, struct8) & ~ndimage.binary_erosion(out, struct8)
        band_pix = np.argwhere(band)
        n_flip = min(n_flip, band_pix.shape[0])
        flip = rng.choice(band_pix.shape[0], size=n_flip, replace=False)
        rr, cc = band_pix[flip, 0], band_pix[flip, 1]
        out[rr, cc] = 1 - out[rr, cc]
    return out


def dense_prompts(mask: np.ndarray, config: TrainConfig, seed: int):
    """Dense-prompt protocol: positive clicks inside a degraded mask copy."""
    degraded = degrade_mask(
        mask, config.dense_drop_fraction, config.dense_perturb_fraction, seed
    )
    if not degraded.any():
        degraded = (np.asarray(mask) > 0).astype(np.uint8)
    interior = np.argwhere(degraded > 0)
    rng = np.random.default_rng(seed + 1)
    idx = rng.integers(0, interior.shape[0], size=config.prompts_per_sample)
    return [(int(interior[i][0]), int(interior[i][1]), +1) for i in idx]


# ---------------------------------------------------------------------------
# Dataset helpers


def single_view_samples(bundles, min_mask_pixels: int = 8, scene_stats: bool = True):
    """Explode scene bundles into per-(view, object) training samples.

    With scene_stats each sample standardizes against its whole bundle's
    point cloud instead of just its own view, matching the inference-time
    distribution (a lone view's cloud is a narrow frustum whose mean and
    per-axis spread sit far from the multi-view union's).
    """
    samples = []
    for bundle in bundles:
        stats = None
        if scene_stats:
            stats = compute_stats([v.pointmap for v in bundle.views])
        for view in bundle.views:
            for object_id in bundle.object_ids():
                mask = view.masks[object_id]
                if int(mask.sum()) >= min_mask_pixels:
                    samples.append(
                        TrainSample(
                            image=view.image,
                            pointmap=view.pointmap,
                            confidence=view.confidence,
                            mask=mask,
                            stats=stats,
                        )
                    )
    return samples


# ---------------------------------------------------------------------------
# Training loop


def train(
    samples,
    config: TrainConfig,
    pipeline: Optional[PipelineConfig] = None,
    model: Optional[SegmentationModel] = None,
    log_every: int = 0,
) -> TrainResult:
    """Minimize the focal+dice objective over decoder, learnable embeddings,
    and (unless frozen) the encoder. The Fourier basis is never touched."""
    samples = list(samples)
    if len(samples) == 0:
        raise ValueError("at least one training sample required")
    if model is None:
        model = build_model(pipeline or PipelineConfig(), seed=config.seed)

    frozen = config.encoder_frozen or model.encoder.frozen
    params = list(model.decoder.parameters()) + list(model.embeddings.parameters())
    if not frozen:
        params += [p for p in model.encoder.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)

    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    model.train()

    order = []
    history = []
    for step in range(config.steps):
        if len(order) < config.batch_size:
            order += list(rng.permutation(len(samples)))
        batch, order = order[: config.batch_size], order[config.batch_size :]

        optimizer.zero_grad()
        total = None
        for idx in batch:
            sample = samples[idx]
            prompt_seed = int(rng.integers(2**31))
            if rng.random() < config.dense_sample_probability:
                clicks = dense_prompts(sample.mask, config, prompt_seed)
            else:
                clicks, _ = sample_prompts(sample.mask, config, prompt_seed)
            prompts = [(0, r, c, p) for r, c, p in clicks]
            logits = model.training_logits([sample], prompts, stats=sample.stats)[0]
            target = torch.from_numpy((sample.mask > 0).astype(np.float32))
            loss = objective(logits, target.to(logits.dtype), config)
            total = loss if total is None else total + loss
        total = total / len(batch)
        if not torch.isfinite(total):
            raise RuntimeError(f"training diverged: non-finite loss at step {step}")
        total.backward()
        optimizer.step()
        history.append(float(total.detach()))
        if log_every and (step + 1) % log_every == 0:
            recent = history[-log_every:]
            print(f"step {step + 1}/{config.steps} loss {sum(recent) / len(recent):.4f}")

    model.eval()
    return TrainResult(model=model, loss_history=history, steps=config.steps)


# ---------------------------------------------------------------------------
# Checkpointing
#
# One binary blob of named float32 arrays plus a JSON manifest. Blob entry:
# uint32 name length, utf-8 name, uint32 ndim, uint32 dims, little-endian
# float32 payload; entries sorted by name.


def _collect_arrays(model: SegmentationModel):
    arrays = {}
    for name, tensor in model.state_dict().items():
        arrays[name] = tensor.detach().cpu().to(torch.float32).numpy()
    arrays["basis3d.matrix"] = model.basis3d.matrix
    arrays["basis2d.matrix"] = model.basis2d.matrix
    return arrays


def _pipeline_to_dict(config: PipelineConfig) -> dict:
    return dataclasses.asdict(config)


def _pipeline_from_dict(d: dict) -> PipelineConfig:
    d = dict(d)
    d["encoder"] = ImageEncoderConfig(**{**d["encoder"], "channels": tuple(d["encoder"]["channels"])})
    d["decoder"] = DecoderConfig(**d["decoder"])
    return PipelineConfig(**d)


def save_checkpoint(
    path: str,
    model: SegmentationModel,
    step: int = 0,
    seed: int = 0,
    train_config: Optional[TrainConfig] = None,
) -> None:
    os.makedirs(path, exist_ok=True)
    arrays = _collect_arrays(model)
    with open(os.path.join(path, "params.bin"), "wb") as f:
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "step": step,
        "seed": seed,
        "pipeline": _pipeline_to_dict(model.config),
        "train": dataclasses.asdict(train_config) if train_config else None,
    }
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)


def read_param_blob(path: str) -> dict:
    arrays = {}
    with open(path, "rb") as f:
        data = f.read()
    offset = 0
    while offset < len(data):
        (name_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", data, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", data, offset)
        offset += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
        arrays[name] = arr.copy()
    return arrays


def load_checkpoint(path: str) -> tuple:
    """Rebuild the model from a checkpoint directory; returns (model, manifest)."""
    manifest_path = os.path.join(path, "manifest.json")
    params_path = os.path.join(path, "params.bin")
    if not os.path.exists(manifest_path) or not os.path.exists(params_path):
        raise FileNotFoundError(f"not a checkpoint directory: {path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format: {manifest.get('format_version')}")

    model = build_model(_pipeline_from_dict(manifest["pipeline"]), seed=manifest.get("seed", 0))
    arrays = read_param_blob(params_path)
    model.basis3d.matrix = arrays.pop("basis3d.matrix")
    model.basis2d.matrix = arrays.pop("basis2d.matrix")
    state = {name: torch.from_numpy(arr) for name, arr in arrays.items()}
    model.load_state_dict(state)
    model.eval()
    return model, manifest
