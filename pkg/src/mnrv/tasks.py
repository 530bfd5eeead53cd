"""Downstream uses of a fitted model: frame interpolation by blending
embeddings, inpainting by training with hole masks, and the end-to-end
compress/decode pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .arch import ArchConfig, Model, build_model, plan_channels
from .autodiff import Tensor
from .codec import (
    RateReport,
    load_container,
    rate_distortion,
    rate_report,
    save_container,
)
from .errors import ConfigError
from .losses import MetricReport, metric_report, ms_ssim, psnr
from .training import TrainConfig, TrainResult, VideoDataset, train


# -- frame interpolation --------------------------------------------------------

@dataclass(frozen=True)
class InterpolationSplit:
    seen: tuple[int, ...]
    held: tuple[int, ...]
    neighbors: tuple[tuple[int, int], ...]  # (left, right) per held index


def make_split(t: int) -> InterpolationSplit:
    """Every other frame is seen; odd frames with both neighbors seen are
    held out (so a trailing odd frame with no right neighbor is skipped)."""
    if t < 3:
        raise ConfigError(f"interpolation needs at least 3 frames, got {t}")
    seen = tuple(range(0, t, 2))
    held, neighbors = [], []
    for i in range(1, t, 2):
        if i + 1 < t:
            held.append(i)
            neighbors.append((i - 1, i + 1))
    return InterpolationSplit(seen=seen, held=tuple(held),
                              neighbors=tuple(neighbors))


def interpolate_frame(model: Model, emb_left, emb_right, w: float) -> Tensor:
    """Decode the blend (1-w)*left + w*right. The endpoints skip the blend
    entirely, so w=0 and w=1 are bit-identical to plain decodes."""
    if not 0.0 <= w <= 1.0:
        raise ConfigError(f"interpolation weight must lie in [0,1], got {w}")
    left = emb_left.data if isinstance(emb_left, Tensor) else np.asarray(emb_left)
    right = emb_right.data if isinstance(emb_right, Tensor) else np.asarray(emb_right)
    if left.shape != right.shape:
        raise ConfigError(
            f"embedding shapes differ: {left.shape} vs {right.shape}"
        )
    if w == 0.0:
        blend = left
    elif w == 1.0:
        blend = right
    else:
        blend = (1.0 - w) * left + w * right
    return model.decode(Tensor(blend))


def eval_interpolation(model: Model, frames, split: InterpolationSplit,
                       w: float = 0.5) -> MetricReport:
    """Reconstruct each held-out frame from its neighbors' embeddings."""
    preds, targets = [], []
    with ad.no_grad():
        for h, (l, r) in zip(split.held, split.neighbors):
            el = model.encode(Tensor(np.asarray(frames[l])))
            er = model.encode(Tensor(np.asarray(frames[r])))
            preds.append(interpolate_frame(model, el, er, w))
            targets.append(Tensor(np.asarray(frames[h])))
    return metric_report(preds, targets)


def repeat_baseline(frames, split: InterpolationSplit) -> MetricReport:
    """Naive baseline: predict each held-out frame by repeating its left
    neighbor."""
    preds = [Tensor(np.asarray(frames[l])) for l, _ in split.neighbors]
    targets = [Tensor(np.asarray(frames[h])) for h in split.held]
    return metric_report(preds, targets)


def train_on_split(frames, split: InterpolationSplit, arch: ArchConfig,
                   config: TrainConfig) -> TrainResult:
    """Fit a fresh model on the seen frames only; held-out indices are
    never read here."""
    seen_frames = [np.asarray(frames[i]) for i in split.seen]
    data = VideoDataset(seen_frames)
    model = build_model(arch, plan_channels(arch), seed=config.seed)
    return train(model, data, config)


@dataclass
class InterpolationResult:
    split: InterpolationSplit
    training: TrainResult
    interpolated: MetricReport
    baseline: MetricReport


def interpolation_pipeline(frames, arch: ArchConfig,
                           config: TrainConfig) -> InterpolationResult:
    split = make_split(len(frames))
    result = train_on_split(frames, split, arch, config)
    return InterpolationResult(
        split=split,
        training=result,
        interpolated=eval_interpolation(result.model, frames, split),
        baseline=repeat_baseline(frames, split),
    )


# -- inpainting ------------------------------------------------------------------

@dataclass(frozen=True)
class InpaintSpec:
    kind: str = "center"        # or "random"
    fraction: float = 0.1       # of frame area covered by the hole
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("center", "random"):
            raise ConfigError(f"unknown mask kind {self.kind!r}")
        if not 0.0 < self.fraction < 1.0:
            raise ConfigError(
                f"mask fraction must lie strictly in (0,1), got {self.fraction}"
            )


def build_masks(spec: InpaintSpec, t: int, h: int, w: int
                ) -> tuple[list[np.ndarray], list[tuple[int, int, int, int]]]:
    """Binary (3,h,w) masks with a rectangular hole (mask==0) of roughly
    `fraction` of the area; returns the masks and each (top,left,bh,bw) box."""
    bh = max(1, round(h * math.sqrt(spec.fraction)))
    bw = max(1, round(w * math.sqrt(spec.fraction)))
    if bh >= h and bw >= w:
        raise ConfigError(
            f"fraction {spec.fraction} rounds to a hole covering the whole "
            f"{h}x{w} frame"
        )
    bh, bw = min(bh, h), min(bw, w)
    rng = np.random.default_rng(spec.seed)
    masks, boxes = [], []
    for _ in range(t):
        if spec.kind == "center":
            top, left = (h - bh) // 2, (w - bw) // 2
        else:
            top = int(rng.integers(0, h - bh + 1))
            left = int(rng.integers(0, w - bw + 1))
        m = np.ones((3, h, w), dtype=ad.default_dtype())
        m[:, top:top + bh, left:left + bw] = 0.0
        masks.append(m)
        boxes.append((top, left, bh, bw))
    return masks, boxes


@dataclass
class InpaintResult:
    training: TrainResult
    full: MetricReport        # whole-frame reconstruction vs clean frames
    restored_psnr: float      # over hole pixels only
    restored_ms_ssim: float   # over the cropped hole box (nan if too small)
    kept_psnr: float          # over supervised pixels only
    boxes: list


def eval_inpainting(frames, spec: InpaintSpec, arch: ArchConfig,
                    config: TrainConfig) -> InpaintResult:
    """Train with hole masks (holes contribute neither input content nor
    loss), then score the reconstruction against the clean frames: full
    frame, the restored hole region, and the supervised remainder."""
    frames = [np.asarray(f) for f in frames]
    t = len(frames)
    if t == 0:
        raise ConfigError("need at least one frame")
    _, h, w = frames[0].shape
    masks, boxes = build_masks(spec, t, h, w)
    data = VideoDataset([f.copy() for f in frames], masks=masks)
    model = build_model(arch, plan_channels(arch), seed=config.seed)
    result = train(model, data, config)

    preds, targets = [], []
    rest_ps, kept_ps, rest_sims = [], [], []
    with ad.no_grad():
        for f, m, (top, left, bh, bw) in zip(frames, masks, boxes):
            pred = model.decode(model.encode(Tensor(f * m)))
            target = Tensor(f)
            preds.append(pred)
            targets.append(target)
            rest_ps.append(psnr(pred, target, mask=Tensor(1.0 - m)))
            kept_ps.append(psnr(pred, target, mask=Tensor(m)))
            pc = Tensor(pred.data[:, top:top + bh, left:left + bw])
            tc = Tensor(f[:, top:top + bh, left:left + bw])
            if min(bh, bw) >= 11:
                rest_sims.append(float(ms_ssim(pc, tc, scales=1).item()))
        full = metric_report(preds, targets)
    restored_sim = float(np.mean(rest_sims)) if rest_sims else float("nan")
    return InpaintResult(
        training=result,
        full=full,
        restored_psnr=float(np.mean(rest_ps)),
        restored_ms_ssim=restored_sim,
        kept_psnr=float(np.mean(kept_ps)),
        boxes=boxes,
    )


# -- compression pipeline --------------------------------------------------------

@dataclass
class CompressResult:
    training: TrainResult
    container: bytes
    report: RateReport
    decoded: list[np.ndarray]
    sweep: list[RateReport]


def compress_pipeline(frames, arch: ArchConfig, config: TrainConfig,
                      bits: int = 8, sweep=None) -> CompressResult:
    """plan -> build -> train -> quantize -> container -> decode -> score.

    The decoded frames come back out of the container (not from the live
    model), so the report measures exactly what a receiver would see."""
    data = VideoDataset([np.asarray(f) for f in frames])
    model = build_model(arch, plan_channels(arch), seed=config.seed)
    result = train(model, data, config)
    with ad.no_grad():
        embeddings = [model.encode(Tensor(f)).data for f in data.frames]
    blob = save_container(model, embeddings, bits=bits)
    report = rate_report(blob, [Tensor(f) for f in data.frames])
    loaded, embs = load_container(blob)
    with ad.no_grad():
        decoded = [loaded.decode(Tensor(e)).data for e in embs]
    sweep_reports = []
    if sweep:
        sweep_reports = rate_distortion(model, [Tensor(f) for f in data.frames],
                                        bit_widths=tuple(sweep))
    return CompressResult(training=result, container=blob, report=report,
                          decoded=decoded, sweep=sweep_reports)
