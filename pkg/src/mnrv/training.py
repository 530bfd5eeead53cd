"""Fitting a model to a frame sequence.

Joint encoder+decoder optimization with Adam, linear-warmup/cosine-decay
learning rate, per-epoch seeded shuffling, and epoch-boundary checkpoints
that restore bit-exactly: parameters, optimizer moments, step counter, and
the generator state all ride in the checkpoint, so a resumed run replays
the uninterrupted one step for step.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .arch import ChannelPlan, Model, build_model
from .autodiff import Tensor
from .codec import (
    KIND_CHECKPOINT,
    config_from_dict,
    config_to_dict,
    finish_container,
    open_container,
    pack_array,
    unpack_array,
)
from .errors import ConfigError, ContainerError, TruncatedContainerError
from .losses import LossConfig, MetricReport, loss, metric_report, parse_loss


class Adam:
    """Bias-corrected Adam over a fixed parameter list, applied in-place."""

    def __init__(self, params, lr: float = 0.001, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        if not self.params:
            raise ConfigError("optimizer needs at least one parameter")
        if lr <= 0:
            raise ConfigError(f"lr must be positive, got {lr}")
        b1, b2 = betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise ConfigError(f"betas must lie in (0,1), got {betas}")
        if eps <= 0:
            raise ConfigError(f"eps must be positive, got {eps}")
        self.lr = lr
        self.betas = (float(b1), float(b2))
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def moments(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(m.copy(), v.copy()) for m, v in zip(self.m, self.v)]

    def load_moments(self, moments, t: int) -> None:
        if len(moments) != len(self.params):
            raise ConfigError(
                f"{len(moments)} moment pairs for {len(self.params)} parameters"
            )
        for i, ((m, v), p) in enumerate(zip(moments, self.params)):
            if m.shape != p.shape or v.shape != p.shape:
                raise ConfigError(f"moment {i} shape does not match its parameter")
            self.m[i] = m.astype(p.data.dtype, copy=True)
            self.v[i] = v.astype(p.data.dtype, copy=True)
        self.t = int(t)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 2
    lr: float = 0.001
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    alpha: float = 0.7
    seed: int = 0
    warmup_frac: float = 0.05
    schedule: str = "cosine"     # or "constant"
    loss: str = ""               # loss grammar string; empty = pair loss at alpha
    eval_every: int = 1          # epochs between metric evaluations

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac must lie in [0,1), got {self.warmup_frac}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0,1], got {self.alpha}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be positive, got {self.eval_every}")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        self.loss_config()  # validate the loss string eagerly

    def loss_config(self) -> LossConfig:
        if self.loss:
            return parse_loss(self.loss)
        return LossConfig(kind="pair", alpha=self.alpha, pair=("l1", "ms_ssim"))


@dataclass
class VideoDataset:
    frames: list
    masks: list | None = None

    def __post_init__(self):
        if not self.frames:
            raise ConfigError("dataset needs at least one frame")
        self.frames = [np.asarray(f, dtype=ad.default_dtype()) for f in self.frames]
        shape = self.frames[0].shape
        if len(shape) != 3 or shape[0] != 3:
            raise ConfigError(f"frames must be (3,H,W), got {shape}")
        for i, f in enumerate(self.frames):
            if f.shape != shape:
                raise ConfigError(f"frame {i} has shape {f.shape}, expected {shape}")
            if not np.all(np.isfinite(f)):
                raise ConfigError(f"frame {i} contains non-finite values")
            if f.min() < 0.0 or f.max() > 1.0:
                raise ConfigError(f"frame {i} has values outside [0,1]")
        if self.masks is not None:
            if len(self.masks) != len(self.frames):
                raise ConfigError(
                    f"{len(self.masks)} masks for {len(self.frames)} frames"
                )
            self.masks = [np.asarray(m, dtype=ad.default_dtype()) for m in self.masks]
            for i, m in enumerate(self.masks):
                if m.shape != shape:
                    raise ConfigError(f"mask {i} has shape {m.shape}, expected {shape}")
                if not np.all((m == 0.0) | (m == 1.0)):
                    raise ConfigError(f"mask {i} must be binary")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def frame_hw(self) -> tuple[int, int]:
        return self.frames[0].shape[1], self.frames[0].shape[2]


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup to the base rate, then cosine decay to 1% of it,
    landing on the floor exactly at the final step."""
    if total_steps < 1:
        raise ConfigError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step < total_steps:
        raise ConfigError(f"step {step} outside [0,{total_steps})")
    if config.schedule == "constant":
        return config.lr
    warmup = int(config.warmup_frac * total_steps)
    if step < warmup:
        return config.lr * (step + 1) / warmup
    span = max(total_steps - 1 - warmup, 1)
    floor = 0.01 * config.lr
    phase = math.pi * (step - warmup) / span
    return floor + 0.5 * (config.lr - floor) * (1.0 + math.cos(phase))


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss: float
    report: MetricReport | None

    @property
    def psnr(self) -> float:
        return self.report.psnr if self.report else float("nan")

    @property
    def ms_ssim(self) -> float:
        return self.report.ms_ssim if self.report else float("nan")


@dataclass
class TrainResult:
    model: Model
    history: list[EpochStats]


@dataclass
class Checkpoint:
    model: Model
    config: TrainConfig
    epoch: int          # completed epochs
    step: int           # optimizer steps taken
    moments: list
    rng_state: dict
    history: list[EpochStats]


def _model_input(data: VideoDataset, i: int) -> Tensor:
    # masked pixels are holes, not content: the encoder never sees them,
    # which also keeps parameter updates independent of what they contain
    if data.masks is not None:
        return Tensor(data.frames[i] * data.masks[i])
    return Tensor(data.frames[i])


def evaluate(model: Model, data: VideoDataset) -> MetricReport:
    with ad.no_grad():
        preds, targets = [], []
        for i, f in enumerate(data.frames):
            preds.append(model.decode(model.encode(_model_input(data, i))))
            targets.append(Tensor(f))
        return metric_report(preds, targets)


def history_csv(history) -> str:
    lines = ["epoch,lr,loss,psnr,ms_ssim"]
    for s in history:
        if s.report is None:
            lines.append(f"{s.epoch},{s.lr:.8g},{s.loss:.8f},,")
        else:
            lines.append(f"{s.epoch},{s.lr:.8g},{s.loss:.8f},"
                         f"{s.psnr:.6f},{s.ms_ssim:.8f}")
    return "\n".join(lines) + "\n"


def train(model: Model, data: VideoDataset, config: TrainConfig, *,
          checkpoint_path=None, checkpoint_every: int = 1,
          resume: Checkpoint | None = None,
          stop_after: int | None = None) -> TrainResult:
    """Run epochs x ceil(T/batch) steps of joint encoder+decoder fitting.

    Each step reconstructs a shuffled frame batch, averages the loss over
    the batch, backpropagates, and applies one Adam update at the scheduled
    rate. Metrics over the whole sequence are recorded per epoch.

    `stop_after` halts early after that many epochs (checkpointing the
    boundary when a path is set) without changing the schedule, so a halted
    run resumed from its checkpoint replays the uninterrupted run exactly."""
    fh, fw = model.frame_hw
    if data.frame_hw != (fh, fw):
        raise ConfigError(
            f"model reconstructs {fh}x{fw} frames, dataset has "
            f"{data.frame_hw[0]}x{data.frame_hw[1]}"
        )
    loss_cfg = config.loss_config()
    optimizer = Adam(model.parameters(), lr=config.lr, betas=config.betas,
                     eps=config.eps)
    rng = np.random.default_rng(config.seed)
    start_epoch = 0
    history: list[EpochStats] = []
    if resume is not None:
        if resume.config != config:
            raise ConfigError("resume checkpoint was written with a different setup")
        model = resume.model
        optimizer = Adam(model.parameters(), lr=config.lr, betas=config.betas,
                         eps=config.eps)
        optimizer.load_moments(resume.moments, resume.step)
        rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch
        history = list(resume.history)

    frame_count = len(data)
    steps_per_epoch = math.ceil(frame_count / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    gstep = start_epoch * steps_per_epoch
    end_epoch = config.epochs
    if stop_after is not None:
        if stop_after < 1:
            raise ConfigError(f"stop_after must be positive, got {stop_after}")
        end_epoch = min(config.epochs, start_epoch + stop_after)

    for epoch in range(start_epoch, end_epoch):
        order = rng.permutation(frame_count)
        epoch_losses = []
        for b0 in range(0, frame_count, config.batch_size):
            batch = order[b0:b0 + config.batch_size]
            terms = []
            for i in batch:
                target = Tensor(data.frames[i])
                mask = Tensor(data.masks[i]) if data.masks is not None else None
                pred = model.decode(model.encode(_model_input(data, i)))
                terms.append(loss(pred, target, loss_cfg, mask=mask))
            batch_loss = terms[0]
            for t in terms[1:]:
                batch_loss = ad.add(batch_loss, t)
            if len(terms) > 1:
                batch_loss = ad.mul(batch_loss, 1.0 / len(terms))
            value = batch_loss.item()
            if not math.isfinite(value):
                raise RuntimeError(
                    f"non-finite loss ({value}) at step {gstep} (epoch {epoch})"
                )
            optimizer.zero_grad()
            batch_loss.backward()
            optimizer.step(lr_at(gstep, total_steps, config))
            epoch_losses.append(value)
            gstep += 1

        report = None
        if epoch + 1 == config.epochs or (epoch + 1) % config.eval_every == 0:
            report = evaluate(model, data)
        history.append(EpochStats(
            epoch=epoch,
            lr=lr_at(gstep - 1, total_steps, config),
            loss=float(np.mean(epoch_losses)),
            report=report,
        ))
        boundary = epoch + 1 == end_epoch
        if checkpoint_path is not None and (boundary or (epoch + 1) % checkpoint_every == 0):
            save_checkpoint(checkpoint_path, Checkpoint(
                model=model, config=config, epoch=epoch + 1, step=optimizer.t,
                moments=optimizer.moments(),
                rng_state=rng.bit_generator.state, history=history,
            ))
    return TrainResult(model=model, history=history)


# -- checkpoint serialization --------------------------------------------------

def _history_to_json(history) -> list:
    out = []
    for s in history:
        d = {"epoch": s.epoch, "lr": s.lr, "loss": s.loss, "report": None}
        if s.report is not None:
            d["report"] = asdict(s.report)
        out.append(d)
    return out


def _history_from_json(items) -> list[EpochStats]:
    out = []
    for d in items:
        report = MetricReport(**d["report"]) if d["report"] else None
        out.append(EpochStats(epoch=d["epoch"], lr=d["lr"], loss=d["loss"],
                              report=report))
    return out


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    model = checkpoint.model
    meta = {
        "arch": config_to_dict(model.config),
        "widths": list(model.plan.widths),
        "realized_size": model.plan.realized_size,
        "train": {**asdict(checkpoint.config), "betas": list(checkpoint.config.betas)},
        "epoch": checkpoint.epoch,
        "step": checkpoint.step,
        "rng": checkpoint.rng_state,
        "history": _history_to_json(checkpoint.history),
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    body = bytearray(struct.pack("<I", len(blob)) + blob)
    params = model.parameters()
    body += struct.pack("<I", len(params))
    for p, (m, v) in zip(params, checkpoint.moments):
        body += pack_array(p.data)
        body += pack_array(m)
        body += pack_array(v)
    data = finish_container(KIND_CHECKPOINT, bytes(body))
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    body = open_container(data, KIND_CHECKPOINT)
    try:
        (mlen,) = struct.unpack_from("<I", body, 0)
    except struct.error:
        raise TruncatedContainerError("checkpoint metadata length missing") from None
    if 4 + mlen > len(body):
        raise TruncatedContainerError("checkpoint metadata runs past the end")
    try:
        meta = json.loads(bytes(body[4:4 + mlen]).decode())
        arch = config_from_dict(meta["arch"])
        plan = ChannelPlan(widths=tuple(meta["widths"]),
                           realized_size=int(meta["realized_size"]))
        train_dict = dict(meta["train"])
        train_dict["betas"] = tuple(train_dict["betas"])
        config = TrainConfig(**train_dict)
        history = _history_from_json(meta["history"])
        rng_state = meta["rng"]
        epoch = int(meta["epoch"])
        step = int(meta["step"])
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"checkpoint metadata is incomplete: {exc}") from None

    model = build_model(arch, plan, seed=0)
    params = model.parameters()
    off = 4 + mlen
    try:
        (n_params,) = struct.unpack_from("<I", body, off)
    except struct.error:
        raise TruncatedContainerError("checkpoint parameter count missing") from None
    off += 4
    if n_params != len(params):
        raise ContainerError(
            f"checkpoint stores {n_params} tensors, architecture has {len(params)}"
        )
    moments = []
    for p in params:
        w, off = unpack_array(body, off)
        m, off = unpack_array(body, off)
        v, off = unpack_array(body, off)
        if w.shape != p.shape:
            raise ContainerError(
                f"checkpoint tensor shape {w.shape} does not match {p.shape}"
            )
        p.data = w.copy()
        moments.append((m.copy(), v.copy()))
    return Checkpoint(model=model, config=config, epoch=epoch, step=step,
                      moments=moments, rng_state=rng_state, history=history)
