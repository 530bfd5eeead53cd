"""Model assembly: channel-width planning, encoder/decoder construction,
and per-layer parameter accounting.

The decoder is a stack of upsample blocks whose channel widths decay
geometrically from a first width chosen so the realized parameter count
lands as close to (and never above) a target budget as the integer grid
allows. The encoder mirrors the decoder's strides in reverse, one strided
convolution plus one ConvNeXt block per stage, and projects down to the
embedding channel count at the end.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import Block, Conv2d, ConvNeXtBlock, OutputHead, UpsampleBlock
from .errors import ConfigError, PlanningError

# Fixed comparison layout used when the multilayer toggle is off: the
# classic five-stage hybrid-NeRV decoder shape. Its stride product (160)
# differs from the default seven-stage product (320), so the embedding's
# spatial size is rescaled to keep the frame size unchanged.
FIVE_LAYER_STRIDES = (5, 4, 2, 2, 2)
FIVE_LAYER_KERNELS = (1, 3, 5, 5, 5)

STEM_KERNEL = 3


@dataclass(frozen=True)
class ArchConfig:
    strides: tuple[int, ...] = (5, 2, 2, 2, 2, 2, 2)
    kernels: tuple[int, ...] = (1, 5, 5, 3, 3, 3, 3)
    r: float = 1.2
    embedding: tuple[int, int, int] = (16, 2, 4)
    target_size: int = 1_480_000
    min_width: int = 12
    grn: bool = True
    multilayer: bool = True
    header_layer: bool = True

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        object.__setattr__(self, "embedding", tuple(int(e) for e in self.embedding))
        if not self.strides:
            raise ConfigError("strides: need at least one decoder stage")
        if len(self.strides) != len(self.kernels):
            raise ConfigError(
                f"strides ({len(self.strides)}) and kernels ({len(self.kernels)}) "
                "must have the same length"
            )
        if any(s < 1 for s in self.strides):
            raise ConfigError(f"strides must be positive: {self.strides}")
        if any(k < 1 or k % 2 == 0 for k in self.kernels):
            raise ConfigError(f"kernels must be odd and positive: {self.kernels}")
        if not self.r > 1:
            raise ConfigError(f"attenuation factor r must exceed 1, got {self.r}")
        if self.min_width < 3:
            raise ConfigError(f"min_width must be at least 3, got {self.min_width}")
        if len(self.embedding) != 3 or any(e < 1 for e in self.embedding):
            raise ConfigError(f"embedding shape must be 3 positive ints: {self.embedding}")
        if self.target_size < 1:
            raise ConfigError(f"target_size must be positive, got {self.target_size}")

    @property
    def scale(self) -> int:
        return math.prod(self.strides)

    @property
    def frame_hw(self) -> tuple[int, int]:
        _, h, w = self.embedding
        return h * self.scale, w * self.scale

    def layout(self) -> tuple[tuple[int, ...], tuple[int, ...], tuple[int, int, int]]:
        """Resolve the multilayer toggle into concrete strides/kernels/embedding."""
        if self.multilayer:
            return self.strides, self.kernels, self.embedding
        fh, fw = self.frame_hw
        scale5 = math.prod(FIVE_LAYER_STRIDES)
        if fh % scale5 or fw % scale5:
            raise ConfigError(
                f"multilayer=false needs frame dims divisible by {scale5}, "
                f"got {fh}x{fw}"
            )
        emb = (self.embedding[0], fh // scale5, fw // scale5)
        return FIVE_LAYER_STRIDES, FIVE_LAYER_KERNELS, emb


@dataclass(frozen=True)
class ChannelPlan:
    widths: tuple[int, ...]
    realized_size: int

    def __post_init__(self):
        if any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be positive: {self.widths}")
        for a, b in zip(self.widths[1:], self.widths[2:]):
            if b > a:
                raise ConfigError(f"widths must be non-increasing after layer 0: {self.widths}")


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def geometric_widths(c0: int, r: float, layers: int, min_width: int) -> list[int]:
    """Width ladder c0, c0/r, c0/r^2, ... rounded half-up and floored."""
    return [c0] + [max(_round_half_up(c0 / r**i), min_width) for i in range(1, layers)]


def _decoder_size(widths, strides, kernels, emb_ch: int, stem: bool) -> int:
    total = 0
    cin = emb_ch
    if stem:
        total += emb_ch * widths[0] * STEM_KERNEL**2 + widths[0]
        cin = widths[0]
    for w, s, k in zip(widths, strides, kernels):
        cout = w * s * s
        total += cin * cout * k * k + cout
        cin = w
    return total + widths[-1] * 3 + 3  # rgb head


def plan_channels(config: ArchConfig) -> ChannelPlan:
    """Choose decoder widths for the parameter budget.

    The first width is the largest integer whose geometric ladder fits under
    target_size; remaining slack is then consumed by raising later widths one
    step at a time (cheapest increment first, never breaking the
    non-increasing order), which packs the budget to well within 2% for
    targets of 100k and up.
    """
    strides, kernels, emb = config.layout()
    layers = len(strides)
    stem = not config.header_layer

    def size_of(widths) -> int:
        return _decoder_size(widths, strides, kernels, emb[0], stem)

    def base(c0: int) -> list[int]:
        return geometric_widths(c0, config.r, layers, config.min_width)

    floor_size = size_of(base(config.min_width))
    if floor_size > config.target_size:
        raise PlanningError(
            f"target_size {config.target_size} is below the minimum achievable "
            f"size {floor_size} at min_width {config.min_width}"
        )
    lo = config.min_width
    hi = lo
    while size_of(base(hi * 2)) <= config.target_size:
        hi *= 2
    hi *= 2
    while lo + 1 < hi:
        mid = (lo + hi) // 2
        if size_of(base(mid)) <= config.target_size:
            lo = mid
        else:
            hi = mid
    widths = base(lo)

    while True:
        best = None
        for i in range(1, layers):
            if widths[i] + 1 > widths[i - 1]:
                continue
            trial = list(widths)
            trial[i] += 1
            grown = size_of(trial)
            if grown <= config.target_size and (best is None or grown < best[1]):
                best = (i, grown)
        if best is None:
            break
        widths[best[0]] += 1
    return ChannelPlan(widths=tuple(widths), realized_size=size_of(widths))


class Encoder(Block):
    """Mirror of the decoder: per stage a stride-s conv (kernel == stride)
    then a ConvNeXt block, finishing with a 1x1 projection to the embedding
    channel count."""

    def __init__(self, strides, widths, emb_ch: int, rng, use_grn: bool):
        super().__init__()
        self.strides = tuple(reversed(strides))
        stage_widths = tuple(reversed(widths))
        self.stages = []
        cin = 3
        for s, w in zip(self.strides, stage_widths):
            down = self._child(Conv2d(cin, w, s, rng, stride=s))
            mix = self._child(ConvNeXtBlock(w, rng, use_grn=use_grn))
            self.stages.append((down, mix))
            cin = w
        self.proj = self._child(Conv2d(cin, emb_ch, 1, rng))

    def __call__(self, frame: Tensor) -> Tensor:
        y = frame
        for down, mix in self.stages:
            y = mix(down(y))
        return self.proj(y)


class Decoder(Block):
    """Upsample-block stack with an optional pre-stage ("stem") used by the
    five-layer comparison shape, and a sigmoid RGB head."""

    def __init__(self, strides, kernels, widths, emb_ch: int, rng, stem: bool):
        super().__init__()
        cin = emb_ch
        self.stem = None
        if stem:
            self.stem = self._child(
                Conv2d(emb_ch, widths[0], STEM_KERNEL, rng, padding=STEM_KERNEL // 2)
            )
            cin = widths[0]
        self.blocks = []
        for w, s, k in zip(widths, strides, kernels):
            self.blocks.append(self._child(UpsampleBlock(cin, w, k, s, rng)))
            cin = w
        self.head = self._child(OutputHead(cin, rng))

    def __call__(self, embedding: Tensor) -> Tensor:
        y = embedding
        if self.stem is not None:
            y = self.stem(y)
        for block in self.blocks:
            y = block(y)
        return self.head(y)


@dataclass
class Model:
    config: ArchConfig
    plan: ChannelPlan
    encoder: Encoder | None
    decoder: Decoder
    # layout() output frozen at build time so a loaded container does not
    # depend on re-deriving it
    strides: tuple[int, ...] = field(default=())
    kernels: tuple[int, ...] = field(default=())
    embedding: tuple[int, int, int] = field(default=(0, 0, 0))

    def parameters(self) -> list[Tensor]:
        params = [] if self.encoder is None else self.encoder.parameters()
        return params + self.decoder.parameters()

    @property
    def scale(self) -> int:
        return math.prod(self.strides)

    @property
    def frame_hw(self) -> tuple[int, int]:
        _, h, w = self.embedding
        return h * self.scale, w * self.scale

    def encode(self, frame: Tensor) -> Tensor:
        if self.encoder is None:
            raise ConfigError("model has no encoder (loaded from a decode-only container)")
        fh, fw = self.frame_hw
        if frame.shape != (3, fh, fw):
            raise ConfigError(f"expected frame (3,{fh},{fw}), got {frame.shape}")
        return self.encoder(frame)

    def decode(self, embedding: Tensor) -> Tensor:
        if embedding.ndim != 3 or embedding.shape[0] != self.embedding[0]:
            raise ConfigError(
                f"expected embedding ({self.embedding[0]},h,w), got {embedding.shape}"
            )
        return self.decoder(embedding)


def build_model(config: ArchConfig, plan: ChannelPlan, seed: int) -> Model:
    strides, kernels, emb = config.layout()
    if len(plan.widths) != len(strides):
        raise ConfigError(
            f"plan has {len(plan.widths)} widths for {len(strides)} decoder stages"
        )
    expected = _decoder_size(plan.widths, strides, kernels, emb[0], not config.header_layer)
    if expected != plan.realized_size:
        raise ConfigError(
            f"plan realized_size {plan.realized_size} does not match its widths "
            f"(enumerates to {expected})"
        )
    rng = np.random.default_rng(seed)
    encoder = Encoder(strides, plan.widths, emb[0], rng, use_grn=config.grn)
    decoder = Decoder(strides, kernels, plan.widths, emb[0], rng,
                      stem=not config.header_layer)
    return Model(config=config, plan=plan, encoder=encoder, decoder=decoder,
                 strides=strides, kernels=kernels, embedding=emb)


# -- accounting ---------------------------------------------------------------

def analyze_params(model: Model) -> list[tuple[str, int, float]]:
    """Per-layer parameter table: decoder stages (plus stem when present),
    then encoder, then the RGB head. Fractions sum to 1."""
    rows: list[tuple[str, int]] = []
    if model.decoder.stem is not None:
        rows.append(("stem", model.decoder.stem.param_count()))
    for i, block in enumerate(model.decoder.blocks):
        rows.append((f"dec{i}", block.param_count()))
    encoder_count = 0 if model.encoder is None else model.encoder.param_count()
    rows.append(("encoder", encoder_count))
    rows.append(("head", model.decoder.head.param_count()))
    total = sum(n for _, n in rows)
    return [(label, n, n / total) for label, n in rows]


def decoder_layer_counts(model: Model) -> list[int]:
    """Parameter count of each upsample stage (the stem and head excluded)."""
    return [block.param_count() for block in model.decoder.blocks]


def coefficient_of_variation(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    return float(counts.std() / counts.mean())


def params_csv(rows: list[tuple[str, int, float]]) -> str:
    buf = io.StringIO()
    buf.write("layer,params,fraction\n")
    for label, n, frac in rows:
        buf.write(f"{label},{n},{frac:.9f}\n")
    return buf.getvalue()


def with_target(config: ArchConfig, target_size: int) -> ArchConfig:
    return replace(config, target_size=target_size)
