"""Reconstruction losses and evaluation metrics.

The pixel losses (L1 / L2 / smooth-L1), the structural-similarity family,
and weighted pairs of any two of them. Everything returned by `loss` is a
scalar Tensor wired into the autodiff graph; `psnr` and `MetricReport` are
plain-number evaluation utilities.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
# canonical five-scale exponents; truncated and renormalized for fewer scales
MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
PSNR_CAP_DB = 100.0
SMOOTH_L1_BETA = 1.0

PIXEL_KINDS = ("l1", "l2", "smooth_l1")
SIMILARITY_KINDS = ("ssim", "ms_ssim")
KINDS = PIXEL_KINDS + SIMILARITY_KINDS


@dataclass(frozen=True)
class LossConfig:
    kind: str = "pair"
    alpha: float = 0.7
    pair: tuple[str, str] = ("l1", "ms_ssim")

    def __post_init__(self):
        if self.kind != "pair":
            if self.kind not in KINDS:
                raise ConfigError(f"unknown loss kind {self.kind!r}; choose from {KINDS + ('pair',)}")
            return
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0,1], got {self.alpha}")
        first, second = self.pair
        if first not in KINDS or second not in KINDS:
            raise ConfigError(f"pair terms must come from {KINDS}, got {self.pair}")
        if first == second:
            raise ConfigError(f"pair terms must be distinct, got {self.pair}")


_ALIASES = {
    "l1": "l1", "l2": "l2", "sml1": "smooth_l1", "smoothl1": "smooth_l1",
    "smooth_l1": "smooth_l1", "s": "ssim", "ssim": "ssim",
    "ms": "ms_ssim", "msssim": "ms_ssim", "ms_ssim": "ms_ssim", "ms-ssim": "ms_ssim",
}


def parse_loss(text: str) -> LossConfig:
    """Parse compact loss grammar: 'L1', 'SML1', or '0.7*L1+0.3*MS'."""
    spec = text.strip().lower().replace(" ", "")
    if "+" in spec:
        parts = spec.split("+")
        if len(parts) != 2:
            raise ConfigError(f"weighted loss needs exactly two terms: {text!r}")
        weights, kinds = [], []
        for part in parts:
            if "*" not in part:
                raise ConfigError(f"weighted term must look like 0.7*l1: {part!r}")
            w, name = part.split("*", 1)
            try:
                weights.append(float(w))
            except ValueError:
                raise ConfigError(f"bad weight {w!r} in {text!r}") from None
            if name not in _ALIASES:
                raise ConfigError(f"unknown loss term {name!r} in {text!r}")
            kinds.append(_ALIASES[name])
        if not math.isclose(weights[0] + weights[1], 1.0, abs_tol=1e-9):
            raise ConfigError(f"weights must sum to 1: {text!r}")
        return LossConfig(kind="pair", alpha=weights[0], pair=(kinds[0], kinds[1]))
    if spec not in _ALIASES:
        raise ConfigError(f"unknown loss {text!r}")
    return LossConfig(kind=_ALIASES[spec])


def format_loss(config: LossConfig) -> str:
    names = {"l1": "l1", "l2": "l2", "smooth_l1": "sml1", "ssim": "s", "ms_ssim": "ms"}
    if config.kind != "pair":
        return names[config.kind]
    return f"{config.alpha:g}*{names[config.pair[0]]}+{1 - config.alpha:g}*{names[config.pair[1]]}"


# -- structural similarity ----------------------------------------------------

def _gaussian_window(window: int, sigma: float, channels: int, dtype) -> Tensor:
    half = (window - 1) / 2.0
    coords = np.arange(window) - half
    g = np.exp(-(coords**2) / (2.0 * sigma * sigma))
    kern2d = np.outer(g, g)
    kern2d /= kern2d.sum()
    w = np.broadcast_to(kern2d, (channels, 1, window, window)).astype(dtype)
    return Tensor(w.copy())


def max_scales(h: int, w: int, window: int = SSIM_WINDOW) -> int:
    """Largest usable scale count: each halving must still fit the window."""
    side = min(h, w)
    if side < window:
        return 0
    return min(int(math.log2(side / window)) + 1, len(MS_WEIGHTS))


def _ssim_terms(x: Tensor, y: Tensor, window: int) -> tuple[Tensor, Tensor]:
    """Mean SSIM and mean contrast-structure over valid window positions."""
    c = x.shape[0]
    kern = _gaussian_window(window, SSIM_SIGMA, c, x.dtype)

    def blur(t: Tensor) -> Tensor:
        return ad.conv2d(t, kern, stride=1, padding=0, groups=c)

    c1 = SSIM_K1 * SSIM_K1
    c2 = SSIM_K2 * SSIM_K2
    mu_x, mu_y = blur(x), blur(y)
    mu_xx = ad.mul(mu_x, mu_x)
    mu_yy = ad.mul(mu_y, mu_y)
    mu_xy = ad.mul(mu_x, mu_y)
    sigma_x = ad.sub(blur(ad.mul(x, x)), mu_xx)
    sigma_y = ad.sub(blur(ad.mul(y, y)), mu_yy)
    sigma_xy = ad.sub(blur(ad.mul(x, y)), mu_xy)
    cs_map = ad.div(ad.add(ad.mul(2.0, sigma_xy), c2),
                    ad.add(ad.add(sigma_x, sigma_y), c2))
    lum_map = ad.div(ad.add(ad.mul(2.0, mu_xy), c1),
                     ad.add(ad.add(mu_xx, mu_yy), c1))
    ssim_map = ad.mul(lum_map, cs_map)
    return ad.tmean(ssim_map), ad.tmean(cs_map)


def ssim(x: Tensor, y: Tensor, window: int = SSIM_WINDOW) -> Tensor:
    """Single-scale structural similarity (differentiable scalar)."""
    x, y = _check_pair(x, y)
    if min(x.shape[1], x.shape[2]) < window:
        raise ConfigError(
            f"image {x.shape[1]}x{x.shape[2]} too small for an {window}-tap window"
        )
    value, _ = _ssim_terms(x, y, window)
    return value


def ms_ssim(x: Tensor, y: Tensor, scales: int | None = None,
            window: int = SSIM_WINDOW) -> Tensor:
    """Multi-scale structural similarity (differentiable scalar).

    Contrast-structure at every scale, luminance folded in at the coarsest,
    2x2 mean-pool between scales, canonical exponents renormalized when
    fewer than five scales are used. scales=None picks the deepest feasible.
    """
    x, y = _check_pair(x, y)
    feasible = max_scales(x.shape[1], x.shape[2], window)
    if feasible < 1:
        raise ConfigError(
            f"image {x.shape[1]}x{x.shape[2]} too small for an {window}-tap window"
        )
    if scales is None:
        scales = feasible
    elif scales < 1 or scales > len(MS_WEIGHTS):
        raise ConfigError(f"scales must lie in [1,{len(MS_WEIGHTS)}], got {scales}")
    elif scales > feasible:
        raise ConfigError(
            f"image {x.shape[1]}x{x.shape[2]} supports at most {feasible} scales, "
            f"got {scales}"
        )
    weights = np.asarray(MS_WEIGHTS[:scales])
    weights = weights / weights.sum()

    value: Tensor | None = None
    for level in range(scales):
        ssim_val, cs_val = _ssim_terms(x, y, window)
        term = ssim_val if level == scales - 1 else cs_val
        # clamp at zero before the fractional power; the epsilon keeps the
        # power's backward finite when a term lands exactly on the clamp
        safe = ad.add(ad.relu(term), 1e-12)
        factor = safe if weights[level] == 1.0 else ad.power(safe, float(weights[level]))
        value = factor if value is None else ad.mul(value, factor)
        if level != scales - 1:
            x = ad.avg_pool2d(x, 2)
            y = ad.avg_pool2d(y, 2)
    return value


def _check_pair(x, y) -> tuple[Tensor, Tensor]:
    x = x if isinstance(x, Tensor) else Tensor(x)
    y = y if isinstance(y, Tensor) else Tensor(y)
    if x.shape != y.shape:
        raise ConfigError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim != 3:
        raise ConfigError(f"expected (C,H,W) images, got {x.shape}")
    return x, y


# -- pixel losses -------------------------------------------------------------

def _masked_mean(elem: Tensor, mask: Tensor | None) -> Tensor:
    if mask is None:
        return ad.tmean(elem)
    count = float(mask.data.sum())
    if count <= 0:
        raise ConfigError("loss mask selects no pixels")
    return ad.mul(ad.tsum(ad.mul(elem, mask)), 1.0 / count)


def _term(kind: str, pred: Tensor, target: Tensor, mask: Tensor | None,
          window: int, scales: int | None) -> Tensor:
    if kind in SIMILARITY_KINDS:
        if mask is not None:
            pred = ad.mul(pred, mask)
            target = ad.mul(target, mask)
        sim = ssim(pred, target, window) if kind == "ssim" \
            else ms_ssim(pred, target, scales, window)
        return ad.sub(1.0, sim)
    diff = ad.sub(pred, target)
    if kind == "l1":
        return _masked_mean(ad.absolute(diff), mask)
    if kind == "l2":
        return _masked_mean(ad.mul(diff, diff), mask)
    # smooth L1: quadratic inside the beta tube, linear outside; the branch
    # indicator is data-dependent but constant w.r.t. the graph, which is the
    # correct piecewise derivative
    beta = SMOOTH_L1_BETA
    absd = ad.absolute(diff)
    inside = Tensor((np.abs(diff.data) < beta).astype(diff.dtype))
    quad = ad.mul(ad.mul(diff, diff), 0.5 / beta)
    lin = ad.sub(absd, 0.5 * beta)
    elem = ad.add(ad.mul(inside, quad), ad.mul(ad.sub(1.0, inside), lin))
    return _masked_mean(elem, mask)


def loss(pred: Tensor, target: Tensor, config: LossConfig,
         mask: Tensor | None = None, window: int = SSIM_WINDOW,
         scales: int | None = None) -> Tensor:
    """Scalar training loss; gradient flows into `pred` only.

    `mask` (same shape, {0,1}) restricts pixel losses to mask==1 pixels and
    zeroes both images elsewhere for the similarity terms, so masked-out
    pixels contribute no gradient at all.
    """
    pred, target = _check_pair(pred, target)
    target = target.detach()
    if mask is not None:
        mask = (mask if isinstance(mask, Tensor) else Tensor(mask)).detach()
        if mask.shape != pred.shape:
            raise ConfigError(f"mask shape {mask.shape} must match {pred.shape}")
    if config.kind != "pair":
        return _term(config.kind, pred, target, mask, window, scales)
    first, second = config.pair
    alpha = config.alpha
    # exact boundary algebra: a zero-weighted term is skipped, not multiplied
    if alpha == 1.0:
        return _term(first, pred, target, mask, window, scales)
    if alpha == 0.0:
        return _term(second, pred, target, mask, window, scales)
    return ad.add(
        ad.mul(alpha, _term(first, pred, target, mask, window, scales)),
        ad.mul(1.0 - alpha, _term(second, pred, target, mask, window, scales)),
    )


# -- metrics ------------------------------------------------------------------

def mse(pred, target, mask=None) -> float:
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if p.shape != t.shape:
        raise ConfigError(f"shape mismatch: {p.shape} vs {t.shape}")
    d = (p.astype(np.float64) - t.astype(np.float64)) ** 2
    if mask is None:
        return float(d.mean())
    m = (mask.data if isinstance(mask, Tensor) else np.asarray(mask)).astype(bool)
    if not m.any():
        raise ConfigError("metric mask selects no pixels")
    return float(d[m].mean())


def psnr(pred, target, mask=None) -> float:
    """Peak signal-to-noise ratio in dB on unit-range images; 100 dB cap
    when the error vanishes. `mask` restricts the mean to selected pixels."""
    err = mse(pred, target, mask)
    if err == 0.0:
        return PSNR_CAP_DB
    return -10.0 * math.log10(err)


@dataclass
class MetricReport:
    psnr: float
    ms_ssim: float
    frame_psnr: list[float] = field(default_factory=list)
    frame_ms_ssim: list[float] = field(default_factory=list)


def metric_report(preds, targets, scales: int | None = None) -> MetricReport:
    """Per-frame PSNR / MS-SSIM plus their arithmetic means."""
    if len(preds) != len(targets) or not preds:
        raise ConfigError("need equal, nonempty frame lists")
    psnrs, sims = [], []
    with ad.no_grad():
        for p, t in zip(preds, targets):
            psnrs.append(psnr(p, t))
            raw = float(ms_ssim(p, t, scales=scales).item())
            sims.append(min(max(raw, 0.0), 1.0))
    return MetricReport(
        psnr=float(np.mean(psnrs)),
        ms_ssim=float(np.mean(sims)),
        frame_psnr=psnrs,
        frame_ms_ssim=sims,
    )


def report_csv(report: MetricReport) -> str:
    buf = io.StringIO()
    buf.write("frame,psnr,ms_ssim\n")
    for i, (p, s) in enumerate(zip(report.frame_psnr, report.frame_ms_ssim)):
        buf.write(f"{i},{p:.6f},{s:.8f}\n")
    buf.write(f"mean,{report.psnr:.6f},{report.ms_ssim:.8f}\n")
    return buf.getvalue()
