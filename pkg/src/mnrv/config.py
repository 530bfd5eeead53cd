"""Flat key=value run configuration.

One schema covers architecture, training, and task settings; a config file
provides any subset, command-line --set pairs override it, and everything
else falls back to the defaults below. Unknown keys are rejected by name so
typos surface as config errors, not silently ignored settings.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .arch import ArchConfig
from .errors import ConfigError
from .training import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    # architecture
    strides: tuple = (5, 2, 2, 2, 2, 2, 2)
    kernels: tuple = (1, 5, 5, 3, 3, 3, 3)
    r: float = 1.2
    embedding: tuple = (16, 2, 4)
    target_size: int = 1_480_000
    min_width: int = 12
    grn: bool = True
    multilayer: bool = True
    header_layer: bool = True
    # training
    epochs: int = 100
    batch_size: int = 2
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    alpha: float = 0.7
    seed: int = 0
    warmup_frac: float = 0.05
    schedule: str = "cosine"
    loss: str = ""
    eval_every: int = 1
    checkpoint_every: int = 25
    # data and task settings
    input: str = ""
    container: str = ""
    output: str = "out"
    fixture: str = ""
    bits: int = 8
    bit_widths: tuple = (4, 6, 8, 12, 16)
    mask_kind: str = "center"
    mask_fraction: float = 0.1
    mask_seed: int = 0
    interp_weight: float = 0.5
    grid: str = "structure"

    def arch(self) -> ArchConfig:
        return ArchConfig(
            strides=self.strides, kernels=self.kernels, r=self.r,
            embedding=self.embedding, target_size=self.target_size,
            min_width=self.min_width, grn=self.grn,
            multilayer=self.multilayer, header_layer=self.header_layer,
        )

    def train(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            betas=(self.beta1, self.beta2), eps=self.eps, alpha=self.alpha,
            seed=self.seed, warmup_frac=self.warmup_frac,
            schedule=self.schedule, loss=self.loss,
            eval_every=self.eval_every,
        )


_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def _parse_value(key: str, text: str):
    kind = type(getattr(_DEFAULTS, key))
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError("not a boolean")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            if not text:
                raise ValueError("empty list")
            return tuple(int(v) for v in text.split(","))
        return text
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {text!r} as {kind.__name__}") from None


def parse_assignments(pairs) -> dict:
    """key=value strings (command line --set or config lines) -> typed dict."""
    out = {}
    for raw in pairs:
        if "=" not in raw:
            raise ConfigError(f"expected key=value, got {raw!r}")
        key, _, text = raw.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _parse_value(key, text)
    return out


def read_config_file(path) -> dict:
    lines = []
    with open(path) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key=value, got {line!r}")
            lines.append(line)
    return parse_assignments(lines)


def resolve(file_values: dict | None = None, overrides: dict | None = None
            ) -> RunConfig:
    merged = {}
    merged.update(file_values or {})
    merged.update(overrides or {})
    return replace(_DEFAULTS, **merged)


def manifest_text(config: RunConfig, version: str, command: str) -> str:
    lines = [f"# mnrv {version}", f"# command: {command}"]
    for name in sorted(_FIELDS):
        value = getattr(config, name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{name}={value}")
    return "\n".join(lines) + "\n"
