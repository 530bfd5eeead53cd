"""Command-line surface: reproducible experiments over the library.

Every command resolves a RunConfig (defaults < config file < --set pairs <
convenience flags), writes a manifest next to its outputs, and emits both
delimited reports and rendered figures. Exit codes: 0 success, 2 for a
configuration problem (the message names the offending key), 1 for runtime
failures.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .arch import analyze_params, build_model, params_csv, plan_channels
from .autodiff import Tensor
from .codec import load_container, rate_csv, rate_report
from .config import RunConfig, manifest_text, parse_assignments, read_config_file, resolve
from .errors import ConfigError, ContainerError, FrameIOError
from .frames import load_frames, save_frames_dir, tiny_fixture
from .losses import metric_report, report_csv
from .plots import (
    save_bars_figure,
    save_metrics_figure,
    save_params_figure,
    save_rate_figure,
    save_training_figure,
)
from .tasks import (
    InpaintSpec,
    build_masks,
    compress_pipeline,
    eval_inpainting,
    interpolate_frame,
    interpolation_pipeline,
)
from .training import VideoDataset, history_csv, train

# Ablation grids at fixture scale (stride product 20, so the 40x80 fixture
# maps to the standard 16x2x4 embedding). The structure grid varies stage
# count and kernel ladders; the toggle grid walks the component variants
# from no-extras up to the full model, using the coarse two-stage layout to
# stand in for the fixed five-stage plan when the multilayer toggle is off.
STRUCTURE_GRID = [
    ("s5.4-k1.3", (5, 4), (1, 3)),
    ("s5.4-k1.5", (5, 4), (1, 5)),
    ("s5.4-k1.7", (5, 4), (1, 7)),
    ("s5.4-k3.3", (5, 4), (3, 3)),
    ("s5.2.2-k1.3.5", (5, 2, 2), (1, 3, 5)),
    ("s5.2.2-k1.3.3", (5, 2, 2), (1, 3, 3)),
    ("s5.2.2-k1.5.5", (5, 2, 2), (1, 5, 5)),
    ("s5.2.2-k1.5.3", (5, 2, 2), (1, 5, 3)),
    ("s5.2.2-k1.7.5", (5, 2, 2), (1, 7, 5)),
    ("s5.2.2-k1.7.3", (5, 2, 2), (1, 7, 3)),
    ("s5.2.2-k3.3.3", (5, 2, 2), (3, 3, 3)),
]
TOGGLE_GRID = [
    # label, grn, multilayer, header_layer
    ("plain", False, False, False),
    ("grn", True, False, False),
    ("grn+ml", True, True, False),
    ("grn+ml+hl", True, True, True),
]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mnrv",
        description="video-as-network compression: fit, quantize, decode",
    )
    parser.add_argument("--version", action="version", version=f"mnrv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("plan", "print and export the channel-width plan for a budget"),
        ("train", "fit a model to frames, writing metrics and a checkpoint"),
        ("compress", "train, quantize, and write a decodable container"),
        ("decode", "reconstruct frames from a container"),
        ("eval", "score a container against reference frames"),
        ("interpolate", "train on every other frame, synthesize the rest"),
        ("inpaint", "train through hole masks and score the restoration"),
        ("ablate", "run a declared structure or toggle grid on the data"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", nargs="+", default=[],
                       metavar="KEY=VALUE",
                       help="override config keys (repeatable, space separated)")
        p.add_argument("--fixture", help="use a built-in clip (tiny)")
        p.add_argument("--input", help="frame source: raw file or image directory")
        p.add_argument("--output", help="output directory")
        p.add_argument("--container", help="compressed container path")
        p.add_argument("--bits", type=int, help="quantizer bit width")
        p.add_argument("--epochs", type=int, help="training epochs")
        p.add_argument("--seed", type=int, help="run seed")
    return parser


def _resolve_config(args) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else {}
    pairs = [item for group in args.set for item in group]
    overrides = parse_assignments(pairs)
    for key in ("fixture", "input", "output", "container", "bits", "epochs", "seed"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    return resolve(file_values, overrides)


def _load_data(config: RunConfig) -> VideoDataset:
    if config.fixture:
        if config.fixture != "tiny":
            raise ConfigError(f"unknown fixture {config.fixture!r}")
        return tiny_fixture()
    if config.input:
        return load_frames(config.input)
    raise ConfigError("no frames: set the input key or pass --fixture tiny")


def _out_dir(config: RunConfig, command: str) -> Path:
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.txt").write_text(
        manifest_text(config, __version__, command)
    )
    return out


def _cell_arch(config: RunConfig, strides, kernels, hw, *, grn=True,
               header_layer=True):
    scale = int(np.prod(strides))
    h, w = hw
    if h % scale or w % scale:
        raise ConfigError(
            f"grid strides {strides} (x{scale}) do not divide {h}x{w} frames"
        )
    return replace(
        config.arch(), strides=tuple(strides), kernels=tuple(kernels),
        embedding=(config.embedding[0], h // scale, w // scale),
        grn=grn, multilayer=True, header_layer=header_layer,
    )


def cmd_plan(config: RunConfig) -> int:
    out = _out_dir(config, "plan")
    arch = config.arch()
    plan = plan_channels(arch)
    model = build_model(arch, plan, seed=config.seed)
    rows = analyze_params(model)
    (out / "plan.csv").write_text(params_csv(rows))
    save_params_figure(rows, out / "plan.png")
    print(f"widths: {','.join(str(w) for w in plan.widths)}")
    print(f"realized: {plan.realized_size} of target {arch.target_size}")
    for label, count, fraction in rows:
        print(f"  {label:>8}  {count:>10}  {fraction:7.4f}")
    return 0


def cmd_train(config: RunConfig) -> int:
    out = _out_dir(config, "train")
    data = _load_data(config)
    arch = config.arch()
    model = build_model(arch, plan_channels(arch), seed=config.seed)
    result = train(model, data, config.train(),
                   checkpoint_path=out / "model.ckpt",
                   checkpoint_every=config.checkpoint_every)
    (out / "history.csv").write_text(history_csv(result.history))
    save_training_figure(result.history, out / "training.png")
    final = result.history[-1]
    print(f"final: loss {final.loss:.6f}  psnr {final.psnr:.2f} dB  "
          f"ms-ssim {final.ms_ssim:.4f}")
    return 0


def cmd_compress(config: RunConfig) -> int:
    out = _out_dir(config, "compress")
    data = _load_data(config)
    result = compress_pipeline(data.frames, config.arch(), config.train(),
                               bits=config.bits, sweep=config.bit_widths)
    (out / "video.mnrv").write_bytes(result.container)
    (out / "history.csv").write_text(history_csv(result.training.history))
    reports = result.sweep if result.sweep else [result.report]
    (out / "rate.csv").write_text(rate_csv(reports))
    save_rate_figure(reports, out / "rate.png")
    save_frames_dir(out / "decoded", result.decoded)
    print(f"container: {len(result.container)} bytes "
          f"({result.report.bpp:.4f} bpp)  psnr {result.report.psnr:.2f} dB")
    return 0


def cmd_decode(config: RunConfig) -> int:
    out = _out_dir(config, "decode")
    source = config.container or config.input
    if not source:
        raise ConfigError("no container: set the container key")
    with open(source, "rb") as fh:
        model, embeddings = load_container(fh.read())
    with ad.no_grad():
        frames = [model.decode(Tensor(e)).data for e in embeddings]
    save_frames_dir(out / "frames", frames)
    print(f"decoded {len(frames)} frames to {out / 'frames'}")
    return 0


def cmd_eval(config: RunConfig) -> int:
    out = _out_dir(config, "eval")
    if not config.container:
        raise ConfigError("no container: set the container key")
    data = _load_data(config)
    with open(config.container, "rb") as fh:
        blob = fh.read()
    model, embeddings = load_container(blob)
    if len(embeddings) != len(data):
        raise ConfigError(
            f"container has {len(embeddings)} frames, reference has {len(data)}"
        )
    with ad.no_grad():
        preds = [model.decode(Tensor(e)) for e in embeddings]
        report = metric_report(preds, [Tensor(f) for f in data.frames])
    rate = rate_report(blob, [Tensor(f) for f in data.frames])
    (out / "metrics.csv").write_text(report_csv(report))
    save_metrics_figure(report, out / "metrics.png")
    print(f"psnr {report.psnr:.2f} dB  ms-ssim {report.ms_ssim:.4f}  "
          f"{rate.bpp:.4f} bpp")
    return 0


def cmd_interpolate(config: RunConfig) -> int:
    out = _out_dir(config, "interpolate")
    data = _load_data(config)
    arch = _fitting_arch(config, data)
    result = interpolation_pipeline(data.frames, arch, config.train())
    lines = ["frame,interp_psnr,interp_ms_ssim,repeat_psnr,repeat_ms_ssim"]
    for i, h in enumerate(result.split.held):
        lines.append(
            f"{h},{result.interpolated.frame_psnr[i]:.6f},"
            f"{result.interpolated.frame_ms_ssim[i]:.8f},"
            f"{result.baseline.frame_psnr[i]:.6f},"
            f"{result.baseline.frame_ms_ssim[i]:.8f}"
        )
    lines.append(
        f"mean,{result.interpolated.psnr:.6f},{result.interpolated.ms_ssim:.8f},"
        f"{result.baseline.psnr:.6f},{result.baseline.ms_ssim:.8f}"
    )
    (out / "interpolation.csv").write_text("\n".join(lines) + "\n")
    save_bars_figure(
        ["interpolated", "repeat-left"],
        [result.interpolated.psnr, result.baseline.psnr],
        out / "interpolation.png", "PSNR (dB)",
    )
    model = result.training.model
    with ad.no_grad():
        synth = []
        for _, (l, r) in zip(result.split.held, result.split.neighbors):
            el = model.encode(Tensor(data.frames[l]))
            er = model.encode(Tensor(data.frames[r]))
            synth.append(
                interpolate_frame(model, el, er, config.interp_weight).data
            )
    save_frames_dir(out / "interpolated", synth)
    print(f"interpolated {result.interpolated.psnr:.2f} dB vs "
          f"repeat {result.baseline.psnr:.2f} dB over {len(result.split.held)} frames")
    return 0


def cmd_inpaint(config: RunConfig) -> int:
    out = _out_dir(config, "inpaint")
    data = _load_data(config)
    arch = _fitting_arch(config, data)
    spec = InpaintSpec(kind=config.mask_kind, fraction=config.mask_fraction,
                       seed=config.mask_seed)
    result = eval_inpainting(data.frames, spec, arch, config.train())
    lines = [
        "region,psnr,ms_ssim",
        f"full,{result.full.psnr:.6f},{result.full.ms_ssim:.8f}",
        f"restored,{result.restored_psnr:.6f},{result.restored_ms_ssim:.8f}",
        f"kept,{result.kept_psnr:.6f},",
    ]
    (out / "inpaint.csv").write_text("\n".join(lines) + "\n")
    save_bars_figure(
        ["full", "restored", "kept"],
        [result.full.psnr, result.restored_psnr, result.kept_psnr],
        out / "inpaint.png", "PSNR (dB)",
    )
    model = result.training.model
    masks, _ = build_masks(spec, len(data), *data.frame_hw)
    with ad.no_grad():
        restored = [
            model.decode(model.encode(Tensor(f * m))).data
            for f, m in zip(data.frames, masks)
        ]
    save_frames_dir(out / "restored", restored)
    print(f"full {result.full.psnr:.2f} dB  restored {result.restored_psnr:.2f} dB  "
          f"kept {result.kept_psnr:.2f} dB")
    return 0


def _fitting_arch(config: RunConfig, data: VideoDataset):
    """The configured architecture, checked against the data's frame size."""
    arch = config.arch()
    if arch.frame_hw != data.frame_hw:
        raise ConfigError(
            f"strides/embedding reconstruct {arch.frame_hw[0]}x{arch.frame_hw[1]} "
            f"frames but the input is {data.frame_hw[0]}x{data.frame_hw[1]}; "
            "adjust the strides or embedding keys"
        )
    return arch


def cmd_ablate(config: RunConfig) -> int:
    out = _out_dir(config, "ablate")
    data = _load_data(config)
    hw = data.frame_hw
    rows = []
    if config.grid == "structure":
        cells = [
            (label, strides, kernels, True, True, True)
            for label, strides, kernels in STRUCTURE_GRID
        ]
    elif config.grid == "toggles":
        cells = []
        for label, grn, ml, hl in TOGGLE_GRID:
            strides = (5, 2, 2) if ml else (5, 4)
            kernels = (1, 3, 3) if ml else (1, 3)
            cells.append((label, strides, kernels, grn, ml, hl))
    else:
        raise ConfigError(f"unknown grid {config.grid!r} (structure or toggles)")

    for label, strides, kernels, grn, ml, hl in cells:
        arch = _cell_arch(config, strides, kernels, hw, grn=grn,
                          header_layer=hl)
        plan = plan_channels(arch)
        model = build_model(arch, plan, seed=config.seed)
        result = train(model, data, config.train())
        report = result.history[-1].report
        rows.append({
            "label": label,
            "strides": ".".join(str(s) for s in strides),
            "kernels": ".".join(str(k) for k in kernels),
            "grn": "yes" if grn else "no",
            "multilayer": "yes" if ml else "no",
            "header_layer": "yes" if hl else "no",
            "params": plan.realized_size,
            "psnr": report.psnr,
            "ms_ssim": report.ms_ssim,
        })
        print(f"{label:>16}: {report.psnr:6.2f} dB  ({plan.realized_size} params)")

    header = "label,strides,kernels,grn,multilayer,header_layer,params,psnr,ms_ssim"
    lines = [header]
    for r in rows:
        lines.append(
            f"{r['label']},{r['strides']},{r['kernels']},{r['grn']},"
            f"{r['multilayer']},{r['header_layer']},{r['params']},"
            f"{r['psnr']:.6f},{r['ms_ssim']:.8f}"
        )
    (out / "ablate.csv").write_text("\n".join(lines) + "\n")
    save_bars_figure([r["label"] for r in rows], [r["psnr"] for r in rows],
                     out / "ablate.png", "PSNR (dB)")
    return 0


_COMMANDS = {
    "plan": cmd_plan,
    "train": cmd_train,
    "compress": cmd_compress,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "interpolate": cmd_interpolate,
    "inpaint": cmd_inpaint,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = _resolve_config(args)
        return _COMMANDS[args.command](config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ContainerError, FrameIOError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
