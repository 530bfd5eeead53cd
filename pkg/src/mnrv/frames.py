"""Frame stores: a raw planar RGB file and numbered PNG directories.

Raw layout: 16-byte header (4-byte magic, then frame count, height, width
as little-endian uint32) followed by T x 3 x H x W bytes, frame-major,
channel-planar. Pixels map to [0,1] by /255 on load and round back to the
same bytes on save, so a load/save cycle is byte-identical.
"""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from . import autodiff as ad
from .errors import FrameIOError
from .training import VideoDataset

RAW_MAGIC = b"MNVF"
_HEADER = struct.Struct("<4sIII")


def _to_bytes(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(frame, dtype=np.float64) * 255.0), 0, 255
                   ).astype(np.uint8)


def save_frames_raw(path, frames) -> None:
    frames = list(frames)
    if not frames:
        raise FrameIOError("refusing to write an empty frame file")
    t = len(frames)
    _, h, w = frames[0].shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(RAW_MAGIC, t, h, w))
        for f in frames:
            if f.shape != (3, h, w):
                raise FrameIOError(f"frame shape {f.shape} does not match (3,{h},{w})")
            fh.write(_to_bytes(f).tobytes())


def load_frames_raw(path) -> list[np.ndarray]:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise FrameIOError(f"{path}: header is {len(header)} bytes, need 16")
        magic, t, h, w = _HEADER.unpack(header)
        if magic != RAW_MAGIC:
            raise FrameIOError(f"{path}: bad magic {magic!r}")
        if t < 1 or h < 1 or w < 1:
            raise FrameIOError(f"{path}: degenerate dimensions T={t} H={h} W={w}")
        body = fh.read()
    need = t * 3 * h * w
    if len(body) != need:
        raise FrameIOError(f"{path}: expected {need} pixel bytes, found {len(body)}")
    raw = np.frombuffer(body, dtype=np.uint8).reshape(t, 3, h, w)
    scale = np.asarray(1.0 / 255.0, dtype=ad.default_dtype())
    return [raw[i].astype(ad.default_dtype()) * scale for i in range(t)]


_NUM_RE = re.compile(r"(\d+)")


def _frame_files(directory: Path) -> list[tuple[int, Path]]:
    found = []
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() not in (".png", ".bmp"):
            continue
        m = _NUM_RE.search(p.stem)
        if m is None:
            raise FrameIOError(f"{p}: frame file has no numeric index")
        found.append((int(m.group(1)), p))
    if not found:
        raise FrameIOError(f"{directory}: no frame images found")
    found.sort(key=lambda pair: pair[0])
    indices = [i for i, _ in found]
    if indices != list(range(len(found))):
        missing = sorted(set(range(len(found))) - set(indices))
        raise FrameIOError(
            f"{directory}: frame numbering must be dense from 0 "
            f"(missing {missing[:5] if missing else indices})"
        )
    return found


def load_frames_dir(directory) -> list[np.ndarray]:
    directory = Path(directory)
    frames = []
    shape = None
    for _, p in _frame_files(directory):
        with Image.open(p) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise FrameIOError(
                f"{p}: dimensions {arr.shape[1]}x{arr.shape[0]} do not match "
                f"the first frame ({shape[1]}x{shape[0]})"
            )
        chw = np.transpose(arr, (2, 0, 1)).astype(ad.default_dtype())
        frames.append(chw * np.asarray(1.0 / 255.0, dtype=ad.default_dtype()))
    return frames


def save_frames_dir(directory, frames) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        hwc = np.transpose(_to_bytes(f), (1, 2, 0))
        Image.fromarray(hwc, mode="RGB").save(directory / f"{i:05d}.png")


def load_frames(path) -> VideoDataset:
    path = Path(path)
    if path.is_dir():
        return VideoDataset(load_frames_dir(path))
    if not path.exists():
        raise FrameIOError(f"{path}: no such file or directory")
    return VideoDataset(load_frames_raw(path))


def save_frames(path, frames, fmt: str | None = None) -> None:
    path = Path(path)
    if fmt is None:
        fmt = "dir" if (path.is_dir() or path.suffix == "") else "raw"
    if fmt == "dir":
        save_frames_dir(path, frames)
    elif fmt == "raw":
        save_frames_raw(path, frames)
    else:
        raise FrameIOError(f"unknown frame format {fmt!r}")


def tiny_fixture(t: int = 4, height: int = 40, width: int = 80) -> VideoDataset:
    """Synthetic clip: a smooth two-color gradient translating width/8 pixels
    per frame. Small enough to overfit in seconds, structured enough that
    embedding interpolation has something real to recover."""
    left = np.array([0.9, 0.25, 0.1])
    right = np.array([0.1, 0.4, 0.9])
    yy = np.arange(height)[:, None]
    xx = np.arange(width)[None, :]
    frames = []
    for i in range(t):
        shift = i * width / 8.0
        phase = 2.0 * np.pi * (xx + 0.5 * yy - shift) / width
        g = 0.5 * (1.0 + np.sin(phase))
        frame = left[:, None, None] * (1.0 - g) + right[:, None, None] * g
        frames.append(frame.astype(ad.default_dtype()))
    return VideoDataset(frames)
