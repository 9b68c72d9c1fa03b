"""Image and frame I/O: PNG files, PNG sequences and raw planar YUV."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".tif", ".tiff")


def load_image(path: str | os.PathLike) -> torch.Tensor:
    """``[3, H, W]`` float32 in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def to_uint8(x: torch.Tensor) -> np.ndarray:
    if x.ndim == 4:
        x = x[0]
    arr = x.detach().cpu().clamp(0, 1).permute(1, 2, 0).numpy()
    return np.round(arr * 255.0).astype(np.uint8)


def save_image(x: torch.Tensor, path: str | os.PathLike) -> None:
    Image.fromarray(to_uint8(x)).save(path, format="PNG")


def list_images(directory: str | os.PathLike) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory} is not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_png_sequence(directory: str | os.PathLike) -> torch.Tensor:
    """Frames sorted by file name, stacked to ``[N, 3, H, W]``."""
    paths = [p for p in list_images(directory) if p.suffix.lower() == ".png"]
    if not paths:
        raise FileNotFoundError(f"no PNG frames in {directory}")
    frames = [load_image(p) for p in paths]
    shapes = {tuple(f.shape) for f in frames}
    if len(shapes) > 1:
        raise ValueError(f"frames in {directory} differ in size: {sorted(shapes)}")
    return torch.stack(frames)


def save_png_sequence(frames: torch.Tensor, directory: str | os.PathLike, prefix: str = "frame") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(frames):
        p = directory / f"{prefix}_{i:05d}.png"
        save_image(frame, p)
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# raw YUV

@dataclass
class YuvDescriptor:
    """Sidecar JSON next to a ``.yuv`` file.

    Only 8-bit planar 4:2:0 and 4:4:4 with full-range BT.601 are handled.
    """

    width: int
    height: int
    chroma: str = "420"
    bit_depth: int = 8
    frames: int | None = None

    def frame_bytes(self) -> int:
        luma = self.width * self.height
        if self.chroma == "420":
            return luma + 2 * ((self.width + 1) // 2) * ((self.height + 1) // 2)
        if self.chroma == "444":
            return 3 * luma
        raise ValueError(f"unsupported chroma format {self.chroma!r}")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "YuvDescriptor":
        with open(path) as f:
            d = cls(**json.load(f))
        if d.bit_depth != 8:
            raise ValueError("only 8-bit YUV is supported")
        return d

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2)


def sidecar_path(yuv_path: str | os.PathLike) -> Path:
    return Path(yuv_path).with_suffix(".json")


def _yuv_to_rgb(y, u, v):
    u, v = u - 0.5, v - 0.5
    r = y + 1.402 * v
    g = y - 0.344136 * u - 0.714136 * v
    b = y + 1.772 * u
    return np.clip(np.stack([r, g, b]), 0, 1)


def _rgb_to_yuv(rgb):
    r, g, b = rgb
    y = 0.299 * r + 0.587 * g + 0.114 * b
    u = -0.168736 * r - 0.331264 * g + 0.5 * b + 0.5
    v = 0.5 * r - 0.418688 * g - 0.081312 * b + 0.5
    return y, u, v


def load_yuv(path: str | os.PathLike, desc: YuvDescriptor | None = None) -> torch.Tensor:
    desc = desc or YuvDescriptor.load(sidecar_path(path))
    raw = np.fromfile(path, dtype=np.uint8)
    n = raw.size // desc.frame_bytes()
    if raw.size % desc.frame_bytes():
        raise ValueError(f"{path}: size is not a whole number of frames")
    if desc.frames is not None:
        n = min(n, desc.frames)
    w, h = desc.width, desc.height
    frames = []
    for i in range(n):
        buf = raw[i * desc.frame_bytes():(i + 1) * desc.frame_bytes()].astype(np.float32) / 255.0
        y = buf[: w * h].reshape(h, w)
        if desc.chroma == "420":
            cw, ch = (w + 1) // 2, (h + 1) // 2
            u = buf[w * h: w * h + cw * ch].reshape(ch, cw)
            v = buf[w * h + cw * ch:].reshape(ch, cw)
            u = np.repeat(np.repeat(u, 2, 0), 2, 1)[:h, :w]
            v = np.repeat(np.repeat(v, 2, 0), 2, 1)[:h, :w]
        else:
            u = buf[w * h: 2 * w * h].reshape(h, w)
            v = buf[2 * w * h:].reshape(h, w)
        frames.append(_yuv_to_rgb(y, u, v))
    return torch.from_numpy(np.stack(frames).astype(np.float32))


def save_yuv(frames: torch.Tensor, path: str | os.PathLike, chroma: str = "420") -> YuvDescriptor:
    n, _, h, w = frames.shape
    desc = YuvDescriptor(width=w, height=h, chroma=chroma, frames=n)
    with open(path, "wb") as f:
        for frame in frames:
            y, u, v = _rgb_to_yuv(frame.detach().cpu().double().clamp(0, 1).numpy())
            if chroma == "420":
                # average 2x2 blocks, padding odd edges by replication
                def down(c):
                    c = np.pad(c, ((0, h % 2), (0, w % 2)), mode="edge")
                    return c.reshape(c.shape[0] // 2, 2, c.shape[1] // 2, 2).mean(axis=(1, 3))
                u, v = down(u), down(v)
            for plane in (y, u, v):
                f.write(np.round(np.clip(plane, 0, 1) * 255).astype(np.uint8).tobytes())
    desc.save(sidecar_path(path))
    return desc


def load_frames(source: str | os.PathLike) -> torch.Tensor:
    """A directory of PNGs or a ``.yuv`` file with its sidecar."""
    source = Path(source)
    if source.is_dir():
        return load_png_sequence(source)
    if source.suffix.lower() == ".yuv":
        return load_yuv(source)
    raise ValueError(f"{source}: expected a PNG directory or a .yuv file")
