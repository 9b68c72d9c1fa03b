import numpy as np
import pytest
import torch

from rdcodec.io import (
    YuvDescriptor,
    list_images,
    load_frames,
    load_image,
    load_png_sequence,
    load_yuv,
    save_image,
    save_png_sequence,
    save_yuv,
    sidecar_path,
)


def test_png_round_trip(tmp_path):
    x = torch.randint(0, 256, (3, 17, 23)).float() / 255
    save_image(x, tmp_path / "a.png")
    y = load_image(tmp_path / "a.png")
    assert y.shape == (3, 17, 23) and y.dtype == torch.float32
    assert torch.equal(y, x)


def test_list_images(tmp_path):
    for name in ("b.png", "a.JPG", "notes.txt"):
        (tmp_path / name).write_bytes(b"")
    assert [p.name for p in list_images(tmp_path)] == ["a.JPG", "b.png"]
    with pytest.raises(FileNotFoundError):
        list_images(tmp_path / "missing")


def test_png_sequence(tmp_path):
    frames = torch.rand(3, 3, 8, 8)
    paths = save_png_sequence(frames, tmp_path / "seq")
    assert [p.name for p in paths] == ["frame_00000.png", "frame_00001.png", "frame_00002.png"]
    back = load_png_sequence(tmp_path / "seq")
    assert back.shape == frames.shape
    assert (back - frames).abs().max() <= 0.5 / 255 + 1e-6
    save_image(torch.rand(3, 4, 4), tmp_path / "seq" / "frame_00009.png")
    with pytest.raises(ValueError):
        load_png_sequence(tmp_path / "seq")


@pytest.mark.parametrize("chroma", ["420", "444"])
def test_yuv_round_trip(tmp_path, chroma):
    # smooth content so 4:2:0 subsampling loses little
    yy, xx = torch.meshgrid(torch.linspace(0, 1, 10), torch.linspace(0, 1, 13), indexing="ij")
    frames = torch.stack([torch.stack([yy, xx, (yy + xx) / 2]) * s for s in (0.5, 0.9)])
    path = tmp_path / "clip.yuv"
    desc = save_yuv(frames, path, chroma)
    assert sidecar_path(path).exists()
    assert path.stat().st_size == 2 * desc.frame_bytes()
    back = load_frames(path)
    assert back.shape == frames.shape
    tol = 0.02 if chroma == "444" else 0.08
    assert (back - frames).abs().max() < tol


def test_yuv_frame_bytes():
    assert YuvDescriptor(4, 4).frame_bytes() == 16 + 2 * 4
    assert YuvDescriptor(5, 3).frame_bytes() == 15 + 2 * 3 * 2
    with pytest.raises(ValueError):
        YuvDescriptor(4, 4, chroma="422").frame_bytes()


def test_yuv_rejects_partial_frames(tmp_path):
    path = tmp_path / "bad.yuv"
    np.zeros(25, dtype=np.uint8).tofile(path)
    with pytest.raises(ValueError):
        load_yuv(path, YuvDescriptor(4, 4))


def test_load_frames_rejects_other_files(tmp_path):
    (tmp_path / "x.mp4").write_bytes(b"")
    with pytest.raises(ValueError):
        load_frames(tmp_path / "x.mp4")
