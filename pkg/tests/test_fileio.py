import numpy as np
import pytest

from dualcorenet.errors import FormatError
from dualcorenet.fileio import (load_checkpoint, load_tensor, read_image_pgm, read_mask_pgm, read_pgm,
                                save_checkpoint, save_tensor, write_image_pgm, write_mask_pgm)


@pytest.mark.parametrize("shape", [(), (3,), (2, 3, 4)])
def test_tensor_round_trip(tmp_path, rng, shape):
    a = rng.normal(size=shape).astype(np.float32)
    save_tensor(tmp_path / "t.dct", a)
    assert (tmp_path / "t.dct").read_bytes()[:4] == b"DCT1"
    assert np.array_equal(load_tensor(tmp_path / "t.dct"), a)


def test_truncated_tensor(tmp_path, rng):
    save_tensor(tmp_path / "t.dct", rng.normal(size=(4, 4)))
    raw = (tmp_path / "t.dct").read_bytes()
    (tmp_path / "t.dct").write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="truncated"):
        load_tensor(tmp_path / "t.dct")


def test_checkpoint_keeps_names_and_order(tmp_path, rng):
    tensors = {"b.weight": rng.normal(size=(2, 2)).astype(np.float32), "a.bias": np.zeros(3, np.float32)}
    save_checkpoint(tmp_path / "c.ckpt", tensors)
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert list(back) == list(tensors)
    assert all(np.array_equal(back[k], tensors[k]) for k in tensors)
    assert not (tmp_path / "c.ckpt.tmp").exists()


def test_checkpoint_bad_header(tmp_path):
    (tmp_path / "c.ckpt").write_bytes(b"garbage!")
    with pytest.raises(FormatError, match="header"):
        load_checkpoint(tmp_path / "c.ckpt")


def test_image_pgm_16_bit(tmp_path, rng):
    img = (rng.integers(0, 65536, size=(5, 7)) / 65535).astype(np.float32)
    write_image_pgm(tmp_path / "i.pgm", img)
    raster, maxval = read_pgm(tmp_path / "i.pgm")
    assert maxval == 65535 and raster.shape == (5, 7)
    assert np.array_equal(read_image_pgm(tmp_path / "i.pgm"), img)


def test_mask_pgm(tmp_path):
    mask = np.array([[0, 1, 1], [1, 0, 0]], np.float32)
    write_mask_pgm(tmp_path / "m.pgm", mask)
    raster, maxval = read_pgm(tmp_path / "m.pgm")
    assert maxval == 255 and set(np.unique(raster)) == {0, 255}
    assert np.array_equal(read_mask_pgm(tmp_path / "m.pgm"), mask)


def test_pgm_header_comment(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    assert read_pgm(tmp_path / "c.pgm")[0].tolist() == [[0, 255]]


def test_ascii_pgm_rejected(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "a.pgm")
