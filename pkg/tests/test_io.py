import os
import tempfile

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdcseg.netpbm import read_netpbm, write_pgm, write_ppm
from rdcseg.tensor import Tensor, as4d, load_checkpoint, read_tensor, save_checkpoint, write_tensor


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31))
def test_netpbm_roundtrip_bit_exact(h, w, seed):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    lab = rng.integers(0, 256, size=(h, w), dtype=np.uint8)
    with tempfile.TemporaryDirectory() as d:
        write_ppm(os.path.join(d, "a.ppm"), img)
        write_pgm(os.path.join(d, "a.pgm"), lab)
        np.testing.assert_array_equal(read_netpbm(os.path.join(d, "a.ppm")), img)
        np.testing.assert_array_equal(read_netpbm(os.path.join(d, "a.pgm")), lab)


def test_netpbm_header_bytes_and_comments(tmp_path):
    write_pgm(tmp_path / "x.pgm", np.array([[1, 2, 3]], np.uint8))
    assert (tmp_path / "x.pgm").read_bytes() == b"P5\n3 1\n255\n\x01\x02\x03"
    (tmp_path / "c.pgm").write_bytes(b"P5\n# a comment\n2 1 # more\n255\n\x07\x08")
    np.testing.assert_array_equal(read_netpbm(tmp_path / "c.pgm"), [[7, 8]])


def test_netpbm_errors(tmp_path):
    (tmp_path / "t.pgm").write_bytes(b"P5\n2 2\n255\n\x00")
    with pytest.raises(ValueError, match="truncated"):
        read_netpbm(tmp_path / "t.pgm")
    (tmp_path / "b.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError, match="magic"):
        read_netpbm(tmp_path / "b.pgm")
    (tmp_path / "d.pgm").write_bytes(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(ValueError, match="8-bit"):
        read_netpbm(tmp_path / "d.pgm")
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "e.pgm", np.array([[300]]))
    with pytest.raises(ValueError):
        write_ppm(tmp_path / "e.ppm", np.zeros((2, 2)))


def test_tensor_file_layout(tmp_path):
    write_tensor(tmp_path / "t.bin", np.array([1.5, -2.0]))
    raw = (tmp_path / "t.bin").read_bytes()
    assert np.frombuffer(raw[:16], "<u4").tolist() == [1, 2, 1, 1]
    assert np.frombuffer(raw[16:], "<f4").tolist() == [1.5, -2.0]
    assert read_tensor(tmp_path / "t.bin").shape == (1, 2, 1, 1)
    (tmp_path / "t.bin").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        read_tensor(tmp_path / "t.bin")


def test_as4d():
    assert as4d((5,)) == (1, 5, 1, 1)
    assert as4d((2, 3, 4, 5)) == (2, 3, 4, 5)
    with pytest.raises(ValueError):
        as4d((1, 2, 3, 4, 5))


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"enc/w": rng.normal(size=(4, 3, 3, 3)), "bias": rng.normal(size=4)}
    save_checkpoint(tmp_path, tensors)
    back = load_checkpoint(tmp_path)
    assert set(back) == set(tensors)
    for k, v in tensors.items():
        assert back[k].shape == v.shape
        np.testing.assert_array_equal(back[k], v.astype(np.float32))


def test_tensor_grad_accumulation():
    t = Tensor(np.zeros((2, 2)), "w")
    t.accumulate(np.ones((2, 2)))
    t.accumulate(np.ones((2, 2)))
    np.testing.assert_array_equal(t.grad, 2.0)
    with pytest.raises(ValueError, match="shape"):
        t.accumulate(np.ones(3))
    t.zero_grad()
    assert not np.any(t.grad)
