"""
Tests for the binary checkpoint container
"""
import struct

import numpy as np
import pytest
import torch

from utils.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    load_module_tensors,
    module_tensors,
    read_container,
    require_kind,
    write_container,
)
from utils.errors import CheckpointError


class TestContainer:
    """Test container round trips and corruption handling"""

    @pytest.fixture
    def tensors(self):
        rng = np.random.default_rng(0)
        return {
            "weights": rng.standard_normal((3, 4)).astype(np.float32),
            "counts": np.arange(5, dtype=np.int64),
            "scalar": np.array(2.5, dtype=np.float64),
            "flags": np.array([True, False]),
        }

    @pytest.fixture
    def written(self, tmp_path, tensors):
        return write_container(tmp_path / "x.ckpt", tensors, {"kind": "test", "epoch": 3})

    def test_roundtrip(self, written, tensors):
        loaded, meta = read_container(written)
        assert meta == {"kind": "test", "epoch": 3}
        assert list(loaded) == list(tensors)
        for name, value in tensors.items():
            assert loaded[name].dtype == value.dtype
            assert np.array_equal(loaded[name], value)

    def test_header(self, written):
        raw = written.read_bytes()
        assert raw[:8] == MAGIC
        assert struct.unpack("<I", raw[8:12])[0] == FORMAT_VERSION

    def test_same_input_same_bytes(self, tmp_path, tensors):
        a = write_container(tmp_path / "a.ckpt", tensors, {"kind": "test"})
        b = write_container(tmp_path / "b.ckpt", tensors, {"kind": "test"})
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            read_container(path)

    def test_version_mismatch(self, written):
        raw = bytearray(written.read_bytes())
        raw[8:12] = struct.pack("<I", FORMAT_VERSION + 1)
        written.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            read_container(written)

    def test_truncated(self, written):
        raw = written.read_bytes()
        written.write_bytes(raw[:-7])
        with pytest.raises(CheckpointError, match="Truncated"):
            read_container(written)

    def test_trailing_bytes(self, written):
        written.write_bytes(written.read_bytes() + b"\x00")
        with pytest.raises(CheckpointError):
            read_container(written)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            read_container(tmp_path / "none.ckpt")

    def test_wrong_kind(self, written):
        _, meta = read_container(written)
        require_kind(meta, "test", written)
        with pytest.raises(CheckpointError):
            require_kind(meta, "gan", written)


class TestModuleTensors:
    """Test module state flattening"""

    def test_module_roundtrip(self, tmp_path):
        torch.manual_seed(0)
        source = torch.nn.Sequential(torch.nn.Conv2d(1, 2, 3), torch.nn.BatchNorm2d(2))
        target = torch.nn.Sequential(torch.nn.Conv2d(1, 2, 3), torch.nn.BatchNorm2d(2))
        path = write_container(tmp_path / "m.ckpt", module_tensors("net", source), {"kind": "test"})
        tensors, _ = read_container(path)
        load_module_tensors("net", target, tensors)
        for (name, a), (_, b) in zip(source.state_dict().items(), target.state_dict().items()):
            assert torch.equal(a, b), name

    def test_shape_mismatch(self):
        source = torch.nn.Linear(3, 2)
        target = torch.nn.Linear(4, 2)
        with pytest.raises(CheckpointError):
            load_module_tensors("net", target, module_tensors("net", source))
