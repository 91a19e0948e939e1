"""Tests for the VLRD checkpoint container."""

import struct

import pytest
import torch

from vl_reader.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    config_differences,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    sidecar_path,
)
from vl_reader.errors import CheckpointError, ConfigMismatch, VersionMismatch


@pytest.fixture
def tensors():
    return {
        "model.weight": torch.arange(6, dtype=torch.float32).reshape(2, 3),
        "model.step": torch.tensor(4.0),
        "extra.ids": torch.tensor([1, 2, 3], dtype=torch.int64),
        "extra.flags": torch.tensor([True, False]),
        "extra.double": torch.tensor([0.1], dtype=torch.float64),
    }


class TestCheckpointFile:
    """Test cases for writing and reading checkpoints."""

    def test_round_trip(self, tmp_path, tiny_config, tensors):
        """Test that tensors, dtypes, config and metadata survive."""
        path = save_checkpoint(tmp_path / "a.vlrd", tiny_config, tensors, {"phase": "mvlr", "step": 3})
        ckpt = load_checkpoint(path)
        assert ckpt.config == tiny_config
        assert ckpt.metadata == {"phase": "mvlr", "step": 3}
        assert set(ckpt.tensors) == set(tensors)
        for name, tensor in tensors.items():
            assert ckpt.tensors[name].dtype == tensor.dtype
            assert torch.equal(ckpt.tensors[name], tensor)

    def test_header(self, tmp_path, tiny_config, tensors):
        """Test the magic bytes and version field."""
        path = save_checkpoint(tmp_path / "a.vlrd", tiny_config, tensors)
        data = path.read_bytes()
        assert data[:4] == MAGIC
        assert struct.unpack("<I", data[4:8])[0] == FORMAT_VERSION

    def test_sidecar(self, tmp_path, tiny_config, tensors):
        """Test the readable parameter listing."""
        path = save_checkpoint(tmp_path / "a.vlrd", tiny_config, tensors)
        lines = sidecar_path(path).read_text(encoding="utf-8").splitlines()
        assert sidecar_path(path).name == "a.vlrd.params.txt"
        assert "model.weight\tfloat32\t2x3" in lines
        assert "model.step\tfloat32\tscalar" in lines

    def test_version_mismatch(self, tmp_path, tiny_config, tensors):
        """Test a file from a different format version."""
        path = save_checkpoint(tmp_path / "a.vlrd", tiny_config, tensors)
        data = bytearray(path.read_bytes())
        data[4:8] = struct.pack("<I", FORMAT_VERSION + 1)
        path.write_bytes(bytes(data))
        with pytest.raises(VersionMismatch) as exc_info:
            load_checkpoint(path)
        assert exc_info.value.found == FORMAT_VERSION + 1

    def test_config_mismatch(self, tmp_path, tiny_config, tensors):
        """Test loading under a different expected config."""
        path = save_checkpoint(tmp_path / "a.vlrd", tiny_config, tensors)
        other = tiny_config.model_copy(update={"d_model": 32, "r_v": 0.5})
        with pytest.raises(ConfigMismatch) as exc_info:
            load_checkpoint(path, expected=other)
        assert exc_info.value.fields == ["d_model", "r_v"]
        assert load_checkpoint(path, expected=tiny_config).config == tiny_config

    def test_config_differences(self, tiny_config):
        """Test field-level comparison."""
        assert config_differences(tiny_config, tiny_config) == []
        assert config_differences(tiny_config, tiny_config.model_copy(update={"dec_depth": 3})) == ["dec_depth"]

    def test_not_a_checkpoint(self, tmp_path):
        """Test a file without the magic bytes."""
        path = tmp_path / "junk.vlrd"
        path.write_bytes(b"JUNKJUNK")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path, tiny_config, tensors):
        """Test a file cut short."""
        path = save_checkpoint(tmp_path / "a.vlrd", tiny_config, tensors)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        """Test that an absent file is a checkpoint error."""
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.vlrd")


class TestModelFromCheckpoint:
    """Test cases for rebuilding the network."""

    def test_same_outputs(self, tmp_path, tiny_model):
        """Test that a rebuilt model reproduces the encoder output."""
        tensors = {f"model.{k}": v for k, v in tiny_model.state_dict().items()}
        path = save_checkpoint(tmp_path / "m.vlrd", tiny_model.config, tensors)
        rebuilt = model_from_checkpoint(load_checkpoint(path)).eval()
        patches = torch.rand(2, tiny_model.config.n_patches, tiny_model.config.patch_dim)
        with torch.no_grad():
            assert torch.equal(rebuilt.encode_image(patches), tiny_model.encode_image(patches))

    def test_no_model_tensors(self, tmp_path, tiny_config):
        """Test a checkpoint that holds no parameters."""
        path = save_checkpoint(tmp_path / "e.vlrd", tiny_config, {"optim.x": torch.zeros(1)})
        with pytest.raises(CheckpointError):
            model_from_checkpoint(load_checkpoint(path))
