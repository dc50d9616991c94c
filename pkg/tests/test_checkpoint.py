"""
Tests for the binary checkpoint container.

Run:
    python -m pytest tests/test_checkpoint.py -v
"""

import struct

import pytest
import torch

from scenefix.checkpoint import MAGIC, load_checkpoint, read_header, save_checkpoint
from scenefix.errors import (
    CheckpointChecksumError,
    CheckpointFormatError,
    CheckpointVersionError,
    StageMismatch,
)
from scenefix.flow_model import BaseDenoiser, StageModel, parameter_checksum
from tests.conftest import tiny_model_config


@pytest.fixture
def prior_file(tmp_path):
    torch.manual_seed(0)
    prior = BaseDenoiser(tiny_model_config("coarse"))
    path = save_checkpoint(prior, tmp_path / "ckpt" / "prior_coarse.ckpt", {"steps": 12})
    return prior, path


def _corrupt(path, offset, value=None):
    data = bytearray(path.read_bytes())
    data[offset] = data[offset] ^ 0xFF if value is None else value
    path.write_bytes(bytes(data))


class TestRoundTrip:
    def test_prior(self, prior_file):
        prior, path = prior_file
        model, extra = load_checkpoint(path, expected_stage="coarse", expected_kind="prior")
        assert isinstance(model, BaseDenoiser)
        assert extra == {"steps": 12}
        assert model.cfg == prior.cfg
        assert parameter_checksum(model) == parameter_checksum(prior)
        assert not model.training

    def test_stage_model_keeps_frozen_base(self, tmp_path):
        torch.manual_seed(1)
        stage = StageModel(tiny_model_config("texture"))
        path = save_checkpoint(stage, tmp_path / "stage_texture.ckpt")
        model, extra = load_checkpoint(path, "texture", "stage")
        assert extra == {}
        assert parameter_checksum(model) == parameter_checksum(stage)
        assert not any(p.requires_grad for p in model.base.parameters())

    def test_header(self, prior_file):
        _, path = prior_file
        header, blobs = read_header(path)
        assert header["stage"] == "coarse" and header["kind"] == "prior"
        assert sum(entry["nbytes"] for entry in header["tensors"]) == len(blobs)
        assert path.read_bytes()[:8] == MAGIC


class TestLoadErrors:
    def test_flipped_blob_byte(self, prior_file):
        _, path = prior_file
        _corrupt(path, len(path.read_bytes()) - 100)
        with pytest.raises(CheckpointChecksumError):
            load_checkpoint(path)

    def test_truncated(self, prior_file):
        _, path = prior_file
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(CheckpointChecksumError):
            load_checkpoint(path)

    def test_too_short(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(MAGIC)
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_bad_magic(self, prior_file):
        _, path = prior_file
        _corrupt(path, 0, ord("X"))
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(path)

    def test_newer_schema_version(self, prior_file):
        _, path = prior_file
        data = bytearray(path.read_bytes())
        data[8:12] = struct.pack("<I", 2)
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_wrong_stage(self, prior_file):
        _, path = prior_file
        with pytest.raises(StageMismatch, match="stage"):
            load_checkpoint(path, expected_stage="fine")

    def test_wrong_kind(self, prior_file):
        _, path = prior_file
        with pytest.raises(StageMismatch, match="prior"):
            load_checkpoint(path, expected_kind="stage")
