import json

import pytest
import torch

from evotf import rng
from evotf.checkpoint import (CheckpointError, CheckpointShapeError, CheckpointTruncatedError,
                              CheckpointVersionError, load_checkpoint, save_checkpoint)
from evotf.model import ModelConfig, init_params


@pytest.fixture
def saved(tmp_path):
    cfg = ModelConfig.micro()
    p = init_params(cfg, rng.key(0))
    p["head2.w"] = torch.randn(p["head2.w"].shape)
    return save_checkpoint(p, cfg, tmp_path / "ck", {"step": 3}), p, cfg


def test_roundtrip_bitwise(saved, tmp_path):
    path, p, cfg = saved
    q, cfg2, extra = load_checkpoint(path)
    assert cfg2 == cfg and extra == {"step": 3}
    for k in p:
        assert torch.equal(p[k], q[k])
    again = save_checkpoint(q, cfg2, tmp_path / "ck2", extra)
    assert (again / "params.bin").read_bytes() == (path / "params.bin").read_bytes()
    assert (again / "manifest.json").read_bytes() == (path / "manifest.json").read_bytes()


def test_truncated_blob(saved):
    path, _, _ = saved
    blob = path / "params.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)


def test_edited_shape(saved):
    path, _, _ = saved
    m = json.loads((path / "manifest.json").read_text())
    m["tensors"][0]["shape"] = [99, 1]
    (path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(path)


def test_version_mismatch(saved):
    path, _, _ = saved
    m = json.loads((path / "manifest.json").read_text())
    m["format_version"] = 99
    (path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_missing_manifest(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing")


def test_save_rejects_wrong_shape(tmp_path):
    cfg = ModelConfig.micro()
    p = init_params(cfg, rng.key(0))
    p["head2.b"] = torch.zeros(3)
    with pytest.raises(CheckpointShapeError):
        save_checkpoint(p, cfg, tmp_path / "x")
