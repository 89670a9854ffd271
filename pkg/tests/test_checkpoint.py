"""Binary checkpoint format: round trips, versioning, corruption handling."""

import struct

import numpy as np
import pytest

from vpfuse.checkpoint import (
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from vpfuse.config import default_config
from vpfuse.model import FusionModel
from vpfuse.tasks import batch_stream, generate_sample, make_batch, spec_from_config
from vpfuse.training import TrainConfig, train


def small_cfg():
    return default_config().replace(train__batch=4)


def test_save_load_save_is_byte_identical(tmp_path):
    model = FusionModel(small_cfg(), seed=3)
    p1 = tmp_path / "a.octo"
    p2 = tmp_path / "b.octo"
    save_checkpoint(model, p1, stage="pretrain")
    loaded, _, stage = load_checkpoint(p1)
    assert stage == "pretrain"
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_parameters_roundtrip_bitwise(tmp_path):
    model = FusionModel(small_cfg(), seed=3)
    path = tmp_path / "m.octo"
    save_checkpoint(model, path, stage="tune")
    loaded, cfg, _ = load_checkpoint(path)
    assert cfg["train.batch"] == 4
    for name, p in model.named_parameters().items():
        assert loaded.named_parameters()[name].data.tobytes() == p.data.tobytes(), name


def test_magic_checked(tmp_path):
    path = tmp_path / "bad.octo"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_version_checked(tmp_path):
    model = FusionModel(small_cfg(), seed=0)
    path = tmp_path / "v.octo"
    save_checkpoint(model, path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 9)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_truncation_detected(tmp_path):
    model = FusionModel(small_cfg(), seed=0)
    path = tmp_path / "t.octo"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 16])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_shape_mismatch_detected(tmp_path):
    # a checkpoint whose embedded config disagrees with its tensor dims
    model = FusionModel(small_cfg(), seed=0)
    path = tmp_path / "s.octo"
    blob = model.cfg.replace(router__hidden=16).serialize()
    save_checkpoint(model, path, config_blob=blob)
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(path)


def test_resume_stage2_forward_matches_bitwise(tmp_path):
    cfg = small_cfg()
    model = FusionModel(cfg, seed=5)
    tc = TrainConfig(stage="pretrain", steps=4, batch_size=4, lr=3e-3, seed=5)
    train(model, batch_stream(cfg, "pretrain", 5), tc)

    batch = make_batch([generate_sample(spec_from_config(cfg, "motion"), i)
                        for i in range(2)])
    logits_before, _ = model.forward(batch)

    path = tmp_path / "stage1.octo"
    save_checkpoint(model, path, stage="pretrain")
    resumed, _, stage = load_checkpoint(path)
    assert stage == "pretrain"
    logits_after, _ = resumed.forward(batch)
    assert logits_after.data.tobytes() == logits_before.data.tobytes()
