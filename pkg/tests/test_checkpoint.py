import struct

import numpy as np
import pytest

from ldrcnet.arch import LDRCNet, ModelConfig
from ldrcnet.checkpoint import (
    MAGIC,
    Checkpoint,
    CheckpointFormatError,
    Phase,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from ldrcnet.training import predict


def _ckpt(phase=Phase.DERAIN, ablation="full"):
    cfg = ModelConfig(base_channels=4, ablation=ablation)
    model = LDRCNet(cfg, seed=2)
    params = model.state_dict()
    moments = {f"m.{k}": np.full_like(v, 0.5) for k, v in list(params.items())[:3]}
    return Checkpoint(params, moments, 17, phase, cfg, {"adam_t": "17", "seed": "0"})


def test_bytes_round_trip_is_exact():
    ck = _ckpt()
    raw = to_bytes(ck)
    back = from_bytes(raw)
    assert to_bytes(back) == raw
    assert back.step == 17 and back.phase == Phase.DERAIN
    assert back.config == ck.config and back.meta == ck.meta
    assert list(back.params) == list(ck.params)
    for k in ck.params:
        assert back.params[k].dtype == np.float32
        np.testing.assert_array_equal(back.params[k], ck.params[k])


def test_file_round_trip(tmp_path):
    ck = _ckpt(Phase.JOINT, "s5")
    save_checkpoint(tmp_path / "a.ldrc", ck)
    back = load_checkpoint(tmp_path / "a.ldrc")
    assert back.config.ablation == "s5" and back.phase == Phase.JOINT


def test_header_layout():
    raw = to_bytes(_ckpt(Phase.CONSTRAINT))
    assert raw[:4] == MAGIC
    version, phase, step = struct.unpack("<IBQ", raw[4:17])
    assert (version, phase, step) == (1, 0, 17)


def test_bad_magic():
    raw = bytearray(to_bytes(_ckpt()))
    raw[0:4] = b"XXXX"
    with pytest.raises(CheckpointFormatError, match="magic"):
        from_bytes(bytes(raw))


def test_bad_version_and_phase():
    raw = bytearray(to_bytes(_ckpt()))
    bad = bytearray(raw)
    bad[4:8] = struct.pack("<I", 9)
    with pytest.raises(CheckpointFormatError, match="version"):
        from_bytes(bytes(bad))
    bad = bytearray(raw)
    bad[8] = 7
    with pytest.raises(CheckpointFormatError, match="phase"):
        from_bytes(bytes(bad))


@pytest.mark.parametrize("cut", [3, 10, 40, 500, -1])
def test_truncation_detected(cut):
    raw = to_bytes(_ckpt())
    with pytest.raises(CheckpointFormatError, match="truncated"):
        from_bytes(raw[:cut])


def test_trailing_bytes_detected():
    with pytest.raises(CheckpointFormatError, match="trailing"):
        from_bytes(to_bytes(_ckpt()) + b"\0")


def test_derain_checkpoint_restores_freeze_mask():
    model = _ckpt(Phase.DERAIN).build_model()
    for name, p in model.named_parameters():
        assert p.requires_grad == (not name.startswith("encoder."))
    joint = _ckpt(Phase.JOINT).build_model()
    assert all(p.requires_grad for p in joint.parameters())


def test_inference_bit_exact_after_reload(tmp_path, rng):
    ck = _ckpt()
    original = LDRCNet(ck.config)
    original.load_state_dict(ck.params)
    save_checkpoint(tmp_path / "m.ldrc", ck)
    reloaded = load_checkpoint(tmp_path / "m.ldrc").build_model()
    x = rng.random((1, 3, 16, 16)).astype(np.float32)
    assert predict(original, x).tobytes() == predict(reloaded, x).tobytes()
