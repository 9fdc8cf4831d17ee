import pytest

import ldrcnet.deform as deform_mod
from ldrcnet.gradcheck import GROUPS, REGISTRY, OpResult, relative_error, run_op, run_suite


def test_registry_covers_required_operations():
    required = {
        "conv2d", "avgpool2d", "global_avgpool", "upsample2x.nearest", "upsample2x.bilinear",
        "relu", "sigmoid", "add", "mul", "scale_channels", "concat_channels", "mse_loss",
        "bilinear_sample", "deform_conv2d.input", "deform_conv2d.weight", "deform_conv2d.offsets",
        "deform_conv2d.bias", "channel_attention", "end_to_end",
    }
    assert required <= set(REGISTRY)
    assert {op.group for op in REGISTRY.values()} == set(GROUPS)


def test_primitive_tolerance_is_strict():
    for op in REGISTRY.values():
        if op.group in ("tensor", "deform"):
            assert op.tol == 1e-3, op.name


def test_relative_error_metric():
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(0.1, 0.0) == pytest.approx(0.1)  # absolute below 1
    assert relative_error(110.0, 100.0) == pytest.approx(0.1)


def test_result_pass_rules():
    assert OpResult("x", "tensor", 1e-4, 1e-3, 1, 0.0, checked=10, skipped=2).passed
    assert not OpResult("x", "tensor", 2e-3, 1e-3, 1, 0.0, checked=10).passed
    assert not OpResult("x", "tensor", 0.0, 1e-3, 1, 0.0, checked=0).passed
    assert not OpResult("x", "tensor", 0.0, 1e-3, 1, 0.0, checked=3, skipped=2).passed


@pytest.mark.parametrize("name", ["conv2d", "sigmoid", "bilinear_sample", "deform_conv2d.offsets", "channel_attention"])
def test_selected_ops_pass(name):
    res = run_op(REGISTRY[name], seeds=(0, 1))
    assert res.passed, res.line()


def test_corrupted_backward_is_caught_and_named(monkeypatch):
    original = deform_mod._deform_backward

    def corrupted(*args, **kwargs):
        gx, gw, goff = original(*args, **kwargs)
        if goff is not None:
            goff = goff * 1.5
        return gx, gw, goff

    monkeypatch.setattr(deform_mod, "_deform_backward", corrupted)
    lines = []
    results = run_suite("deform", seeds=(0,), report=lines.append)
    failed = [r.name for r in results if not r.passed]
    assert "deform_conv2d.offsets" in failed
    assert "deform_conv2d.input" not in failed
    assert any(line.startswith("deform_conv2d.offsets\t") and line.endswith("FAIL") for line in lines)


def test_unknown_group():
    with pytest.raises(ValueError):
        run_suite("nope")
