import math

import pytest
import torch

from clothavatar.body import DTYPE
from clothavatar.diffcheck import (BOUNDARY_TOL, DEFAULT_TOL, REGISTRY, NonFiniteValue, check_op,
                                   corrupted_rasterizer, finite_diff, negative_control, relative_error)
from clothavatar import render


def test_finite_diff_polynomial():
    x = torch.tensor([0.3, -1.2, 2.0], dtype=DTYPE)
    g = finite_diff(lambda v: float((v ** 3).sum()), x)
    torch.testing.assert_close(g, 3 * x ** 2, rtol=1e-8, atol=1e-9)
    part = finite_diff(lambda v: float((v ** 3).sum()), x, coords=[1])
    assert part[0] == 0 and part[2] == 0


def test_finite_diff_flags_non_finite_coordinate():
    x = torch.tensor([1.0, 1e-6], dtype=DTYPE)
    with pytest.raises(NonFiniteValue) as err:
        finite_diff(lambda v: float(torch.log(v).sum()), x, eps=1e-5)
    assert err.value.index == 1


def test_relative_error_floor():
    a = torch.tensor([0.0, 1.0], dtype=DTYPE)
    n = torch.tensor([0.0, 1.1], dtype=DTYPE)
    r = relative_error(a, n)
    assert r[0] == 0 and float(r[1]) == pytest.approx(0.1 / 1.1)


def test_check_op_passes_for_correct_gradient():
    x = torch.randn(6, dtype=DTYPE)
    rep = check_op("tanh", lambda x: torch.tanh(x) * x, {"x": x}, max_coords=None)
    assert rep.passed and rep.max_rel < DEFAULT_TOL
    assert "PASS" in rep.line()


def test_check_op_detects_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x ** 2

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 2.2 * x

    rep = check_op("bad", lambda x: Bad.apply(x), {"x": torch.randn(5, dtype=DTYPE)}, max_coords=None)
    assert not rep.passed and rep.worst
    assert "FAIL" in rep.line()


def test_check_op_reports_non_finite_coordinate():
    rep = check_op("log", lambda x: torch.log(x), {"x": torch.tensor([1.0, 1e-7], dtype=DTYPE)},
                   max_coords=None)
    assert not rep.passed and rep.flagged == ("x", 1)


def test_registry_covers_every_module():
    names = set(REGISTRY)
    for required in ("rasterize", "rasterize_boundary", "project_gaussians", "lbs_deform", "vertex_normals",
                     "triplane_decoder", "attribute_heads", "triplane_sampling", "loss_rgb", "loss_ssim",
                     "loss_geometry", "loss_temporal", "gcn_encoder", "gru_cell", "offset_head",
                     "offset_interpolation", "closim_chain", "closim_gcn_weight"):
        assert required in names
    assert REGISTRY["rasterize_boundary"].tol_rel == BOUNDARY_TOL


@pytest.mark.parametrize("name", ["rasterize", "gru_cell", "loss_temporal", "lbs_deform"])
def test_selected_registered_ops_pass(name):
    rep = REGISTRY[name].run()
    assert rep.passed, rep.worst[:3]


def test_negative_control_fails_and_restores():
    saved = render._backward_impl
    rep = negative_control()
    assert not rep.passed and rep.max_rel > 1.0
    assert render._backward_impl is saved
    with pytest.raises(RuntimeError):
        with corrupted_rasterizer():
            raise RuntimeError("boom")
    assert render._backward_impl is saved
    assert math.isfinite(rep.max_rel)
