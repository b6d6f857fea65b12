import numpy as np
import pytest
import torch

from clothavatar.body import DTYPE, ContractError
from clothavatar.closim import OffsetSequence
from clothavatar.diffcheck import check_op
from clothavatar.losses import (LAMBDA_DEPTH, LAMBDA_NORMAL, LAMBDA_SILHOUETTE, LAMBDA_TEMPORAL, LossWeights,
                                TrainingAbort, auxiliary_losses, cloth_loss, geometry_loss, geometry_terms,
                                pyramid_gradient_distance, rendering_loss, ssim, temporal_loss, total_loss)


def _img(seed, h=24, w=24, lo=0.1, hi=0.8):
    return torch.as_tensor(np.random.default_rng(seed).uniform(lo, hi, size=(h, w, 3)))


def test_paper_weights_are_pinned():
    assert (LAMBDA_NORMAL, LAMBDA_DEPTH, LAMBDA_SILHOUETTE) == (5.0, 1.0, 2.0)
    assert LAMBDA_TEMPORAL == 0.1
    w = LossWeights()
    assert (w.normal, w.depth, w.silhouette, w.temporal) == (5.0, 1.0, 2.0, 0.1)


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(rgb=-1.0)


def test_rendering_loss_identity_and_shift():
    x = _img(0)
    t = rendering_loss(x, x)
    assert float(t["rgb"]) == 0.0 and float(t["perceptual"]) == 0.0
    assert abs(float(t["ssim"])) <= 1e-9
    t2 = rendering_loss(x + 0.1, x)
    assert float(t2["rgb"]) == pytest.approx(0.1, abs=1e-12)


def test_ssim_self_and_noise():
    x = _img(1, 48, 48, 0, 1)
    assert float(ssim(x, x)) == pytest.approx(1.0, abs=1e-9)
    y = _img(2, 48, 48, 0, 1)
    assert 1 - float(ssim(x, y)) == pytest.approx(1.0, abs=0.1)


def test_rendering_loss_rejects_mismatch():
    with pytest.raises(ContractError):
        rendering_loss(_img(0, 8, 8), _img(0, 9, 8))


def test_perceptual_is_pluggable():
    calls = []

    def metric(p, g):
        calls.append(1)
        return (p - g).pow(2).mean()
    t = rendering_loss(_img(0), _img(1), perceptual=metric)
    assert calls and float(t["perceptual"]) > 0


def test_cloth_loss_cases():
    gt = _img(3)
    mask = torch.zeros(24, 24, dtype=torch.bool)
    mask[5:15, 3:20] = True
    target = torch.where(mask[..., None], gt, torch.ones_like(gt))
    assert float(cloth_loss(target, gt, mask)) == 0.0
    white = torch.ones_like(gt)
    expect = (1 - gt[mask]).abs().sum() / gt.numel()
    assert float(cloth_loss(white, gt, mask)) == pytest.approx(float(expect), abs=1e-12)
    with pytest.warns(RuntimeWarning):
        assert float(cloth_loss(white, gt, torch.zeros_like(mask))) == 0.0


def _geom(seed=4, h=16, w=16):
    rng = np.random.default_rng(seed)
    n = rng.normal(size=(h, w, 3))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    N = torch.as_tensor((n + 1) / 2)
    D = torch.as_tensor(rng.uniform(1.5, 3.0, size=(h, w)))
    S = torch.as_tensor(rng.uniform(0.6, 1.0, size=(h, w)))
    return N, D, S, n


def test_geometry_identity_is_zero():
    N, D, S, _ = _geom()
    assert float(geometry_loss(N, N, D, D, S, S)) == pytest.approx(0.0, abs=1e-12)


def test_geometry_orthogonal_normals_and_depth_shift():
    N, D, S, n = _geom()
    # a unit vector orthogonal to each normal
    ref = np.where(np.abs(n[..., :1]) < 0.9, [1.0, 0, 0], [0, 1.0, 0])
    o = np.cross(n, ref)
    o /= np.linalg.norm(o, axis=-1, keepdims=True)
    No = torch.as_tensor((o + 1) / 2)
    t = geometry_terms(No, N, D, D, S, S)
    assert float(t["normal"]) == pytest.approx(1.0, abs=1e-12)
    assert float(geometry_loss(No, N, D, D, S, S)) == pytest.approx(5.0, abs=1e-11)
    assert float(geometry_loss(N, N, D + 0.05, D, S, S)) == pytest.approx(0.05, abs=1e-12)


def test_geometry_silhouette_term_and_empty_joint_mask():
    N, D, S, _ = _geom()
    S0 = torch.zeros_like(S)
    t = geometry_terms(N, N, D + 1, D, S0, S)
    assert float(t["normal"]) == 0.0 and float(t["depth"]) == 0.0
    assert float(t["silhouette"]) == pytest.approx(float((S ** 2).mean()), abs=1e-15)
    assert float(geometry_loss(N, N, D, D, S0, S)) == pytest.approx(2 * float((S ** 2).mean()), abs=1e-12)


def _offsets(T=4, N=10, seed=5):
    return OffsetSequence.from_flat(torch.as_tensor(np.random.default_rng(seed).normal(size=(T, N, 7))))


def test_temporal_constant_is_zero_and_shift_invariant():
    base = torch.as_tensor(np.random.default_rng(6).normal(size=(1, 10, 7)))
    const = OffsetSequence.from_flat(base.repeat(4, 1, 1))
    assert float(temporal_loss(const)) == 0.0
    off = _offsets()
    shifted = OffsetSequence.from_flat(off.flat() + base)
    assert float(temporal_loss(shifted)) == pytest.approx(float(temporal_loss(off)), abs=1e-12)


def test_temporal_single_gap_closed_form():
    flat = torch.as_tensor(np.random.default_rng(7).normal(size=(1, 10, 7))).repeat(3, 1, 1)
    v = torch.tensor([0.3, -0.1, 0.2], dtype=DTYPE)
    flat[2, :, :3] += v
    got = float(temporal_loss(OffsetSequence.from_flat(flat)))
    assert got == pytest.approx(0.1 * float(v @ v), abs=1e-12)


def test_temporal_single_frame_warns():
    with pytest.warns(RuntimeWarning):
        assert float(temporal_loss(_offsets(T=1))) == 0.0


def test_auxiliary_terms():
    zero = OffsetSequence.zeros(3, 8)
    pos = torch.randn(5, 3, dtype=DTYPE)
    out = auxiliary_losses(zero, pos, None, pos, None)
    assert float(out["reg"]) == 0.0 and float(out["face_hands"]) == 0.0
    flat = torch.zeros(3, 8, 7, dtype=DTYPE)
    flat[..., 0] = 0.01
    out = auxiliary_losses(OffsetSequence.from_flat(flat))
    assert float(out["reg_x"]) == pytest.approx(1e-4, abs=1e-18)
    moved = auxiliary_losses(None, pos + torch.tensor([0.0, 0.02, 0.0], dtype=DTYPE), pos[:2], pos, pos[:2])
    assert float(moved["face_hands"]) == pytest.approx(0.0004 * 5 / 7, abs=1e-15)


def test_total_loss_arithmetic_and_linearity():
    rng = np.random.default_rng(8)
    names = list(LossWeights().as_dict())
    terms = {k: torch.tensor(rng.uniform(), dtype=DTYPE) for k in names}
    terms["unweighted_extra"] = torch.tensor(3.0, dtype=DTYPE)
    w = LossWeights()
    rep = total_loss(terms, w)
    expect = sum(w.as_dict()[k] * float(terms[k]) for k in names)
    assert float(rep.total) == pytest.approx(expect, abs=1e-9)
    assert set(rep.values()) == set(terms) | {"total"}
    w2 = LossWeights(cloth=2 * w.cloth)
    delta = float(total_loss(terms, w2).total) - float(rep.total)
    assert delta == pytest.approx(w.cloth * float(terms["cloth"]), abs=1e-12)
    zeros = {k: torch.zeros((), dtype=DTYPE) for k in names}
    assert float(total_loss(zeros, w).total) == 0.0


def test_total_loss_aborts_on_nan():
    with pytest.raises(TrainingAbort) as err:
        total_loss({"rgb": torch.tensor(float("nan"), dtype=DTYPE)}, LossWeights())
    assert err.value.term == "rgb"


def test_losses_nonnegative_on_random_inputs():
    for seed in range(5):
        a, b = _img(seed), _img(seed + 10)
        t = rendering_loss(a, b)
        assert all(float(v) >= 0 for v in t.values())
        N, D, S, _ = _geom(seed)
        N2, D2, S2, _ = _geom(seed + 10)
        assert float(geometry_loss(N, N2, D, D2, S, S2)) >= 0
        assert float(temporal_loss(_offsets(seed=seed))) >= 0


def test_gradients_against_finite_differences():
    a, b = _img(11, 12, 12), _img(12, 12, 12)
    assert check_op("rgb_ssim", lambda x: torch.stack(list(rendering_loss(x, b).values())), {"x": a}).passed
    assert check_op("pyramid", lambda x: pyramid_gradient_distance(x, b).reshape(1), {"x": a}).passed
    N, D, S, _ = _geom(13, 8, 8)
    N2, D2, S2, _ = _geom(14, 8, 8)
    rep = check_op("geo", lambda n, d, s: geometry_loss(n, N2, d, D2, s, S2).reshape(1), {"n": N, "d": D, "s": S})
    assert rep.passed, rep.worst
    off = _offsets(T=3, N=5)
    rep = check_op("temporal", lambda f: temporal_loss(OffsetSequence.from_flat(f)).reshape(1), {"f": off.flat()})
    assert rep.passed, rep.worst
