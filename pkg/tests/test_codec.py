import numpy as np
import pytest
import torch

from clothavatar.body import DTYPE, BodyConfig, build_canonical_body
from clothavatar.codec import (PLANE_AXES, AttributeHeads, AvatarCodec, Triplane, body_extent, build_static_avatar,
                               decode_attributes, sample_features)
from clothavatar.diffcheck import check_op

EXT = np.array([[-1.0, 1.0], [-2.0, 2.0], [-0.5, 0.5]])


def _bilinear(plane, u, v):
    """Scalar bilinear lookup; u indexes width, v height, both in node units."""
    H, W = plane.shape
    u, v = min(max(u, 0), W - 1), min(max(v, 0), H - 1)
    x0, y0 = int(np.floor(u)), int(np.floor(v))
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    fx, fy = u - x0, v - y0
    return ((1 - fx) * (1 - fy) * plane[y0, x0] + fx * (1 - fy) * plane[y0, x1]
            + (1 - fx) * fy * plane[y1, x0] + fx * fy * plane[y1, x1])


def _oracle(planes, ext, p):
    out = []
    for k, (a, b) in enumerate(PLANE_AXES):
        C, H, W = planes[k].shape
        u = (p[a] - ext[a, 0]) / (ext[a, 1] - ext[a, 0]) * (W - 1)
        v = (p[b] - ext[b, 0]) / (ext[b, 1] - ext[b, 0]) * (H - 1)
        out.extend(_bilinear(planes[k, c], u, v) for c in range(C))
    return np.array(out)


def test_sampling_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    planes = rng.normal(size=(3, 4, 6, 9))
    pts = rng.uniform(EXT[:, 0], EXT[:, 1], size=(25, 3))
    got = sample_features(Triplane(torch.as_tensor(planes), EXT), pts).numpy()
    want = np.stack([_oracle(planes, EXT, p) for p in pts])
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_sampling_on_grid_node_returns_node_values():
    rng = np.random.default_rng(1)
    planes = rng.normal(size=(3, 2, 5, 5))
    # node (i, j) = (2, 3) on every plane: coordinates at 2/4 and 3/4 of each axis
    p = np.array([EXT[0, 0] + 0.5 * 2, EXT[1, 0] + 0.5 * 4, EXT[2, 0] + 0.5 * 1])
    got = sample_features(Triplane(torch.as_tensor(planes), EXT), p[None]).numpy()[0]
    frac = (p - EXT[:, 0]) / (EXT[:, 1] - EXT[:, 0]) * 4
    idx = np.round(frac).astype(int)
    want = np.concatenate([planes[k][:, idx[b], idx[a]] for k, (a, b) in enumerate(PLANE_AXES)])
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_sampling_constant_and_linear():
    pts = np.random.default_rng(2).uniform(-3, 3, size=(40, 3))
    const = Triplane(torch.full((3, 3, 4, 4), 0.7, dtype=DTYPE), EXT)
    np.testing.assert_allclose(sample_features(const, pts).numpy(), 0.7, atol=1e-15)
    rng = np.random.default_rng(3)
    A = torch.as_tensor(rng.normal(size=(3, 3, 4, 4)))
    B = torch.as_tensor(rng.normal(size=(3, 3, 4, 4)))
    lhs = sample_features(Triplane(2.0 * A - 0.5 * B, EXT), pts)
    rhs = 2.0 * sample_features(Triplane(A, EXT), pts) - 0.5 * sample_features(Triplane(B, EXT), pts)
    np.testing.assert_allclose(lhs.numpy(), rhs.numpy(), atol=1e-12)


@pytest.fixture(scope="module")
def codec():
    torch.manual_seed(0)
    return AvatarCodec(EXT, channels=32, resolution=(16, 16), hidden_channels=8)


def test_decoder_deterministic_and_sensitive(codec):
    z = torch.randn(64, generator=torch.Generator().manual_seed(1), dtype=DTYPE)
    a, b = codec.triplane(z).planes, codec.triplane(z.clone()).planes
    assert torch.equal(a, b)
    z2 = z.clone()
    z2[5] += 0.1
    assert not torch.equal(codec.triplane(z2).planes, a)
    assert codec.triplane(z).feature_dim == 96


def test_decoder_gradient_vs_finite_differences(codec):
    z = torch.randn(64, generator=torch.Generator().manual_seed(2), dtype=DTYPE)
    rep = check_op("decoder", lambda z: codec.triplane(z).planes.mean().reshape(1), {"z": z}, max_coords=None)
    assert rep.passed, rep.worst


def test_zero_initialized_heads_contract():
    heads = AttributeHeads(96, 16)
    f = torch.randn(10, 96, dtype=DTYPE)
    out = decode_attributes(f, heads)
    assert torch.all(out["dx"] == 0) and torch.all(out["c"] == 0.5)
    assert torch.allclose(out["s"], torch.full((10,), 0.02 * np.log(2) + 1e-3, dtype=DTYPE), atol=0)


def test_head_outputs_respect_bounds():
    heads = AttributeHeads(12, 8, zero_init=False)
    with torch.no_grad():
        for p in heads.parameters():
            p.normal_(0, 3.0)
    f = 5 * torch.randn(200, 12, dtype=DTYPE)
    dx, c, s = heads(f)
    assert dx.abs().max() <= 0.05 and c.min() >= 0 and c.max() <= 1 and s.min() >= 1e-3


def test_head_gradients_vs_finite_differences():
    heads = AttributeHeads(12, 8, zero_init=False)
    f = torch.randn(5, 12, generator=torch.Generator().manual_seed(3), dtype=DTYPE)

    def fn(f):
        dx, c, s = heads(f)
        return torch.cat([dx.reshape(-1), c.reshape(-1), s])
    assert check_op("heads", fn, {"f": f}, max_coords=None).passed


def test_static_avatar_reproduces_canonical_mesh(codec):
    mesh = build_canonical_body(BodyConfig())
    z = torch.randn(64, dtype=DTYPE)
    g = build_static_avatar(z, mesh, codec)
    assert len(g) == mesh.num_vertices
    assert torch.equal(g.positions, torch.as_tensor(mesh.vertices, dtype=DTYPE))


def test_body_extent_contains_vertices():
    mesh = build_canonical_body(BodyConfig(levels=0))
    ext = body_extent(mesh.vertices, margin=0.1)
    assert (mesh.vertices >= ext[:, 0]).all() and (mesh.vertices <= ext[:, 1]).all()
