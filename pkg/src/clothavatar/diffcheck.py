"""Central finite differences against analytic gradients, plus a registry of every differentiable op."""

from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from . import render
from .body import DTYPE, BodyConfig, Camera, Pose, build_canonical_body, lbs_deform, vertex_normals

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4
BOUNDARY_TOL = 1e-3
REL_FLOOR = 1e-8


class NonFiniteValue(ArithmeticError):
    def __init__(self, index: int, value: float):
        super().__init__(f"function is not finite ({value}) when perturbing coordinate {index}")
        self.index = index


def finite_diff(f: Callable[[torch.Tensor], float], x, eps: float = DEFAULT_EPS,
                coords=None) -> torch.Tensor:
    """Central differences ``(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`` per coordinate.

    ``coords`` restricts the estimate to a subset of flat indices; the others stay 0.
    """
    x = torch.as_tensor(x, dtype=DTYPE).detach().clone().reshape(-1)
    grad = torch.zeros_like(x)
    idx = range(x.numel()) if coords is None else coords
    for i in idx:
        i = int(i)
        orig = x[i].item()
        x[i] = orig + eps
        fp = float(f(x))
        x[i] = orig - eps
        fm = float(f(x))
        x[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteValue(i, fp if not math.isfinite(fp) else fm)
        grad[i] = (fp - fm) / (2 * eps)
    return grad


@dataclass
class ParamError:
    max_rel: float
    max_abs: float
    argmax: int
    checked: int


@dataclass
class GradReport:
    name: str
    params: dict[str, ParamError]
    tol_rel: float
    passed: bool
    worst: list = field(default_factory=list)  # (param, index, analytic, numeric, rel)
    flagged: tuple | None = None  # (param, coordinate) where f was not finite
    seconds: float = 0.0

    @property
    def max_rel(self) -> float:
        return max((p.max_rel for p in self.params.values()), default=0.0)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<28s} max_rel={self.max_rel:.2e} tol={self.tol_rel:.0e} ({self.seconds:.1f}s)"


def relative_error(a: torch.Tensor, n: torch.Tensor) -> torch.Tensor:
    return (a - n).abs() / torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, REL_FLOOR))


def check_op(name: str, fn: Callable[..., torch.Tensor], inputs: dict[str, torch.Tensor],
             tol_rel: float = DEFAULT_TOL, eps: float = DEFAULT_EPS, max_coords: int | None = 40,
             seed: int = 0, weights: torch.Tensor | None = None) -> GradReport:
    """Compare autograd against finite differences for every tensor in ``inputs``.

    Non-scalar outputs are reduced with fixed random weights. At most
    ``max_coords`` coordinates per input are probed (a seeded random subset).
    """
    t0 = time.perf_counter()
    base = {k: torch.as_tensor(v, dtype=DTYPE).detach().clone() for k, v in inputs.items()}
    gen = torch.Generator().manual_seed(seed)
    out0 = fn(**base)
    if weights is None and out0.numel() > 1:
        weights = torch.randn(out0.shape, generator=gen, dtype=DTYPE)

    def scalar(out):
        return out.sum() if weights is None else (out * weights).sum()

    leaves = {k: v.clone().requires_grad_(True) for k, v in base.items()}
    grads = torch.autograd.grad(scalar(fn(**leaves)), list(leaves.values()), allow_unused=True)
    params, worst, passed, flagged = {}, [], True, None
    for (k, v), g in zip(base.items(), grads):
        analytic = torch.zeros(v.numel(), dtype=DTYPE) if g is None else g.detach().reshape(-1)
        n = v.numel()
        coords = np.arange(n) if max_coords is None or n <= max_coords else \
            np.sort(np.random.default_rng(seed).choice(n, max_coords, replace=False))

        def f(flat, k=k, shape=v.shape):
            args = dict(base)
            args[k] = flat.reshape(shape)
            with torch.no_grad():
                return float(scalar(fn(**args)))

        try:
            numeric = finite_diff(f, v, eps, coords)
        except NonFiniteValue as e:
            passed, flagged = False, (k, e.index)
            params[k] = ParamError(math.inf, math.inf, e.index, 0)
            continue
        c = torch.as_tensor(coords, dtype=torch.long)
        rel = relative_error(analytic[c], numeric[c])
        ab = (analytic[c] - numeric[c]).abs()
        j = int(rel.argmax()) if len(c) else 0
        params[k] = ParamError(float(rel.max()) if len(c) else 0.0, float(ab.max()) if len(c) else 0.0,
                               int(c[j]) if len(c) else -1, len(c))
        if len(c) and float(rel.max()) > tol_rel:
            passed = False
            for jj in torch.argsort(rel, descending=True)[:5]:
                if float(rel[jj]) > tol_rel:
                    worst.append((k, int(c[jj]), float(analytic[c[jj]]), float(numeric[c[jj]]), float(rel[jj])))
    return GradReport(name, params, tol_rel, passed, worst, flagged, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Registry


@dataclass
class RegisteredOp:
    name: str
    build: Callable[[], tuple[Callable, dict]]
    tol_rel: float = DEFAULT_TOL
    eps: float = DEFAULT_EPS
    max_coords: int | None = 40

    def run(self, seed: int = 0) -> GradReport:
        fn, inputs = self.build()
        return check_op(self.name, fn, inputs, self.tol_rel, self.eps, self.max_coords, seed)


REGISTRY: dict[str, RegisteredOp] = {}


def register(name: str, tol_rel: float = DEFAULT_TOL, eps: float = DEFAULT_EPS, max_coords: int | None = 40):
    def deco(build):
        REGISTRY[name] = RegisteredOp(name, build, tol_rel, eps, max_coords)
        return build
    return deco


def _rng(seed=0):
    return torch.Generator().manual_seed(seed)


def _small_camera(size: int = 16) -> Camera:
    return Camera.look_at(np.array([0.0, 0.0, 2.0]), np.zeros(3), size, size, fov_y=40.0)


def splat_scene(seed: int = 0, count: int = 5, size: int = 16):
    """A few Gaussians in front of a small camera, with margins away from the 3-sigma cutoff."""
    g = _rng(seed)
    pos = (torch.rand(count, 3, generator=g, dtype=DTYPE) - 0.5) * torch.tensor([0.5, 0.5, 0.3], dtype=DTYPE)
    scales = 0.04 + 0.04 * torch.rand(count, generator=g, dtype=DTYPE)
    colors = torch.rand(count, 3, generator=g, dtype=DTYPE)
    normals = torch.nn.functional.normalize(torch.randn(count, 3, generator=g, dtype=DTYPE), dim=1)
    return pos, scales, colors, normals, _small_camera(size)


def _render_stack(pos, scales, colors, normals, camera):
    rt = render.render_channels(pos, colors, scales, normals, camera)
    return torch.cat([rt.rgb.reshape(-1), rt.normal.reshape(-1), rt.depth.reshape(-1), rt.silhouette.reshape(-1)])


def _scene_is_clear(pos, scales, camera, margin: float = 0.02) -> bool:
    """No pixel center sits within ``margin`` sigmas of a splat's support edge."""
    s = render.project_gaussians(pos, scales, camera)
    ys, xs = torch.meshgrid(torch.arange(camera.height, dtype=DTYPE), torch.arange(camera.width, dtype=DTYPE),
                            indexing="ij")
    pix = torch.stack([xs.reshape(-1), ys.reshape(-1)], 1)
    d = (pix[None] - s.means2d[:, None]).norm(dim=-1) / s.sigmas[:, None]
    return bool(((d - render.K_CUTOFF).abs() > margin).all())


def clear_scene(seed: int = 0, count: int = 5, size: int = 16):
    for s in range(seed, seed + 1000):
        scene = splat_scene(s, count, size)
        if _scene_is_clear(scene[0], scene[1], scene[4]):
            return scene
    raise RuntimeError("no clear scene found")


@register("rasterize")
def _rasterize_op():
    pos, scales, colors, normals, cam = clear_scene()
    return (lambda pos, scales, colors, normals: _render_stack(pos, scales, colors, normals, cam),
            {"pos": pos, "scales": scales, "colors": colors, "normals": normals})


@register("rasterize_boundary", tol_rel=BOUNDARY_TOL, eps=1e-6)
def _rasterize_boundary_op():
    # random scene without the clearance filter: pixels may sit near the support edge
    pos, scales, colors, normals, cam = splat_scene(7, 8, 20)
    return (lambda pos, scales, colors: render.render_rgb(pos, colors, scales, cam),
            {"pos": pos, "scales": scales, "colors": colors})


@register("project_gaussians")
def _projection_op():
    pos, scales, _, _, cam = splat_scene(1)

    def fn(pos, scales):
        s = render.project_gaussians(pos, scales, cam)
        return torch.cat([s.means2d.reshape(-1), s.sigmas, s.depths])
    return fn, {"pos": pos, "scales": scales}


def _tiny_body():
    return build_canonical_body(BodyConfig(levels=0))


@register("lbs_deform")
def _lbs_op():
    mesh = _tiny_body()
    g = _rng(2)
    idx = np.arange(0, mesh.num_vertices, max(1, mesh.num_vertices // 12))[:12]
    pose = Pose(torch.randn(mesh.num_joints, 3, generator=g, dtype=DTYPE).numpy() * 0.4, np.array([0.1, 0.0, -0.2]))
    w = mesh.skin_weights[idx]

    class Sub:  # skeleton view with the selected vertices' weights
        joints, parents, skin_weights = mesh.joints, mesh.parents, w

    def fn(verts, offsets):
        return lbs_deform(verts, offsets, pose, Sub, w)
    return fn, {"verts": torch.as_tensor(mesh.vertices[idx]),
                "offsets": 0.01 * torch.randn(len(idx), 3, generator=g, dtype=DTYPE)}


@register("vertex_normals")
def _normals_op():
    mesh = _tiny_body()
    faces = mesh.faces[:40]
    used = np.unique(faces)
    remap = -np.ones(mesh.num_vertices, dtype=int)
    remap[used] = np.arange(len(used))
    return (lambda v: vertex_normals(v, remap[faces]), {"v": torch.as_tensor(mesh.vertices[used])})


def _codec(channels=4, res=8):
    from .codec import AvatarCodec
    torch.manual_seed(3)
    return AvatarCodec(np.array([[-1.0, 1.0]] * 3), channels, (res, res), 4, head_hidden=8)


@register("triplane_decoder")
def _decoder_op():
    codec = _codec()
    z = 0.5 * torch.randn(64, generator=_rng(4), dtype=DTYPE)
    return (lambda z: codec.triplane(z).planes.mean().reshape(1)), {"z": z}


def _randomize_heads(heads, seed=5):
    g = _rng(seed)
    with torch.no_grad():
        for p in heads.parameters():
            p.copy_(0.3 * torch.randn(p.shape, generator=g, dtype=DTYPE))


@register("attribute_heads")
def _heads_op():
    from .codec import AttributeHeads
    heads = AttributeHeads(12, 8)
    _randomize_heads(heads)
    feats = torch.randn(6, 12, generator=_rng(6), dtype=DTYPE)

    def fn(feats):
        dx, c, s = heads(feats)
        return torch.cat([dx.reshape(-1), c.reshape(-1), s.reshape(-1)])
    return fn, {"feats": feats}


@register("triplane_sampling")
def _sampling_op():
    from .codec import Triplane, sample_features
    planes = torch.randn(3, 4, 8, 8, generator=_rng(7), dtype=DTYPE)
    pts = (torch.rand(6, 3, generator=_rng(8), dtype=DTYPE) - 0.5) * 1.4
    ext = np.array([[-1.0, 1.0]] * 3)
    return (lambda planes, pts: sample_features(Triplane(planes, ext), pts)), {"planes": planes, "pts": pts}


@register("codec_render_chain", tol_rel=1e-3)
def _chain_op():
    codec = _codec()
    _randomize_heads(codec.heads, 9)
    with torch.no_grad():
        for p in codec.heads.parameters():
            p.mul_(0.3)
    mesh = _tiny_body()
    verts = mesh.vertices[::max(1, mesh.num_vertices // 30)][:30] * np.array([1.0, 1.0, 1.0])
    cam = Camera.look_at(np.array([0.0, 0.0, 3.5]), np.zeros(3), 16, 16, fov_y=40.0)
    z = 0.5 * torch.randn(64, generator=_rng(10), dtype=DTYPE)

    def fn(z):
        g, _, _ = codec.static_avatar(z, verts)
        return render.render_rgb(g.positions, g.colors, g.scales * 3, cam)
    return fn, {"z": z}


def _loss_images(seed=11, size=12):
    g = _rng(seed)
    return (torch.rand(size, size, 3, generator=g, dtype=DTYPE), torch.rand(size, size, 3, generator=g, dtype=DTYPE))


@register("loss_rgb")
def _l1_op():
    from .losses import rendering_loss
    p, t = _loss_images()
    return (lambda pred: rendering_loss(pred, t)["rgb"].reshape(1)), {"pred": p}


@register("loss_ssim")
def _ssim_op():
    from .losses import ssim
    p, t = _loss_images(12)
    return (lambda pred: (1 - ssim(pred, t)).reshape(1)), {"pred": p}


@register("loss_perceptual")
def _perc_op():
    from .losses import pyramid_gradient_distance
    p, t = _loss_images(13, 16)
    return (lambda pred: pyramid_gradient_distance(pred, t).reshape(1)), {"pred": p}


@register("loss_cloth")
def _cloth_op():
    from .losses import cloth_loss
    p, t = _loss_images(14)
    mask = torch.rand(12, 12, generator=_rng(15), dtype=DTYPE) > 0.5
    return (lambda pred: cloth_loss(pred, t, mask).reshape(1)), {"pred": p}


@register("loss_geometry")
def _geo_op():
    from .losses import geometry_loss
    g = _rng(16)
    n_gt = torch.rand(8, 8, 3, generator=g, dtype=DTYPE)
    d_gt = torch.rand(8, 8, generator=g, dtype=DTYPE)
    s_gt = (torch.rand(8, 8, generator=g, dtype=DTYPE) > 0.3).to(DTYPE)
    # keep predicted silhouettes away from the 0.5 mask threshold
    s_pred = torch.where(torch.rand(8, 8, generator=g, dtype=DTYPE) > 0.3, 0.9, 0.1).to(DTYPE)
    return (lambda n, d, s: geometry_loss(n, n_gt, d, d_gt, s, s_gt).reshape(1),
            {"n": torch.rand(8, 8, 3, generator=g, dtype=DTYPE), "d": torch.rand(8, 8, generator=g, dtype=DTYPE),
             "s": s_pred})


@register("loss_temporal")
def _temp_op():
    from .closim import OffsetSequence
    from .losses import temporal_loss
    flat = 0.05 * torch.randn(3, 5, 7, generator=_rng(17), dtype=DTYPE)
    return (lambda flat: temporal_loss(OffsetSequence.from_flat(flat)).reshape(1)), {"flat": flat}


def _small_graph(n=8):
    from .closim import ClothGraph
    edges = [(i, i + 1) for i in range(n - 1)] + [(0, n // 2), (1, n - 1)]
    return ClothGraph(np.arange(n), np.array(edges))


@register("gcn_encoder")
def _gcn_op():
    from .closim import GCNEncoder
    torch.manual_seed(18)
    gcn = GCNEncoder(10, 6, 5)
    graph = _small_graph()
    x = torch.randn(8, 10, generator=_rng(19), dtype=DTYPE)
    return (lambda x: gcn(x, graph.adjacency)), {"x": x}


@register("gru_cell")
def _gru_op():
    from .closim import GRUCell
    torch.manual_seed(20)
    cell = GRUCell(6, 5)
    g = _rng(21)
    return (lambda x, h: cell(x, h)), {"x": torch.randn(4, 6, generator=g, dtype=DTYPE),
                                        "h": torch.randn(4, 5, generator=g, dtype=DTYPE)}


@register("offset_head")
def _head_op():
    from .closim import OffsetHead
    head = OffsetHead(5, 6)
    _randomize_heads(head, 22)
    return (lambda h: head(h)), {"h": torch.randn(4, 5, generator=_rng(23), dtype=DTYPE)}


@register("offset_interpolation")
def _interp_op():
    from .closim import interpolate_offsets
    g = _rng(24)

    def fn(a, b):
        out = interpolate_offsets((a[:, :3], a[:, 3:6], a[:, 6]), (b[:, :3], b[:, 3:6], b[:, 6]), 0.3)
        return torch.cat([o.reshape(-1) for o in out])
    return fn, {"a": torch.randn(4, 7, generator=g, dtype=DTYPE), "b": torch.randn(4, 7, generator=g, dtype=DTYPE)}


def _closim_setup():
    from .closim import CloSim, build_window
    torch.manual_seed(25)
    sim = CloSim(12, 126, 16, 8)
    _randomize_heads(sim.head, 26)
    mesh = _tiny_body()
    g = _rng(27)
    poses = [Pose(0.3 * torch.randn(mesh.num_joints, 3, generator=g, dtype=DTYPE).numpy(), np.zeros(3), t / 10)
             for t in range(5)]
    window = build_window(poses, 0.2, 0.1)
    return sim, window, _small_graph(6)


@register("closim_chain")
def _closim_op():
    sim, window, graph = _closim_setup()
    feats = torch.randn(6, 12, generator=_rng(28), dtype=DTYPE)
    return (lambda feats: sim(feats, window, graph).flat()), {"feats": feats}


@register("closim_gcn_weight", tol_rel=1e-3)
def _closim_weight_op():
    sim, window, graph = _closim_setup()
    feats = torch.randn(6, 12, generator=_rng(29), dtype=DTYPE)
    params = dict(sim.named_parameters())

    def fn(w):
        return torch.func.functional_call(sim, {**params, "gcn.conv1.weight": w}, (feats, window, graph)).flat()
    return fn, {"w": params["gcn.conv1.weight"].detach().clone()}


# ---------------------------------------------------------------------------
# Negative control and suite


def _flipped_backward(*args, **kwargs):
    g_m, g_s, g_p = render.rasterize_backward(*args, **kwargs)
    return -g_m, -g_s, -g_p


@contextlib.contextmanager
def corrupted_rasterizer():
    """Swap in a sign-flipped rasterizer backward."""
    saved = render._backward_impl
    render._backward_impl = _flipped_backward
    try:
        yield
    finally:
        render._backward_impl = saved


def negative_control() -> GradReport:
    with corrupted_rasterizer():
        rep = REGISTRY["rasterize"].run()
    rep.name = "negative_control(sign-flip)"
    return rep


def run_registry(names=None, include_control: bool = True) -> tuple[list[GradReport], bool]:
    """Run every registered check; success means all pass and the control fails."""
    reports = [REGISTRY[n].run() for n in (names or REGISTRY)]
    ok = all(r.passed for r in reports)
    if include_control:
        ctrl = negative_control()
        reports.append(ctrl)
        ok = ok and not ctrl.passed
    return reports, ok
