"""Differentiable splatting of isotropic, opaque Gaussians.

Each Gaussian projects to a screen-space disc with standard deviation
``sigma = s * f / z`` pixels, truncated at ``K_CUTOFF * sigma``. Pixel weights
``w = exp(-|p - mu|^2 / (2 sigma^2))`` become alphas ``min(ALPHA_MAX, w)``
(opacity is fixed at one) and are composited front to back.

The compositing core is a ``torch.autograd.Function`` whose backward pass is
written out by hand in :func:`rasterize_backward`; projection and the
post-compositing normalizations are ordinary autograd code.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .body import DTYPE, Camera, ContractError

K_CUTOFF = 3.0
ALPHA_MAX = 0.999
NEAR_PLANE = 0.01
ACC_EPS = 1e-4
BACKGROUND = 1.0


@dataclass
class ScreenSplats:
    means2d: torch.Tensor  # (M, 2) pixels
    depths: torch.Tensor  # (M,) camera z
    sigmas: torch.Tensor  # (M,) pixels
    index: torch.Tensor  # (M,) rows of the input Gaussians that survived culling
    num_culled: int
    width: int
    height: int

    @property
    def radii(self) -> torch.Tensor:
        return K_CUTOFF * self.sigmas

    def __len__(self) -> int:
        return len(self.index)


@dataclass
class RenderTargets:
    rgb: torch.Tensor  # (H, W, 3)
    normal: torch.Tensor  # (H, W, 3), encoded as (n + 1) / 2
    depth: torch.Tensor  # (H, W)
    silhouette: torch.Tensor  # (H, W)
    extra: dict = field(default_factory=dict)

    def detach(self) -> "RenderTargets":
        return RenderTargets(self.rgb.detach(), self.normal.detach(), self.depth.detach(),
                             self.silhouette.detach(), {k: v.detach() for k, v in self.extra.items()})

    def numpy(self) -> dict:
        out = {"rgb": self.rgb, "normal": self.normal, "depth": self.depth,
               "silhouette": self.silhouette, **self.extra}
        return {k: v.detach().cpu().numpy() for k, v in out.items()}


def project_gaussians(positions, scales, camera: Camera) -> ScreenSplats:
    """Pinhole projection; splats behind the near plane or off-screen are culled."""
    x = torch.as_tensor(positions, dtype=DTYPE)
    s = torch.as_tensor(scales, dtype=DTYPE)
    R = torch.as_tensor(camera.R, dtype=DTYPE)
    t = torch.as_tensor(camera.t, dtype=DTYPE)
    cam = x @ R.T + t
    z = cam[:, 2]
    zd = z.detach()
    front = zd > NEAR_PLANE
    zsafe = torch.where(front, z, torch.ones_like(z))
    u = camera.fx * cam[:, 0] / zsafe + camera.cx
    v = camera.fy * cam[:, 1] / zsafe + camera.cy
    sigma = s * camera.fx / zsafe
    r = (K_CUTOFF * sigma).detach()
    ud, vd = u.detach(), v.detach()
    onscreen = ((ud + r >= -0.5) & (ud - r <= camera.width - 0.5)
                & (vd + r >= -0.5) & (vd - r <= camera.height - 0.5))
    keep = torch.nonzero(front & onscreen & (sigma.detach() > 0)).squeeze(1)
    return ScreenSplats(torch.stack([u, v], dim=1)[keep], z[keep], sigma[keep], keep,
                        int(len(x) - len(keep)), camera.width, camera.height)


# ---------------------------------------------------------------------------
# Compositing core


@dataclass
class _CompositeState:
    """Forward quantities retained for the analytic backward pass."""

    splat: torch.Tensor  # (Q,) splat index per (splat, pixel) pair
    row: torch.Tensor  # (Q,) active-pixel row per pair
    slot: torch.Tensor  # (Q,) depth slot within the pixel
    dx: torch.Tensor  # (Q,) pixel x - mean x
    dy: torch.Tensor
    w: torch.Tensor  # (Q,) unclamped Gaussian weight
    alpha: torch.Tensor  # (Pa, K) padded alphas
    t_excl: torch.Tensor  # (Pa, K) transmittance before each slot
    t_final: torch.Tensor  # (Pa,)
    payload: torch.Tensor  # (Pa, K, C) padded payloads
    pixels: torch.Tensor  # (Pa,) flat index of active pixels
    num_splats: int
    num_channels: int


def _pairs(means2d: torch.Tensor, sigmas: torch.Tensor, width: int, height: int):
    """Enumerate (splat, pixel) pairs within each splat's cutoff radius."""
    m = means2d.detach()
    r = K_CUTOFF * sigmas.detach()
    x0 = torch.clamp(torch.ceil(m[:, 0] - r), min=0).long()
    x1 = torch.clamp(torch.floor(m[:, 0] + r), max=width - 1).long()
    y0 = torch.clamp(torch.ceil(m[:, 1] - r), min=0).long()
    y1 = torch.clamp(torch.floor(m[:, 1] + r), max=height - 1).long()
    nx = (x1 - x0 + 1).clamp(min=0)
    ny = (y1 - y0 + 1).clamp(min=0)
    count = nx * ny
    splat = torch.repeat_interleave(torch.arange(len(m)), count)
    start = torch.cumsum(count, 0) - count
    local = torch.arange(int(count.sum())) - start[splat]
    px = x0[splat] + local % nx[splat]
    py = y0[splat] + torch.div(local, nx[splat], rounding_mode="floor")
    dx = px.to(DTYPE) - means2d[splat, 0]
    dy = py.to(DTYPE) - means2d[splat, 1]
    d2 = dx.detach() ** 2 + dy.detach() ** 2
    inside = d2 <= r[splat] ** 2
    return splat[inside], px[inside], py[inside]


def _depth_rank(depths: torch.Tensor, means2d: torch.Tensor) -> torch.Tensor:
    """Rank of each splat front to back; ties broken by screen position."""
    d = depths.detach().numpy()
    m = means2d.detach().numpy()
    order = np.lexsort((m[:, 1], m[:, 0], d))
    rank = np.empty(len(d), dtype=np.int64)
    rank[order] = np.arange(len(d))
    return torch.from_numpy(rank)


def composite_forward(means2d, sigmas, depths, payload, width: int, height: int):
    """Front-to-back compositing of ``payload`` (M, C).

    Returns ``(accumulated (H*W, C), final transmittance (H*W,), state)``.
    """
    M, C = payload.shape
    P = width * height
    splat, px, py = _pairs(means2d, sigmas, width, height)
    if len(splat) == 0:
        state = None
        return torch.zeros(P, C, dtype=DTYPE), torch.ones(P, dtype=DTYPE), state
    rank = _depth_rank(depths, means2d)
    pix = py * width + px
    key = pix * M + rank[splat]
    order = torch.argsort(key)
    splat, pix = splat[order], pix[order]
    pixels, row, counts = torch.unique_consecutive(pix, return_inverse=True, return_counts=True)
    first = torch.cumsum(counts, 0) - counts
    slot = torch.arange(len(splat)) - first[row]
    K = int(counts.max())
    Pa = len(pixels)

    with torch.no_grad():
        dx = (pix % width).to(DTYPE) - means2d[splat, 0]
        dy = torch.div(pix, width, rounding_mode="floor").to(DTYPE) - means2d[splat, 1]
        sig = sigmas[splat]
        w = torch.exp(-(dx ** 2 + dy ** 2) / (2 * sig ** 2))
        alpha = torch.zeros(Pa, K, dtype=DTYPE)
        alpha[row, slot] = torch.clamp(w, max=ALPHA_MAX)
        t_incl = torch.cumprod(1 - alpha, dim=1)
        t_excl = torch.cat([torch.ones(Pa, 1, dtype=DTYPE), t_incl[:, :-1]], dim=1)
        pay = torch.zeros(Pa, K, C, dtype=DTYPE)
        pay[row, slot] = payload[splat]
        acc_a = torch.einsum("pk,pkc->pc", alpha * t_excl, pay)
        acc = torch.zeros(P, C, dtype=DTYPE)
        acc[pixels] = acc_a
        trans = torch.ones(P, dtype=DTYPE)
        trans[pixels] = t_incl[:, -1]
    state = _CompositeState(splat, row, slot, dx, dy, w, alpha, t_excl, t_incl[:, -1], pay,
                            pixels, M, C)
    return acc, trans, state


def rasterize_backward(grad_acc: torch.Tensor, grad_trans: torch.Tensor, state: _CompositeState | None,
                       sigmas: torch.Tensor, num_splats: int | None = None):
    """Reverse of :func:`composite_forward`.

    Given upstream gradients of the accumulated payloads (H*W, C) and of the
    final transmittance (H*W,), returns gradients w.r.t. 2D means (M, 2),
    sigmas (M,) and payloads (M, C).
    """
    if state is None:
        if num_splats is None:
            raise ContractError("rasterize_backward needs the saved forward state")
        M = num_splats
        C = grad_acc.shape[1]
        return (torch.zeros(M, 2, dtype=DTYPE), torch.zeros(M, dtype=DTYPE),
                torch.zeros(M, C, dtype=DTYPE))
    if not isinstance(state, _CompositeState):
        raise ContractError("rasterize_backward needs the saved forward state")
    s = state
    g_acc = grad_acc[s.pixels]  # (Pa, C)
    g_t = grad_trans[s.pixels]  # (Pa,)
    weight = s.alpha * s.t_excl
    gc = torch.einsum("pc,pkc->pk", g_acc, s.payload)  # dL/d(weight)
    q = weight * gc
    behind = torch.flip(torch.cumsum(torch.flip(q, [1]), 1), [1]) - q
    tail = behind + (g_t * s.t_final)[:, None]
    d_alpha = s.t_excl * gc - tail / (1 - s.alpha)

    d_alpha_q = d_alpha[s.row, s.slot]
    d_w = torch.where(s.w < ALPHA_MAX, d_alpha_q, torch.zeros_like(d_alpha_q))
    sig = sigmas.detach()[s.splat]
    common = d_w * s.w / sig ** 2
    g_means = torch.zeros(s.num_splats, 2, dtype=DTYPE)
    g_means.index_add_(0, s.splat, torch.stack([common * s.dx, common * s.dy], dim=1))
    g_sig = torch.zeros(s.num_splats, dtype=DTYPE)
    g_sig.index_add_(0, s.splat, common * (s.dx ** 2 + s.dy ** 2) / sig)
    g_pay = torch.zeros(s.num_splats, s.num_channels, dtype=DTYPE)
    g_pay.index_add_(0, s.splat, weight[s.row, s.slot][:, None] * g_acc[s.row])
    return g_means, g_sig, g_pay


class _Composite(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means2d, sigmas, depths, payload, width, height):
        acc, trans, state = composite_forward(means2d, sigmas, depths, payload, width, height)
        ctx.state = state
        ctx.num_splats = payload.shape[0]
        ctx.save_for_backward(sigmas)
        return acc, trans

    @staticmethod
    def backward(ctx, grad_acc, grad_trans):
        (sigmas,) = ctx.saved_tensors
        g_m, g_s, g_p = _backward_impl(grad_acc, grad_trans, ctx.state, sigmas, ctx.num_splats)
        return g_m, g_s, None, g_p, None, None


# indirection so a corrupted backward can be injected as a negative control
_backward_impl = rasterize_backward


def composite(means2d, sigmas, depths, payload, width: int, height: int):
    """Differentiable compositing core: ``(accumulated (H*W, C), transmittance (H*W,))``."""
    return _Composite.apply(means2d, sigmas, depths, payload, width, height)


# ---------------------------------------------------------------------------
# Channel assembly


def rasterize(splats: ScreenSplats, payloads: dict[str, torch.Tensor],
              background: float = BACKGROUND) -> RenderTargets:
    """Composite per-splat payload channels into images.

    ``payloads`` holds per-splat tensors for ``rgb`` (M, 3) and optionally
    ``normal`` (M, 3, already encoded), ``depth`` (M,) and any extra channel.
    RGB is composited over a uniform background; normal, depth and extras are
    normalized by accumulated alpha where it exceeds ``ACC_EPS``.
    """
    W, H = splats.width, splats.height
    M = len(splats)
    names, chunks = [], []
    for name, val in payloads.items():
        val = torch.as_tensor(val, dtype=DTYPE)
        val = val.reshape(val.shape[0], int(np.prod(val.shape[1:])))
        if val.shape[0] != M:
            raise ContractError(f"payload {name!r} has {val.shape[0]} rows for {M} splats")
        names.append((name, val.shape[1]))
        chunks.append(val)
    if M == 0:
        acc = torch.zeros(H * W, sum(c for _, c in names), dtype=DTYPE)
        trans = torch.ones(H * W, dtype=DTYPE)
    else:
        acc, trans = composite(splats.means2d, splats.sigmas, splats.depths,
                               torch.cat(chunks, dim=1), W, H)
    coverage = 1 - trans
    ok = coverage > ACC_EPS
    safe = torch.where(ok, coverage, torch.ones_like(coverage))
    out, c0 = {}, 0
    for name, c in names:
        block = acc[:, c0:c0 + c]
        c0 += c
        if name == "rgb":
            img = block + trans[:, None] * background
        else:
            img = torch.where(ok[:, None], block / safe[:, None], torch.zeros_like(block))
        out[name] = img.reshape(H, W, c) if c > 1 or name in ("rgb", "normal") else img.reshape(H, W)
    rgb = out.pop("rgb", torch.full((H, W, 3), background, dtype=DTYPE))
    normal = out.pop("normal", torch.zeros(H, W, 3, dtype=DTYPE))
    depth = out.pop("depth", torch.zeros(H, W, dtype=DTYPE))
    return RenderTargets(rgb, normal, depth, coverage.reshape(H, W), out)


def render_channels(positions, colors, scales, normals, camera: Camera,
                    extra: dict[str, torch.Tensor] | None = None) -> RenderTargets:
    """Render RGB, encoded normals, depth and silhouette with one projection pass."""
    splats = project_gaussians(positions, scales, camera)
    idx = splats.index
    payloads = {"rgb": torch.as_tensor(colors, dtype=DTYPE)[idx]}
    if normals is not None:
        payloads["normal"] = (torch.as_tensor(normals, dtype=DTYPE)[idx] + 1) / 2
    payloads["depth"] = splats.depths
    for k, v in (extra or {}).items():
        payloads[k] = torch.as_tensor(v, dtype=DTYPE)[idx]
    return rasterize(splats, payloads)


def render_rgb(positions, colors, scales, camera: Camera) -> torch.Tensor:
    splats = project_gaussians(positions, scales, camera)
    return rasterize(splats, {"rgb": torch.as_tensor(colors, dtype=DTYPE)[splats.index]}).rgb


# ---------------------------------------------------------------------------
# Image files

FLT_MAGIC = b"FLT1"


def write_flt(path: str | Path, image) -> None:
    """Float32 planar image: magic ``FLT1``, then uint32 W, H, C, then C*H*W floats."""
    a = np.asarray(image, dtype=np.float32)
    if a.ndim == 2:
        a = a[:, :, None]
    H, W, C = a.shape
    with open(path, "wb") as f:
        f.write(FLT_MAGIC + struct.pack("<III", W, H, C))
        f.write(np.ascontiguousarray(a.transpose(2, 0, 1)).astype("<f4").tobytes())


def read_flt(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FLT_MAGIC:
        raise ValueError(f"{path}: not a FLT1 image")
    W, H, C = struct.unpack("<III", data[4:16])
    a = np.frombuffer(data[16:], dtype="<f4").reshape(C, H, W).transpose(1, 2, 0)
    return a[:, :, 0].copy() if C == 1 else a.copy()


def write_png(path: str | Path, image) -> None:
    from PIL import Image

    a = np.asarray(image, dtype=np.float64)
    a = np.clip(np.rint(a * 255), 0, 255).astype(np.uint8)
    Image.fromarray(a).save(path)


def read_png(path: str | Path) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path), dtype=np.float64) / 255.0
