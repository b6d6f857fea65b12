"""Training objectives: rendering, cloth, geometry, temporal and auxiliary terms."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol

import torch
import torch.nn.functional as F

from .body import DTYPE, ContractError

LAMBDA_NORMAL = 5.0
LAMBDA_DEPTH = 1.0
LAMBDA_SILHOUETTE = 2.0
LAMBDA_TEMPORAL = 0.1


class TrainingAbort(RuntimeError):
    """A loss term became non-finite."""

    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term


@dataclass
class LossWeights:
    rgb: float = 0.8
    ssim: float = 0.2
    perceptual: float = 0.1
    cloth: float = 0.5
    normal: float = LAMBDA_NORMAL
    depth: float = LAMBDA_DEPTH
    silhouette: float = LAMBDA_SILHOUETTE
    temporal: float = LAMBDA_TEMPORAL
    reg: float = 0.01
    face_hands: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0")

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


@dataclass
class LossReport:
    terms: dict[str, torch.Tensor]
    weights: dict[str, float]
    total: torch.Tensor = field(default=None)

    def values(self) -> dict[str, float]:
        out = {k: float(torch.as_tensor(v).detach()) for k, v in self.terms.items()}
        out["total"] = float(self.total.detach())
        return out


def _check_pair(pred: torch.Tensor, gt: torch.Tensor) -> None:
    if pred.shape != gt.shape:
        raise ContractError(f"image shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")


def gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=DTYPE) - (size - 1) / 2
    g = torch.exp(-x ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(pred: torch.Tensor, gt: torch.Tensor, window: int = 11, sigma: float = 1.5,
         c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> torch.Tensor:
    """Mean SSIM of (H, W[, C]) images in [0, 1] with a Gaussian window, zero padding."""
    _check_pair(pred, gt)
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    C = pred.shape[-1]
    x = pred.permute(2, 0, 1)[None]
    y = gt.permute(2, 0, 1)[None]
    k = gaussian_window(window, sigma).expand(C, 1, window, window)
    pad = window // 2

    def blur(a):
        return F.conv2d(a, k, padding=pad, groups=C)

    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx ** 2
    syy = blur(y * y) - my ** 2
    sxy = blur(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx ** 2 + my ** 2 + c1) * (sxx + syy + c2)
    return (num / den).mean()


class PerceptualMetric(Protocol):
    def __call__(self, pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor: ...


def pyramid_gradient_distance(pred: torch.Tensor, gt: torch.Tensor, levels: int = 3,
                              eps: float = 1e-6) -> torch.Tensor:
    """L1 between gradient magnitudes over a 2x average-pooling pyramid."""
    _check_pair(pred, gt)
    x = pred.permute(2, 0, 1)[None]
    y = gt.permute(2, 0, 1)[None]
    total = pred.new_zeros(())
    for lvl in range(levels):
        if lvl:
            x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)

        def mag(a):
            gx = a[..., :, 1:] - a[..., :, :-1]
            gy = a[..., 1:, :] - a[..., :-1, :]
            return torch.sqrt(gx[..., :-1, :] ** 2 + gy[..., :, :-1] ** 2 + eps ** 2)

        total = total + (mag(x) - mag(y)).abs().mean()
    return total / levels


def rendering_loss(pred: torch.Tensor, gt: torch.Tensor,
                   perceptual: Callable | None = None) -> dict[str, torch.Tensor]:
    _check_pair(pred, gt)
    perc = perceptual or pyramid_gradient_distance
    return {"rgb": (pred - gt).abs().mean(), "ssim": 1 - ssim(pred, gt), "perceptual": perc(pred, gt)}


def cloth_loss(cloth_render: torch.Tensor, gt_image: torch.Tensor, cloth_mask: torch.Tensor) -> torch.Tensor:
    """L1 between a cloth-only render and the ground truth whitened outside the mask."""
    _check_pair(cloth_render, gt_image)
    mask = torch.as_tensor(cloth_mask).bool()
    if not bool(mask.any()):
        warnings.warn("empty cloth mask; cloth loss is zero", RuntimeWarning)
        return cloth_render.new_zeros(())
    target = torch.where(mask[..., None], gt_image, torch.ones_like(gt_image))
    return (cloth_render - target).abs().mean()


def decode_normals(encoded: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    n = 2 * encoded - 1
    return n / n.norm(dim=-1, keepdim=True).clamp_min(eps)


def geometry_terms(N_pred, N_gt, D_pred, D_gt, S_pred, S_gt) -> dict[str, torch.Tensor]:
    """Unweighted normal (1 - cosine), depth (L1) and silhouette (squared) terms.

    Normals arrive (n + 1) / 2 encoded; normal and depth terms average over the
    pixels where both silhouettes exceed 0.5, the silhouette term over all pixels.
    """
    joint = (S_pred.detach() > 0.5) & (torch.as_tensor(S_gt) > 0.5)
    l_s = ((S_pred - S_gt) ** 2).mean()
    if not bool(joint.any()):
        zero = S_pred.new_zeros(())
        return {"normal": zero, "depth": zero, "silhouette": l_s}
    cos = (decode_normals(N_pred[joint]) * decode_normals(N_gt[joint])).sum(-1)
    l_n = (1 - cos).mean()
    l_d = (D_pred[joint] - D_gt[joint]).abs().mean()
    return {"normal": l_n, "depth": l_d, "silhouette": l_s}


def geometry_loss(N_pred, N_gt, D_pred, D_gt, S_pred, S_gt, lambda_normal: float = LAMBDA_NORMAL,
                  lambda_depth: float = LAMBDA_DEPTH, lambda_sil: float = LAMBDA_SILHOUETTE) -> torch.Tensor:
    t = geometry_terms(N_pred, N_gt, D_pred, D_gt, S_pred, S_gt)
    return lambda_normal * t["normal"] + lambda_depth * t["depth"] + lambda_sil * t["silhouette"]


def temporal_difference(offsets) -> torch.Tensor:
    """Sum over consecutive frame gaps of point-mean squared offset differences."""
    dx, dc, ds = offsets.dx, offsets.dc, offsets.ds
    if dx.shape[0] < 2:
        warnings.warn("temporal loss needs at least two frames", RuntimeWarning)
        return dx.new_zeros(())
    ddx = (dx[1:] - dx[:-1]).pow(2).sum(-1).mean(-1)
    ddc = (dc[1:] - dc[:-1]).pow(2).sum(-1).mean(-1)
    dds = (ds[1:] - ds[:-1]).pow(2).mean(-1)
    return (ddx + ddc + dds).sum()


def temporal_loss(offsets, lambda_temp: float = LAMBDA_TEMPORAL) -> torch.Tensor:
    return lambda_temp * temporal_difference(offsets)


def auxiliary_losses(all_offsets, face_positions=None, hand_positions=None, gt_face=None,
                     gt_hand=None) -> dict[str, torch.Tensor]:
    """Offset L2 penalties and face/hand vertex supervision."""
    if all_offsets is None:
        zero = torch.zeros((), dtype=DTYPE)
        out = {"reg_x": zero, "reg_c": zero, "reg_s": zero}
    else:
        out = {"reg_x": all_offsets.dx.pow(2).sum(-1).mean(),
               "reg_c": all_offsets.dc.pow(2).sum(-1).mean(),
               "reg_s": all_offsets.ds.pow(2).mean()}
    out["reg"] = out["reg_x"] + out["reg_c"] + out["reg_s"]
    preds = [p for p in (face_positions, hand_positions) if p is not None and len(p)]
    gts = [g for p, g in ((face_positions, gt_face), (hand_positions, gt_hand)) if p is not None and len(p)]
    if preds:
        p = torch.cat([torch.as_tensor(x, dtype=DTYPE) for x in preds])
        g = torch.cat([torch.as_tensor(x, dtype=DTYPE) for x in gts])
        out["face_hands"] = (p - g).pow(2).sum(-1).mean()
    else:
        out["face_hands"] = torch.zeros((), dtype=DTYPE)
    return out


def total_loss(terms: dict[str, torch.Tensor], weights: LossWeights | dict) -> LossReport:
    """Weighted sum of the named terms; terms without a weight are reported only."""
    w = weights.as_dict() if isinstance(weights, LossWeights) else dict(weights)
    total = torch.zeros((), dtype=DTYPE)
    for name, val in terms.items():
        v = float(val.detach()) if torch.is_tensor(val) else float(val)
        if not math.isfinite(v):
            raise TrainingAbort(name, v)
        if name in w and w[name] != 0:
            total = total + w[name] * val
    return LossReport(dict(terms), w, total)
