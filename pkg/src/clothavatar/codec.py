"""Identity latent code -> triplane -> per-vertex features -> canonical Gaussians."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .body import DTYPE, SkinnedMesh

LATENT_DIM = 64
# plane T^x spans (y, z), T^y spans (x, z), T^z spans (x, y); first axis -> width
PLANE_AXES = ((1, 2), (0, 2), (0, 1))


@dataclass
class Triplane:
    planes: torch.Tensor  # (3, C, H, W)
    extent: np.ndarray  # (3, 2) canonical bounding box mapped onto the grids

    @property
    def channels(self) -> int:
        return self.planes.shape[1]

    @property
    def feature_dim(self) -> int:
        return 3 * self.planes.shape[1]


@dataclass
class GaussianSet:
    """Isotropic Gaussians with fixed unit opacity."""

    positions: torch.Tensor  # (N, 3) canonical, meters
    colors: torch.Tensor  # (N, 3) in [0, 1]
    scales: torch.Tensor  # (N,) meters
    labels: object = None  # LabelField, when decomposed

    opacity = 1.0

    def __len__(self) -> int:
        return self.positions.shape[0]

    def subset(self, idx) -> "GaussianSet":
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        return GaussianSet(self.positions[idx], self.colors[idx], self.scales[idx])

    def detach(self) -> "GaussianSet":
        return GaussianSet(self.positions.detach(), self.colors.detach(), self.scales.detach(),
                           self.labels)


def body_extent(vertices: np.ndarray, margin: float = 0.1) -> np.ndarray:
    lo = vertices.min(axis=0) - margin
    hi = vertices.max(axis=0) + margin
    return np.stack([lo, hi], axis=1)


class TriplaneDecoder(nn.Module):
    """Shared decoder: dense layer, reshape, then per-plane upsampling convolutions.

    The three planes are decoded in one grouped convolution stack so each plane
    has its own filters.
    """

    def __init__(self, latent_dim: int = LATENT_DIM, channels: int = 32, resolution=(128, 128),
                 hidden_channels: int = 16, upsample_stages: int = 2):
        super().__init__()
        H, W = resolution
        f = 2 ** upsample_stages
        if H % f or W % f:
            raise ValueError(f"resolution {resolution} not divisible by {f}")
        self.channels = channels
        self.resolution = (H, W)
        self.hidden = hidden_channels
        self.base = (H // f, W // f)
        self.fc = nn.Linear(latent_dim, 3 * hidden_channels * self.base[0] * self.base[1], dtype=DTYPE)
        convs = []
        for k in range(upsample_stages):
            c_out = channels if k == upsample_stages - 1 else hidden_channels
            convs.append(nn.Conv2d(3 * hidden_channels, 3 * c_out, 3, padding=1, groups=3, dtype=DTYPE))
        self.convs = nn.ModuleList(convs)
        if not convs:
            self.head = nn.Conv2d(3 * hidden_channels, 3 * channels, 1, groups=3, dtype=DTYPE)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.fc(z.reshape(1, -1)).reshape(1, 3 * self.hidden, *self.base)
        if not self.convs:
            h = self.head(h)
        for k, conv in enumerate(self.convs):
            h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
            h = conv(h)
            if k < len(self.convs) - 1:
                h = F.silu(h)
        return h.reshape(3, self.channels, *self.resolution)


def decode_triplane(z, decoder: TriplaneDecoder, extent: np.ndarray) -> Triplane:
    z = torch.as_tensor(z, dtype=DTYPE)
    return Triplane(decoder(z), np.asarray(extent, dtype=np.float64))


def normalize_points(points: torch.Tensor, extent: np.ndarray) -> torch.Tensor:
    lo = torch.as_tensor(extent[:, 0], dtype=DTYPE)
    hi = torch.as_tensor(extent[:, 1], dtype=DTYPE)
    return (2 * (points - lo) / (hi - lo) - 1).clamp(-1, 1)


def sample_features(triplane: Triplane, points) -> torch.Tensor:
    """Bilinear samples from the three planes, concatenated to (N, 3C).

    Grid nodes span the extent corner to corner; points outside it are clamped
    to the border.
    """
    p = normalize_points(torch.as_tensor(points, dtype=DTYPE), triplane.extent)
    feats = []
    for k, (a, b) in enumerate(PLANE_AXES):
        grid = torch.stack([p[:, a], p[:, b]], dim=1).reshape(1, -1, 1, 2)
        s = F.grid_sample(triplane.planes[k:k + 1], grid, mode="bilinear",
                          padding_mode="border", align_corners=True)
        feats.append(s[0, :, :, 0].T)
    return torch.cat(feats, dim=1)


class AttributeHeads(nn.Module):
    """Geometry head (bounded displacement) and appearance head (color, scale).

    ``scale = scale_unit * softplus(raw) + min_scale``.
    """

    def __init__(self, feature_dim: int = 96, hidden: int = 64, max_offset: float = 0.05,
                 min_scale: float = 1e-3, scale_unit: float = 0.02, zero_init: bool = True):
        super().__init__()
        self.max_offset = max_offset
        self.min_scale = min_scale
        self.scale_unit = scale_unit
        self.geometry = nn.Sequential(
            nn.Linear(feature_dim, hidden, dtype=DTYPE), nn.SiLU(),
            nn.Linear(hidden, hidden, dtype=DTYPE), nn.SiLU(),
            nn.Linear(hidden, 3, dtype=DTYPE))
        self.appearance = nn.Sequential(
            nn.Linear(feature_dim, hidden, dtype=DTYPE), nn.SiLU(),
            nn.Linear(hidden, hidden, dtype=DTYPE), nn.SiLU(),
            nn.Linear(hidden, 4, dtype=DTYPE))
        if zero_init:
            for head in (self.geometry, self.appearance):
                nn.init.zeros_(head[-1].weight)
                nn.init.zeros_(head[-1].bias)

    def forward(self, features: torch.Tensor):
        dx = self.max_offset * torch.tanh(self.geometry(features))
        app = self.appearance(features)
        color = torch.sigmoid(app[:, :3])
        scale = self.scale_unit * F.softplus(app[:, 3]) + self.min_scale
        return dx, color, scale


def decode_attributes(features, heads: AttributeHeads) -> dict[str, torch.Tensor]:
    dx, c, s = heads(torch.as_tensor(features, dtype=DTYPE))
    return {"dx": dx, "c": c, "s": s}


class AvatarCodec(nn.Module):
    """Decoder and attribute heads shared by every subject."""

    def __init__(self, extent: np.ndarray, channels: int = 32, resolution=(128, 128),
                 hidden_channels: int = 16, upsample_stages: int = 2, head_hidden: int = 64,
                 max_offset: float = 0.05, min_scale: float = 1e-3, scale_unit: float = 0.02):
        super().__init__()
        self.extent = np.asarray(extent, dtype=np.float64)
        self.decoder = TriplaneDecoder(LATENT_DIM, channels, resolution, hidden_channels,
                                       upsample_stages)
        self.heads = AttributeHeads(3 * channels, head_hidden, max_offset, min_scale, scale_unit)

    def triplane(self, z) -> Triplane:
        return decode_triplane(z, self.decoder, self.extent)

    def static_avatar(self, z, canonical_vertices) -> tuple[GaussianSet, torch.Tensor, torch.Tensor]:
        """Return (Gaussians, per-vertex features, static displacement)."""
        v = torch.as_tensor(canonical_vertices, dtype=DTYPE)
        feats = sample_features(self.triplane(z), v)
        dx, c, s = self.heads(feats)
        return GaussianSet(v + dx, c, s), feats, dx


def build_static_avatar(z, mesh: SkinnedMesh, codec: AvatarCodec) -> GaussianSet:
    """One Gaussian per mesh vertex at ``v_cano + dx``."""
    g, _, _ = codec.static_avatar(z, mesh.vertices)
    return g
