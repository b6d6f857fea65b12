"""Part-decomposed avatar: canonical Gaussians bound to a skinned body."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .body import DTYPE, Camera, Pose, SkinnedMesh, apply_skinning, skinning_matrices, vertex_normals
from .codec import GaussianSet
from .render import RenderTargets, render_channels

MIN_SCALE = 1e-4  # floor after adding scale residuals


@dataclass
class DecomposedAvatar:
    """Canonical Gaussians plus everything needed to pose and render them.

    ``anchors`` are the body-surface points each Gaussian was grown from; they
    drive skin-weight lookups during clothing transfer.  ``faces`` index the
    Gaussians and are only used to compute normals for the normal channel.
    """

    gaussians: GaussianSet
    anchors: np.ndarray  # (N, 3)
    skin_weights: np.ndarray  # (N, J)
    faces: np.ndarray  # (F, 3)
    labels: "object"  # parts.LabelField
    body: SkinnedMesh  # skeleton (joints, parents) and the undressed canonical mesh
    cloth_features: torch.Tensor | None = None  # (N_cloth, 3C), rows follow cloth_indices
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.gaussians)

    @property
    def label_array(self) -> np.ndarray:
        return np.asarray(self.labels.labels)

    def part_indices(self) -> dict[str, np.ndarray]:
        from .parts import partition
        return partition(self.gaussians, self.labels)

    @property
    def cloth_indices(self) -> np.ndarray:
        return self.part_indices()["cloth"]

    def copy(self) -> "DecomposedAvatar":
        g = self.gaussians
        return replace(self, gaussians=GaussianSet(g.positions.clone(), g.colors.clone(), g.scales.clone(),
                                                   g.labels),
                       anchors=self.anchors.copy(), skin_weights=self.skin_weights.copy(),
                       faces=self.faces.copy(), labels=self.labels.copy(), body=self.body.copy(),
                       cloth_features=None if self.cloth_features is None else self.cloth_features.clone(),
                       meta=dict(self.meta))

    def posed_attributes(self, pose: Pose, offsets=None):
        """World positions, colors, scales and normals under ``pose``.

        ``offsets`` is an optional ``(dx, dc, ds)`` triple over the full set,
        applied in canonical space before skinning.
        """
        g = self.gaussians
        return posed_attributes(g.positions, g.colors, g.scales, offsets, pose, self.body,
                                self.skin_weights, self.faces)

    def render(self, pose: Pose, camera: Camera, offsets=None, subset=None) -> RenderTargets:
        world, col, sc, normals = self.posed_attributes(pose, offsets)
        if subset is not None:
            idx = torch.as_tensor(np.asarray(subset), dtype=torch.long)
            world, col, sc, normals = world[idx], col[idx], sc[idx], normals[idx]
        return render_channels(world, col, sc, normals, camera)

    def full_offsets(self, cloth_dx, cloth_dc, cloth_ds, cloth_idx=None):
        """Scatter cloth-only offsets into zero-padded full-set tensors."""
        return scatter_offsets(len(self), self.cloth_indices if cloth_idx is None else cloth_idx,
                               cloth_dx, cloth_dc, cloth_ds)


def scatter_offsets(n: int, idx, dx, dc, ds):
    idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
    fdx = torch.zeros(n, 3, dtype=DTYPE).index_copy(0, idx, dx)
    fdc = torch.zeros(n, 3, dtype=DTYPE).index_copy(0, idx, dc)
    fds = torch.zeros(n, dtype=DTYPE).index_copy(0, idx, ds)
    return fdx, fdc, fds


def posed_attributes(positions, colors, scales, offsets, pose: Pose, body: SkinnedMesh,
                     skin_weights: np.ndarray, faces: np.ndarray):
    """Offsets in canonical space, then skinning; normals from the posed faces."""
    pos, col, sc = positions, colors, scales
    if offsets is not None:
        dx, dc, ds = offsets
        pos = pos + dx
        col = (col + dc).clamp(0.0, 1.0)
        sc = (sc + ds).clamp_min(MIN_SCALE)
    M = skinning_matrices(pose, body, skin_weights)
    world = apply_skinning(M, pos)
    with warnings.catch_warnings():
        # Gaussians left without faces (e.g. after transfer) fall back to +z
        warnings.simplefilter("ignore", RuntimeWarning)
        normals = vertex_normals(world, faces)
    return world, col, sc, normals
