"""Cloth dynamics: pose window -> graph convolution -> gated recurrence -> per-frame offsets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial.transform import Rotation
from torch import nn

from .body import DTYPE, ContractError, Pose

DEFAULT_DELTA_T = 0.2
HIDDEN = 128
POSE_FEATURE_DIM = 6


class WindowBoundaryError(ValueError):
    pass


@dataclass
class PoseWindow:
    poses: tuple[Pose, Pose, Pose]
    delta_t: float = DEFAULT_DELTA_T
    frame_indices: tuple[int, int, int] = (-1, -1, -1)

    def __post_init__(self):
        ts = [p.timestamp for p in self.poses]
        if len(ts) != 3:
            raise ContractError("a pose window holds exactly three poses")

    @property
    def center(self) -> float:
        return self.poses[1].timestamp

    def collapsed(self) -> "PoseWindow":
        """Window with the center pose repeated (no temporal context)."""
        c = self.poses[1]
        return PoseWindow((c, c, c), self.delta_t, (self.frame_indices[1],) * 3)


def build_window(poses: Sequence[Pose], T: float, delta_t: float = DEFAULT_DELTA_T,
                 clamp: bool = False) -> PoseWindow:
    """Nearest frames to ``T - delta_t``, ``T``, ``T + delta_t``.

    Raises :class:`WindowBoundaryError` when the window leaves the track, unless
    ``clamp`` is set, in which case out-of-range slots take the end frames.
    """
    times = np.array([p.timestamp for p in poses])
    if len(times) == 0:
        raise WindowBoundaryError("empty pose track")
    half = 0.5 * (times[1] - times[0]) if len(times) > 1 else 0.0
    lo, hi = T - delta_t, T + delta_t
    if not clamp and (lo < times[0] - half - 1e-9 or hi > times[-1] + half + 1e-9):
        raise WindowBoundaryError(f"window [{lo:.3f}, {hi:.3f}] s outside track "
                                  f"[{times[0]:.3f}, {times[-1]:.3f}] s")
    idx = tuple(int(np.argmin(np.abs(times - t))) for t in (lo, T, hi))
    return PoseWindow(tuple(poses[i] for i in idx), delta_t, idx)


def encode_pose_features(pose: Pose, num_nodes: int | None = None,
                         num_body_joints: int = 21) -> torch.Tensor:
    """6D rotation features (first two matrix columns) of the non-root joints.

    Returns ``(6 * num_body_joints,)``, or that vector tiled to ``(num_nodes, .)``.
    """
    rot = np.asarray(pose.joint_rotations, dtype=np.float64)
    if rot.shape != (num_body_joints + 1, 3):
        raise ContractError(f"expected {num_body_joints + 1} joints, got {rot.shape[0]}")
    m = Rotation.from_rotvec(rot[1:]).as_matrix()  # (J-1, 3, 3)
    feat = np.concatenate([m[:, :, 0], m[:, :, 1]], axis=1).reshape(-1)
    out = torch.as_tensor(feat, dtype=DTYPE)
    if num_nodes is not None:
        out = out.expand(num_nodes, -1)
    return out


# ---------------------------------------------------------------------------
# Graph


@dataclass
class ClothGraph:
    nodes: np.ndarray  # (N,) indices into the full Gaussian set
    edges: np.ndarray  # (E, 2) local indices, undirected, i < j
    adjacency: torch.Tensor = field(init=False, repr=False)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.int64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(self.edges) and (self.edges[:, 0] == self.edges[:, 1]).any():
            raise ContractError("self-loops are not allowed")
        self.adjacency = normalized_adjacency(self.edges, len(self.nodes))

    @classmethod
    def from_faces(cls, faces: np.ndarray, nodes) -> "ClothGraph":
        nodes = np.asarray(nodes, dtype=np.int64)
        local = np.full(int(faces.max()) + 1 if len(faces) else 0, -1)
        local[nodes[nodes < len(local)]] = np.nonzero(nodes < len(local))[0]
        e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
        e = local[e]
        e = e[(e >= 0).all(axis=1)]
        e = np.unique(np.sort(e, axis=1), axis=0)
        return cls(nodes, e)

    def __len__(self) -> int:
        return len(self.nodes)

    def permuted(self, perm: np.ndarray) -> "ClothGraph":
        """Graph with node ``i`` of the result equal to node ``perm[i]`` of this one."""
        inv = np.argsort(perm)
        e = np.sort(inv[self.edges], axis=1) if len(self.edges) else self.edges
        return ClothGraph(self.nodes[perm], e)


def normalized_adjacency(edges: np.ndarray, n: int) -> torch.Tensor:
    """Sparse ``D^-1/2 (A + I) D^-1/2``."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([e[:, 0], e[:, 1], np.arange(n)])
    cols = np.concatenate([e[:, 1], e[:, 0], np.arange(n)])
    deg = np.bincount(rows, minlength=n).astype(np.float64)
    vals = 1.0 / np.sqrt(deg[rows] * deg[cols])
    adj = torch.sparse_coo_tensor(np.stack([rows, cols]), vals, (n, n), dtype=DTYPE,
                                  check_invariants=False)
    return adj.coalesce()


class GraphConv(nn.Module):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(in_dim, out_dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(out_dim, dtype=DTYPE))
        nn.init.xavier_uniform_(self.weight)

    def forward(self, x: torch.Tensor, adjacency: torch.Tensor) -> torch.Tensor:
        return torch.sparse.mm(adjacency, x @ self.weight) + self.bias


class GCNEncoder(nn.Module):
    """Two graph convolutions with a SiLU in between."""

    def __init__(self, in_dim: int = 96 + 126, hidden: int = HIDDEN, out_dim: int = HIDDEN):
        super().__init__()
        self.conv1 = GraphConv(in_dim, hidden)
        self.conv2 = GraphConv(hidden, out_dim)

    def forward(self, x: torch.Tensor, adjacency: torch.Tensor) -> torch.Tensor:
        return self.conv2(F.silu(self.conv1(x, adjacency)), adjacency)


def gcn_encode(feat_cano, feat_pose, graph: ClothGraph, gcn: GCNEncoder) -> torch.Tensor:
    x = torch.cat([torch.as_tensor(feat_cano, dtype=DTYPE), torch.as_tensor(feat_pose, dtype=DTYPE)], 1)
    if x.shape[0] != len(graph):
        raise ContractError(f"{x.shape[0]} feature rows for {len(graph)} graph nodes")
    return gcn(x, graph.adjacency)


class GRUCell(nn.Module):
    """Gated recurrent cell.

    r = sigmoid(W_r x + b_r + U_r h + c_r)
    u = sigmoid(W_u x + b_u + U_u h + c_u)
    n = tanh(W_n x + b_n + r * (U_n h + c_n))
    h' = (1 - u) * n + u * h
    """

    def __init__(self, input_dim: int = HIDDEN, hidden: int = HIDDEN):
        super().__init__()
        self.hidden = hidden
        std = 1.0 / np.sqrt(hidden)
        self.w_x = nn.Parameter(torch.empty(input_dim, 3 * hidden, dtype=DTYPE).uniform_(-std, std))
        self.b_x = nn.Parameter(torch.empty(3 * hidden, dtype=DTYPE).uniform_(-std, std))
        self.w_h = nn.Parameter(torch.empty(hidden, 3 * hidden, dtype=DTYPE).uniform_(-std, std))
        self.b_h = nn.Parameter(torch.empty(3 * hidden, dtype=DTYPE).uniform_(-std, std))

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        gx = x @ self.w_x + self.b_x
        gh = h @ self.w_h + self.b_h
        xr, xu, xn = gx.chunk(3, dim=1)
        hr, hu, hn = gh.chunk(3, dim=1)
        r = torch.sigmoid(xr + hr)
        u = torch.sigmoid(xu + hu)
        n = torch.tanh(xn + r * hn)
        return (1 - u) * n + u * h


@dataclass
class OffsetBounds:
    position: float = 0.05
    color: float = 0.2
    scale: float = 0.002

    def vector(self) -> torch.Tensor:
        b = [self.position] * 3 + [self.color] * 3 + [self.scale]
        return torch.tensor(b, dtype=DTYPE)


class OffsetHead(nn.Module):
    """MLP emitting 7 bounded residuals per node: position 3, color 3, scale 1."""

    def __init__(self, hidden: int = HIDDEN, width: int = 64, bounds: OffsetBounds | None = None,
                 zero_init: bool = True):
        super().__init__()
        self.bounds = bounds or OffsetBounds()
        self.net = nn.Sequential(nn.Linear(hidden, width, dtype=DTYPE), nn.SiLU(),
                                 nn.Linear(width, 7, dtype=DTYPE))
        if zero_init:
            nn.init.zeros_(self.net[-1].weight)
            nn.init.zeros_(self.net[-1].bias)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.net(h)) * self.bounds.vector()


@dataclass
class OffsetSequence:
    dx: torch.Tensor  # (T, N, 3)
    dc: torch.Tensor  # (T, N, 3)
    ds: torch.Tensor  # (T, N)
    times: tuple = ()

    def __len__(self) -> int:
        return self.dx.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.dx.shape[1]

    def flat(self) -> torch.Tensor:
        return torch.cat([self.dx, self.dc, self.ds[..., None]], dim=-1)

    @classmethod
    def from_flat(cls, flat: torch.Tensor, times=()) -> "OffsetSequence":
        return cls(flat[..., :3], flat[..., 3:6], flat[..., 6], tuple(times))

    @classmethod
    def zeros(cls, frames: int, nodes: int) -> "OffsetSequence":
        return cls.from_flat(torch.zeros(frames, nodes, 7, dtype=DTYPE))

    def frame(self, i: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.dx[i], self.dc[i], self.ds[i]


def gru_rollout(Z_seq: torch.Tensor, cell: GRUCell, head: OffsetHead,
                h0: torch.Tensor | None = None, times=()) -> OffsetSequence:
    """Run the cell over ``T`` steps for every node, decoding each hidden state."""
    T, N, _ = Z_seq.shape
    if T < 1:
        raise ContractError("need at least one step")
    h = torch.zeros(N, cell.hidden, dtype=DTYPE) if h0 is None else h0
    outs = []
    for t in range(T):
        h = cell(Z_seq[t], h)
        outs.append(head(h))
    return OffsetSequence.from_flat(torch.stack(outs), times)


def interpolate_offsets(off_a, off_b, alpha: float):
    """``(1 - alpha) * a + alpha * b`` for offset tensors or tuples of them."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha {alpha} outside [0, 1]")
    if isinstance(off_a, (tuple, list)):
        return tuple(interpolate_offsets(a, b, alpha) for a, b in zip(off_a, off_b))
    if alpha == 0.0:
        return off_a
    if alpha == 1.0:
        return off_b
    return (1 - alpha) * off_a + alpha * off_b


class CloSim(nn.Module):
    """Spatio-temporal cloth offset predictor."""

    def __init__(self, feature_dim: int = 96, pose_dim: int = 126, hidden: int = HIDDEN,
                 head_width: int = 64, bounds: OffsetBounds | None = None, zero_head: bool = True):
        super().__init__()
        self.pose_dim = pose_dim
        self.gcn = GCNEncoder(feature_dim + pose_dim, hidden, hidden)
        self.cell = GRUCell(hidden, hidden)
        self.head = OffsetHead(hidden, head_width, bounds, zero_init=zero_head)
        # rest-pose encoding subtracted before the first layer: a fixed shift of its
        # bias that keeps the pose signal centered near zero
        rest = Pose(np.zeros((pose_dim // 6 + 1, 3)), np.zeros(3))
        self.register_buffer("pose_rest", encode_pose_features(rest, None, pose_dim // 6))

    def forward(self, feat_cano: torch.Tensor, window: PoseWindow, graph: ClothGraph,
                h0: torch.Tensor | None = None) -> OffsetSequence:
        n = len(graph)
        if feat_cano.shape[0] != n:
            raise ContractError(f"{feat_cano.shape[0]} feature rows for {n} graph nodes")
        # The pose features are shared by every node and the canonical features by
        # every frame, so the first layer's dense product is split accordingly.
        c1, c2 = self.gcn.conv1, self.gcn.conv2
        fd = feat_cano.shape[1]
        xw = feat_cano @ c1.weight[:fd]
        pose = torch.stack([encode_pose_features(p, None, self.pose_dim // 6) for p in window.poses])
        pose = pose - self.pose_rest
        pw = pose @ c1.weight[fd:]  # (3, hidden)
        adj = graph.adjacency
        T = len(window.poses)
        h1 = torch.sparse.mm(adj, torch.cat([xw + pw[t] for t in range(T)], 1))
        h1 = F.silu(h1.reshape(n, T, -1) + c1.bias).transpose(0, 1)  # (T, n, hidden)
        h2 = torch.sparse.mm(adj, torch.cat(list(h1 @ c2.weight), 1))
        Z = h2.reshape(n, T, -1).transpose(0, 1) + c2.bias
        return gru_rollout(Z, self.cell, self.head, h0, tuple(p.timestamp for p in window.poses))


def closim_forward(feat_cano_cloth, window: PoseWindow, graph: ClothGraph, model: CloSim) -> OffsetSequence:
    return model(torch.as_tensor(feat_cano_cloth, dtype=DTYPE), window, graph)
