"""Procedural skinned body, subdivision, linear blend skinning and per-vertex geometry.

The canonical body is a documented stand-in for a parametric body model: a
humanoid built from closed primitives (head sphere, elliptic torso tube, neck,
arm and leg tubes, hand paddles) in a T-pose with the pelvis at the origin.
Coordinates are meters, +y up, +z facing forward, +x to the body's left.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.spatial.transform import Rotation

DTYPE = torch.float64

PART_HINTS = ("head", "hand_l", "hand_r", "torso", "limb")
HEAD, HAND_L, HAND_R, TORSO, LIMB = range(5)

SMPL_BODY_JOINTS = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
)


class BodyConfigError(ValueError):
    pass


class ContractError(ValueError):
    """Raised when an operation's input contract (shapes, ranges) is violated."""


@dataclass(frozen=True)
class BodyConfig:
    """Proportions and tessellation of the procedural body.

    Joint count is ``1 + spine_joints + 2 * arm_joints + 2 * leg_joints``; the
    defaults give the 22-joint layout of common body models.
    """

    spine_joints: int = 5
    arm_joints: int = 4
    leg_joints: int = 4
    torso_length: float = 0.55
    torso_radii: tuple[float, float] = (0.16, 0.11)
    neck_length: float = 0.08
    head_radius: float = 0.11
    shoulder_width: float = 0.19
    arm_length: float = 0.52
    arm_radius: float = 0.045
    hand_length: float = 0.16
    hand_width: float = 0.08
    hand_thickness: float = 0.03
    hip_width: float = 0.09
    leg_length: float = 0.85
    leg_radius: float = 0.07
    around: int = 12
    torso_rings: int = 6
    limb_rings: int = 8
    head_rings: int = 6
    skin_falloff: float = 0.03
    max_influences: int = 4
    levels: int = 1

    @property
    def joint_count(self) -> int:
        return 1 + self.spine_joints + 2 * self.arm_joints + 2 * self.leg_joints

    def validate(self) -> None:
        if min(self.spine_joints, self.arm_joints, self.leg_joints) < 1:
            raise BodyConfigError("every joint chain needs at least one joint")
        if self.joint_count < 4:
            raise BodyConfigError(f"joint count {self.joint_count} < 4")
        lengths = (
            self.torso_length, *self.torso_radii, self.neck_length, self.head_radius,
            self.shoulder_width, self.arm_length, self.arm_radius, self.hand_length,
            self.hand_width, self.hand_thickness, self.hip_width, self.leg_length,
            self.leg_radius, self.skin_falloff,
        )
        if min(lengths) <= 0:
            raise BodyConfigError("body proportions must be positive")
        if self.around < 3 or min(self.torso_rings, self.limb_rings, self.head_rings) < 2:
            raise BodyConfigError("tessellation too coarse")
        if self.max_influences < 1 or self.levels < 0:
            raise BodyConfigError("max_influences >= 1 and levels >= 0 required")


@dataclass
class SkinnedMesh:
    vertices: np.ndarray  # (N, 3)
    faces: np.ndarray  # (F, 3) int
    joints: np.ndarray  # (J, 3) rest positions
    parents: np.ndarray  # (J,) int, -1 for the root
    skin_weights: np.ndarray  # (N, J)
    part_hint: np.ndarray  # (N,) int index into PART_HINTS
    joint_names: tuple[str, ...] = field(default_factory=tuple)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    def copy(self) -> "SkinnedMesh":
        return SkinnedMesh(
            self.vertices.copy(), self.faces.copy(), self.joints.copy(),
            self.parents.copy(), self.skin_weights.copy(), self.part_hint.copy(),
            tuple(self.joint_names),
        )

    def edges(self) -> np.ndarray:
        return mesh_edges(self.faces)


@dataclass
class Pose:
    joint_rotations: np.ndarray  # (J, 3) axis-angle, radians
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    timestamp: float = 0.0

    @classmethod
    def identity(cls, num_joints: int, timestamp: float = 0.0) -> "Pose":
        return cls(np.zeros((num_joints, 3)), np.zeros(3), timestamp)

    def rotation_matrices(self) -> np.ndarray:
        return Rotation.from_rotvec(np.asarray(self.joint_rotations, dtype=np.float64)).as_matrix()

    def to_record(self) -> dict:
        return {
            "t": float(self.timestamp),
            "rotations": np.asarray(self.joint_rotations).tolist(),
            "root": np.asarray(self.root_translation).tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Pose":
        return cls(np.asarray(rec["rotations"], dtype=np.float64),
                   np.asarray(rec["root"], dtype=np.float64), float(rec["t"]))


@dataclass
class Camera:
    """Pinhole camera, OpenCV axes (x right, y down, z forward).

    Pixel centers sit at integer coordinates; ``R``/``t`` map world to camera.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    width: int = 64
    height: int = 64

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError("focal lengths must be positive")
        if np.abs(self.R @ self.R.T - np.eye(3)).max() > 1e-6:
            raise ContractError("camera rotation is not orthonormal")

    @classmethod
    def look_at(cls, eye, target, width: int = 64, height: int = 64, focal: float | None = None,
                fov_y: float = 40.0, up=(0.0, 1.0, 0.0)) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        if focal is None:
            focal = 0.5 * height / np.tan(np.deg2rad(fov_y) / 2)
        return cls(focal, focal, (width - 1) / 2, (height - 1) / 2, R, -R @ eye, width, height)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def with_resolution(self, width: int, height: int) -> "Camera":
        sx, sy = width / self.width, height / self.height
        return replace(self, fx=self.fx * sx, fy=self.fy * sy, cx=(self.cx + 0.5) * sx - 0.5,
                       cy=(self.cy + 0.5) * sy - 0.5, width=width, height=height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "R": self.R.tolist(), "t": self.t.tolist(),
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], np.asarray(d["R"]), np.asarray(d["t"]),
                   int(d["width"]), int(d["height"]))


# ---------------------------------------------------------------------------
# Canonical body construction


def _skeleton(cfg: BodyConfig):
    """Joint rest positions, parents and names for the configured chain lengths."""
    torso_bottom = -0.12
    torso_top = torso_bottom + cfg.torso_length
    head_center_y = torso_top + cfg.neck_length + cfg.head_radius * 0.9
    joints, parents, names = [np.zeros(3)], [-1], ["pelvis"]

    def add(pos, parent, name):
        joints.append(np.asarray(pos, dtype=np.float64))
        parents.append(parent)
        names.append(name)
        return len(joints) - 1

    # spine: evenly spaced up to the torso top, then neck and head
    n_sp = cfg.spine_joints
    n_trunk = max(n_sp - 2, 0)
    spine_ids = []
    prev = 0
    for k in range(n_trunk):
        y = torso_top * (k + 1) / (n_trunk + 1)
        prev = add((0, y, 0), prev, f"spine{k + 1}")
        spine_ids.append(prev)
    if n_sp >= 2:
        prev = add((0, torso_top, 0), prev, "neck")
        spine_ids.append(prev)
    prev = add((0, torso_top + cfg.neck_length, 0), prev, "head")
    spine_ids.append(prev)
    head_id = prev
    arm_parent = spine_ids[max(0, len(spine_ids) - 3)] if len(spine_ids) >= 3 else 0

    shoulder_y = torso_top - 0.05
    arm_ids, leg_ids = {}, {}
    for side, sx in (("left", 1.0), ("right", -1.0)):
        xs = [0.05] + list(np.linspace(cfg.shoulder_width, cfg.shoulder_width + cfg.arm_length,
                                       cfg.arm_joints - 1))
        if cfg.arm_joints == 1:
            xs = [cfg.shoulder_width]
        arm_names = ("collar", "shoulder", "elbow", "wrist")
        p = arm_parent
        ids = []
        for k, x in enumerate(xs):
            nm = arm_names[k] if cfg.arm_joints == 4 else f"arm{k}"
            p = add((sx * x, shoulder_y, 0), p, f"{side}_{nm}")
            ids.append(p)
        arm_ids[side] = ids

        hip_y = -0.08
        lin = np.linspace(0, 1, cfg.leg_joints)
        fr = 1 - (1 - lin) ** 1.5
        leg_names = ("hip", "knee", "ankle", "foot")
        p = 0
        ids = []
        for k, f in enumerate(fr):
            nm = leg_names[k] if cfg.leg_joints == 4 else f"leg{k}"
            p = add((sx * cfg.hip_width, hip_y - f * cfg.leg_length, 0.0), p, f"{side}_{nm}")
            ids.append(p)
        leg_ids[side] = ids

    joints = np.stack(joints)
    parents = np.asarray(parents)
    names = list(names)
    # reorder to the conventional 22-joint layout when it applies
    if cfg.joint_count == 22 and set(names) == set(SMPL_BODY_JOINTS):
        order = [names.index(n) for n in SMPL_BODY_JOINTS]
        inv = np.argsort(order)
        joints = joints[order]
        parents = np.array([-1 if parents[o] < 0 else inv[parents[o]] for o in order])
        names = list(SMPL_BODY_JOINTS)
        head_id = names.index("head")
        arm_ids = {s: [int(inv[i]) for i in v] for s, v in arm_ids.items()}
        leg_ids = {s: [int(inv[i]) for i in v] for s, v in leg_ids.items()}
    layout = {
        "torso_bottom": torso_bottom, "torso_top": torso_top, "shoulder_y": shoulder_y,
        "head_center_y": head_center_y, "head": head_id, "arms": arm_ids, "legs": leg_ids,
    }
    return joints, parents, tuple(names), layout


def _tube(centers: np.ndarray, radii: np.ndarray, axis_u: np.ndarray, axis_v: np.ndarray,
          around: int, squareness: float = 0.0):
    """Closed tube through ring centers with flat end caps; returns (verts, faces)."""
    ang = 2 * np.pi * np.arange(around) / around
    cu, sv = np.cos(ang), np.sin(ang)
    if squareness > 0:
        # superellipse cross-section for paddle-like shapes
        e = 2.0 / (2.0 + 8.0 * squareness)
        cu = np.sign(cu) * np.abs(cu) ** e
        sv = np.sign(sv) * np.abs(sv) ** e
    rings = []
    for c, r in zip(centers, radii):
        ru, rv = (r if np.ndim(r) else (r, r))
        rings.append(c + ru * cu[:, None] * axis_u + rv * sv[:, None] * axis_v)
    verts = np.concatenate(rings + [centers[:1], centers[-1:]])
    n_r = len(centers)
    faces = []
    for i in range(n_r - 1):
        for j in range(around):
            a = i * around + j
            b = i * around + (j + 1) % around
            c = (i + 1) * around + j
            d = (i + 1) * around + (j + 1) % around
            faces += [(a, c, b), (b, c, d)]
    cap0, cap1 = n_r * around, n_r * around + 1
    for j in range(around):
        faces.append((cap0, j, (j + 1) % around))
        last = (n_r - 1) * around
        faces.append((cap1, last + (j + 1) % around, last + j))
    return verts, np.asarray(faces, dtype=np.int64)


def _uv_sphere(center, radius, rings: int, around: int):
    verts = [center + np.array([0, -radius, 0])]
    for i in range(1, rings):
        phi = np.pi * i / rings - np.pi / 2
        ang = 2 * np.pi * np.arange(around) / around
        ring = np.stack([radius * np.cos(phi) * np.sin(ang), np.full(around, radius * np.sin(phi)),
                         radius * np.cos(phi) * np.cos(ang)], axis=1)
        verts.append(center + ring)
    verts.append(center + np.array([0, radius, 0]))
    verts = np.concatenate([np.atleast_2d(v) for v in verts])
    faces = []
    top = len(verts) - 1
    for j in range(around):
        faces.append((0, 1 + (j + 1) % around, 1 + j))
    for i in range(rings - 2):
        for j in range(around):
            a = 1 + i * around + j
            b = 1 + i * around + (j + 1) % around
            c = a + around
            d = b + around
            faces += [(a, b, c), (b, d, c)]
    base = 1 + (rings - 2) * around
    for j in range(around):
        faces.append((top, base + j, base + (j + 1) % around))
    return verts, np.asarray(faces, dtype=np.int64)


def _orient_outward(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Flip faces whose normal points toward the primitive's centroid."""
    tri = verts[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    out = tri.mean(axis=1) - verts.mean(axis=0)
    flip = (n * out).sum(axis=1) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return faces


def _segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = max(float(ab @ ab), 1e-12)
    s = np.clip(((p - a) @ ab) / denom, 0.0, 1.0)
    return np.linalg.norm(p - (a + s[:, None] * ab), axis=1)


def compute_skin_weights(vertices: np.ndarray, joints: np.ndarray, parents: np.ndarray,
                         falloff: float, max_influences: int = 4,
                         leaf_extent: np.ndarray | None = None) -> np.ndarray:
    """Distance-to-bone skinning weights with exponential falloff, top-k sparse.

    Each joint owns the bone segments to its children; leaf joints own a short
    segment continuing the parent direction (``leaf_extent`` meters).
    """
    J = len(joints)
    children = [[] for _ in range(J)]
    for j, p in enumerate(parents):
        if p >= 0:
            children[p].append(j)
    dist = np.full((len(vertices), J), np.inf)
    for j in range(J):
        segs = [(joints[j], joints[c]) for c in children[j]]
        if not segs:
            p = parents[j]
            d = joints[j] - joints[p] if p >= 0 else np.array([0, 1.0, 0])
            d = d / max(np.linalg.norm(d), 1e-12)
            ext = 0.1 if leaf_extent is None else leaf_extent[j]
            segs = [(joints[j], joints[j] + ext * d)]
        for a, b in segs:
            dist[:, j] = np.minimum(dist[:, j], _segment_distance(vertices, a, b))
    dmin = dist.min(axis=1, keepdims=True)
    w = np.exp(-(dist - dmin) / falloff)
    k = min(max_influences, J)
    if k < J:
        drop = np.argsort(-w, axis=1, kind="stable")[:, k:]
        np.put_along_axis(w, drop, 0.0, axis=1)
    return w / w.sum(axis=1, keepdims=True)


def build_canonical_body(config: BodyConfig | None = None) -> SkinnedMesh:
    """Build the base (unsubdivided) canonical body for ``config``."""
    cfg = config or BodyConfig()
    cfg.validate()
    joints, parents, names, lay = _skeleton(cfg)
    ex, ey, ez = np.eye(3)
    parts_v, parts_f, parts_h = [], [], []

    def push(v, f, hint):
        parts_f.append(f + sum(len(x) for x in parts_v))
        parts_v.append(v)
        parts_h.append(np.full(len(v), hint))

    # torso: elliptic tube; y-extent equals torso_length exactly
    ys = np.linspace(lay["torso_bottom"], lay["torso_top"], cfg.torso_rings)
    centers = np.stack([np.zeros_like(ys), ys, np.zeros_like(ys)], axis=1)
    t = (ys - ys[0]) / (ys[-1] - ys[0])
    shape = 1.0 - 0.12 * np.sin(np.pi * t) + 0.05 * t  # waist and chest
    radii = [(cfg.torso_radii[0] * s, cfg.torso_radii[1] * s) for s in shape]
    v, f = _tube(centers, radii, ex, ez, cfg.around)
    f = _orient_outward(v, f)
    push(v, f, TORSO)

    # neck
    ny = np.linspace(lay["torso_top"] - 0.03, lay["head_center_y"] - 0.5 * cfg.head_radius, 3)
    centers = np.stack([np.zeros(3), ny, np.zeros(3)], axis=1)
    v, f = _tube(centers, np.full(3, 0.045), ex, ez, max(cfg.around // 2 + 2, 6))
    f = _orient_outward(v, f)
    push(v, f, LIMB)

    # head
    hc = np.array([0.0, lay["head_center_y"], 0.0])
    v, f = _uv_sphere(hc, cfg.head_radius, cfg.head_rings, cfg.around)
    f = _orient_outward(v, f)
    push(v, f, HEAD)

    # arms and hands
    for side, sx, hint in (("left", 1.0, HAND_L), ("right", -1.0, HAND_R)):
        x0, x1 = 0.10, cfg.shoulder_width + cfg.arm_length
        xs = np.linspace(x0, x1, cfg.limb_rings)
        centers = np.stack([sx * xs, np.full_like(xs, lay["shoulder_y"]), np.zeros_like(xs)], axis=1)
        taper = np.linspace(1.0, 0.75, len(xs))
        v, f = _tube(centers, cfg.arm_radius * taper, ey, ez, cfg.around // 2 + 2)
        f = _orient_outward(v, f)
        push(v, f, LIMB)
        hx = np.linspace(x1 - 0.01, x1 + cfg.hand_length, 3)
        centers = np.stack([sx * hx, np.full_like(hx, lay["shoulder_y"]), np.zeros_like(hx)], axis=1)
        radii = [(cfg.hand_width / 2, cfg.hand_thickness / 2)] * len(hx)
        v, f = _tube(centers, radii, ey, ez, cfg.around // 2 + 2, squareness=0.6)
        f = _orient_outward(v, f)
        push(v, f, hint)

    # legs
    for sx in (1.0, -1.0):
        y0, y1 = -0.02, -0.08 - cfg.leg_length
        ys = np.linspace(y0, y1, cfg.limb_rings + 1)
        centers = np.stack([np.full_like(ys, sx * cfg.hip_width), ys, np.zeros_like(ys)], axis=1)
        taper = np.linspace(1.0, 0.6, len(ys))
        v, f = _tube(centers, cfg.leg_radius * taper, ex, ez, cfg.around // 2 + 2)
        f = _orient_outward(v, f)
        push(v, f, LIMB)

    verts = np.concatenate(parts_v)
    faces = np.concatenate(parts_f)
    hint = np.concatenate(parts_h).astype(np.int64)
    leaf_extent = np.full(len(joints), 0.1)
    leaf_extent[lay["head"]] = 2 * cfg.head_radius
    for side in ("left", "right"):
        leaf_extent[lay["arms"][side][-1]] = cfg.hand_length
    weights = compute_skin_weights(verts, joints, parents, cfg.skin_falloff, cfg.max_influences,
                                   leaf_extent)
    return SkinnedMesh(verts, faces, joints, parents, weights, hint, names)


def canonical_body(config: BodyConfig | None = None) -> SkinnedMesh:
    """Base body subdivided ``config.levels`` times (the Gaussian-resolution mesh)."""
    cfg = config or BodyConfig()
    return subdivide(build_canonical_body(cfg), cfg.levels)


def mesh_edges(faces: np.ndarray) -> np.ndarray:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def subdivide(mesh: SkinnedMesh, levels: int = 1) -> SkinnedMesh:
    """Midpoint subdivision: every triangle splits into four.

    New vertices average their edge endpoints' positions and skin weights
    (renormalized). Part hints are categorical: a mixed edge takes the smaller
    hint index.
    """
    if levels < 0:
        raise ContractError("levels must be >= 0")
    out = mesh
    for _ in range(levels):
        out = _subdivide_once(out)
    return out


def _subdivide_once(mesh: SkinnedMesh) -> SkinnedMesh:
    V = mesh.num_vertices
    edges = mesh_edges(mesh.faces)
    lookup = {(int(a), int(b)): V + k for k, (a, b) in enumerate(edges)}
    a, b = edges[:, 0], edges[:, 1]
    verts = np.concatenate([mesh.vertices, 0.5 * (mesh.vertices[a] + mesh.vertices[b])])
    w_new = 0.5 * (mesh.skin_weights[a] + mesh.skin_weights[b])
    w_new /= w_new.sum(axis=1, keepdims=True)
    weights = np.concatenate([mesh.skin_weights, w_new])
    hint = np.concatenate([mesh.part_hint, np.minimum(mesh.part_hint[a], mesh.part_hint[b])])

    def mid(i, j):
        return lookup[(min(i, j), max(i, j))]

    faces = []
    for i, j, k in mesh.faces.tolist():
        ij, jk, ki = mid(i, j), mid(j, k), mid(k, i)
        faces += [(i, ij, ki), (ij, j, jk), (ki, jk, k), (ij, jk, ki)]
    return SkinnedMesh(verts, np.asarray(faces, dtype=np.int64), mesh.joints.copy(),
                       mesh.parents.copy(), weights, hint, tuple(mesh.joint_names))


# ---------------------------------------------------------------------------
# Skinning and per-vertex quantities


def joint_world_transforms(pose: Pose, joints: np.ndarray, parents: np.ndarray) -> np.ndarray:
    """Skinning transforms (J, 4, 4) with the rest-pose inverse baked in.

    The root transform is ``x -> R_root x + t`` about the world origin, so a
    pure root rotation acts on the whole body as a rigid motion.
    """
    J = len(joints)
    rots = np.asarray(pose.joint_rotations, dtype=np.float64)
    if rots.shape != (J, 3):
        raise ContractError(f"pose has {rots.shape[0]} joints, mesh has {J}")
    if not np.all(np.isfinite(rots)) or not np.all(np.isfinite(pose.root_translation)):
        raise ContractError("pose entries must be finite")
    R = Rotation.from_rotvec(rots).as_matrix()
    # A_j = A_parent o (rotation R_j about joint j); the identity pose gives I exactly
    A = np.zeros((J, 4, 4))
    for j in range(J):
        local = np.eye(4)
        local[:3, :3] = R[j]
        p = parents[j]
        if p < 0:
            local[:3, 3] = np.asarray(pose.root_translation, dtype=np.float64)
            A[j] = local
        else:
            local[:3, 3] = joints[j] - R[j] @ joints[j]
            A[j] = A[p] @ local
    return A


def blend_transforms(weights: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Per-vertex ``I + sum_j w_j (A_j - I)`` as (N, 3, 4); equals ``sum_j w_j A_j`` for unit weight rows."""
    eye = np.eye(4)[:3].reshape(12)
    D = (A[:, :3, :] - np.eye(4)[:3]).reshape(len(A), 12)
    return (eye + np.asarray(weights) @ D).reshape(-1, 3, 4)


def skinning_matrices(pose: Pose, mesh: SkinnedMesh, weights: np.ndarray | None = None) -> torch.Tensor:
    """Per-vertex blended 3x4 transforms for ``pose``."""
    w = mesh.skin_weights if weights is None else weights
    A = joint_world_transforms(pose, mesh.joints, mesh.parents)
    return torch.as_tensor(blend_transforms(w, A), dtype=DTYPE)


def lbs_deform(canonical_vertices, offsets, pose: Pose, mesh: SkinnedMesh,
               weights: np.ndarray | None = None) -> torch.Tensor:
    """Apply offsets in canonical space, then linear blend skinning.

    ``v_t = LBS(v + offsets, pose)``. Differentiable w.r.t. both tensors.
    """
    v = torch.as_tensor(canonical_vertices, dtype=DTYPE)
    d = torch.zeros_like(v) if offsets is None else torch.as_tensor(offsets, dtype=DTYPE)
    w = mesh.skin_weights if weights is None else weights
    if v.shape != d.shape or v.ndim != 2 or v.shape[1] != 3 or len(w) != v.shape[0]:
        raise ContractError(f"shape mismatch: vertices {tuple(v.shape)}, offsets {tuple(d.shape)}, "
                            f"weights {np.shape(w)}")
    if not torch.isfinite(d).all():
        raise ContractError("offsets must be finite")
    M = skinning_matrices(pose, mesh, w)
    return apply_skinning(M, v + d)


def apply_skinning(M: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    return torch.einsum("nab,nb->na", M[:, :, :3], points) + M[:, :, 3]


def vertex_normals(vertices, faces) -> torch.Tensor:
    """Area-weighted unit vertex normals; isolated or degenerate vertices get +z."""
    v = torch.as_tensor(vertices, dtype=DTYPE)
    f = torch.as_tensor(np.asarray(faces), dtype=torch.long)
    tri = v[f]
    fn = torch.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0], dim=1)
    acc = torch.zeros_like(v).index_add(0, f.reshape(-1), fn.repeat_interleave(3, dim=0))
    norm = acc.norm(dim=1, keepdim=True)
    bad = (norm < 1e-12).squeeze(1)
    if bool(bad.any()):
        warnings.warn(f"{int(bad.sum())} vertices have degenerate normals; using +z", RuntimeWarning)
        acc = torch.where(bad[:, None], torch.tensor([0.0, 0.0, 1.0], dtype=DTYPE), acc)
        norm = torch.where(bad[:, None], torch.ones_like(norm), norm)
    return acc / norm


def camera_depth(vertices, camera: Camera) -> tuple[torch.Tensor, torch.Tensor]:
    """Camera-space z per vertex and a behind-camera flag (z <= 0)."""
    v = torch.as_tensor(vertices, dtype=DTYPE)
    R = torch.as_tensor(camera.R, dtype=DTYPE)
    t = torch.as_tensor(camera.t, dtype=DTYPE)
    z = v @ R[2] + t[2]
    return z, z <= 0


# ---------------------------------------------------------------------------
# Persistence: OBJ plus a JSON sidecar; poses as JSON records


def save_mesh(mesh: SkinnedMesh, path: str | Path) -> None:
    path = Path(path)
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    path.write_text("\n".join(lines) + "\n")
    rows, cols = np.nonzero(mesh.skin_weights)
    sidecar = {
        "joints": mesh.joints.tolist(),
        "parents": mesh.parents.tolist(),
        "joint_names": list(mesh.joint_names),
        "weights": [[int(r), int(c), float(mesh.skin_weights[r, c])] for r, c in zip(rows, cols)],
        "part_hint": mesh.part_hint.tolist(),
        "part_hint_names": list(PART_HINTS),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar))


def load_mesh(path: str | Path) -> SkinnedMesh:
    path = Path(path)
    verts, faces = [], []
    for line in path.read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(x) for x in tok[1:4]])
        elif tok[0] == "f":
            faces.append([int(x.split("/")[0]) - 1 for x in tok[1:4]])
    side = json.loads(path.with_suffix(".json").read_text())
    verts = np.asarray(verts, dtype=np.float64)
    J = len(side["joints"])
    w = np.zeros((len(verts), J))
    for r, c, val in side["weights"]:
        w[r, c] = val
    return SkinnedMesh(verts, np.asarray(faces, dtype=np.int64), np.asarray(side["joints"]),
                       np.asarray(side["parents"]), w, np.asarray(side["part_hint"]),
                       tuple(side.get("joint_names", ())))


def save_poses(poses: Sequence[Pose], path: str | Path) -> None:
    Path(path).write_text(json.dumps([p.to_record() for p in poses]))


def load_poses(path: str | Path) -> list[Pose]:
    return [Pose.from_record(r) for r in json.loads(Path(path).read_text())]
