"""Synthetic subjects, motions, reference cloth dynamics and rendered ground truth."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from .body import (DTYPE, HAND_L, HAND_R, HEAD, LIMB, TORSO, BodyConfig, Camera, Pose, SkinnedMesh,
                   blend_transforms, canonical_body, joint_world_transforms, load_mesh, load_poses, save_mesh,
                   save_poses, vertex_normals)
from .avatar import DecomposedAvatar
from .codec import GaussianSet
from .parts import NUM_PARTS, LabelField, SEG_BACKGROUND, PartLabel, read_segmentation, write_segmentation
from .render import RenderTargets, read_flt, render_channels, write_flt, write_png

GRAVITY = np.array([0.0, -9.81, 0.0])
MOTIONS = ("idle-sway", "walk", "arm-wave", "spin")
SEG_SHRINK = 0.5  # splat scale factor for the segmentation pass


class StudioConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Subjects


@dataclass
class GarmentParams:
    """Reference cloth oscillator: ``u'' = -k u - c u' + gravity_gain g - drive_gain a``.

    ``u`` is the world-space displacement of a garment point from its skinned
    anchor and ``a`` the anchor's acceleration.
    """

    frequency: float = 1.5  # Hz, natural frequency
    damping_ratio: float = 0.15
    gravity_gain: float = 0.1
    drive_gain: float = 1.0
    spring_gain: float = 1.0  # 0 disables the dynamics entirely

    @property
    def stiffness(self) -> float:
        return (2 * np.pi * self.frequency) ** 2

    @property
    def damping(self) -> float:
        return 2 * self.damping_ratio * 2 * np.pi * self.frequency


@dataclass
class SubjectAsset:
    seed: int
    mesh: SkinnedMesh  # undressed canonical body
    gt_labels: np.ndarray  # (N,) PartLabel values
    gt_colors: np.ndarray  # (N, 3)
    gt_scales: np.ndarray  # (N,)
    gt_offsets: np.ndarray  # (N, 3) canonical garment shell offsets, zero off the garment
    garment: GarmentParams
    body_config: BodyConfig

    @property
    def num_vertices(self) -> int:
        return self.mesh.num_vertices

    @property
    def cloth_indices(self) -> np.ndarray:
        return np.nonzero(self.gt_labels == int(PartLabel.CLOTH))[0]

    @property
    def gt_canonical(self) -> np.ndarray:
        return self.mesh.vertices + self.gt_offsets

    def with_garment(self, **kw) -> "SubjectAsset":
        return replace(self, garment=replace(self.garment, **kw))


def _dominant_joint_names(mesh: SkinnedMesh) -> np.ndarray:
    return np.asarray(mesh.joint_names)[mesh.skin_weights.argmax(1)]


def _smooth_noise(points: np.ndarray, rng: np.random.Generator, waves: int = 3,
                  freq: float = 4.0) -> np.ndarray:
    """Sum of a few random plane waves, roughly in [-1, 1]."""
    out = np.zeros(len(points))
    for _ in range(waves):
        k = rng.normal(size=3)
        k *= freq * (0.5 + rng.random()) / np.linalg.norm(k)
        out += np.sin(points @ k + rng.uniform(0, 2 * np.pi))
    return out / waves


def generate_subject(seed: int, levels: int = 1, vary_shape: bool = True) -> SubjectAsset:
    """Deterministic subject for ``seed``: body proportions, tunic garment, colors, scales."""
    rng = np.random.default_rng(seed)
    base = BodyConfig(levels=levels)
    if vary_shape:
        j = rng.uniform(-1, 1, size=6)
        base = replace(base, torso_length=base.torso_length + 0.03 * j[0],
                       torso_radii=(base.torso_radii[0] * (1 + 0.08 * j[1]),
                                    base.torso_radii[1] * (1 + 0.08 * j[1])),
                       leg_length=base.leg_length + 0.04 * j[2], arm_length=base.arm_length + 0.03 * j[3],
                       head_radius=base.head_radius + 0.008 * j[4], leg_radius=base.leg_radius * (1 + 0.08 * j[5]))
    mesh = canonical_body(base)
    V = mesh.vertices
    names = _dominant_joint_names(mesh)
    hint = mesh.part_hint

    leg_joint = np.char.find(names.astype(str), "hip") >= 0
    leg_joint |= np.char.find(names.astype(str), "knee") >= 0
    arm_upper = np.isin(names, ["left_collar", "right_collar", "left_shoulder", "right_shoulder"])
    hem_y = -0.08 - rng.uniform(0.22, 0.36)
    sleeve = rng.uniform(0.22, 0.32)

    labels = np.full(len(V), int(PartLabel.BODY), dtype=np.int64)
    cloth = hint == TORSO
    cloth |= (hint == LIMB) & leg_joint & (V[:, 1] > hem_y)
    cloth |= (hint == LIMB) & arm_upper & (np.abs(V[:, 0]) < sleeve)
    labels[cloth] = int(PartLabel.CLOTH)
    labels[hint == HEAD] = int(PartLabel.FACE)
    labels[(hint == HAND_L) | (hint == HAND_R)] = int(PartLabel.HANDS)

    normals = vertex_normals(V, mesh.faces).numpy()
    thick = 0.0175 + 0.0075 * np.clip(_smooth_noise(V, rng, freq=5.0), -1, 1)
    offsets = np.where(cloth[:, None], thick[:, None] * normals, 0.0)

    # colors: tunic with crisp stripes, skin elsewhere, a darker face band for eyes/hair
    skin = np.array([0.87, 0.68, 0.55]) * (1 + 0.12 * rng.uniform(-1, 1))
    hue_a, hue_b = rng.uniform(0.1, 0.9, size=3), rng.uniform(0.1, 0.9, size=3)
    stripe = 0.5 + 0.5 * np.tanh(2.0 * np.sin(V[:, 1] * rng.uniform(28, 36) + rng.uniform(0, 2 * np.pi)))
    col = np.tile(np.clip(skin, 0, 1), (len(V), 1))
    col[cloth] = (hue_a * stripe[:, None] + hue_b * (1 - stripe[:, None]))[cloth]
    head = hint == HEAD
    if head.any():
        hc = V[head].mean(0)
        rel = V - hc
        hair = head & (rel[:, 1] > 0.035)
        eyes = head & (np.abs(rel[:, 1] - 0.0) < 0.03) & (rel[:, 2] > 0.06)
        col[hair] = np.array([0.25, 0.16, 0.10])
        col[eyes] = np.array([0.2, 0.2, 0.25])
    legs_body = (hint == LIMB) & leg_joint & ~cloth
    col[legs_body] *= 0.92
    col = np.clip(col, 0.02, 0.98)

    # scales from local edge length
    e = mesh.edges()
    L = np.linalg.norm(V[e[:, 0]] - V[e[:, 1]], axis=1)
    acc = np.bincount(e.ravel(), weights=np.repeat(L, 2), minlength=len(V))
    cnt = np.bincount(e.ravel(), minlength=len(V))
    scales = 0.55 * acc / np.maximum(cnt, 1)

    garment = GarmentParams(frequency=1.5 + rng.uniform(-0.15, 0.15),
                            damping_ratio=0.15 + rng.uniform(-0.03, 0.03))
    return SubjectAsset(seed, mesh, labels, col, scales, offsets, garment, base)


def gt_avatar(subject: SubjectAsset) -> DecomposedAvatar:
    """Decomposed avatar holding the subject's ground-truth attributes and labels."""
    m = subject.mesh
    g = GaussianSet(torch.as_tensor(subject.gt_canonical, dtype=DTYPE),
                    torch.as_tensor(subject.gt_colors, dtype=DTYPE),
                    torch.as_tensor(subject.gt_scales, dtype=DTYPE))
    labels = LabelField(subject.gt_labels.copy(), np.ones(subject.num_vertices))
    return DecomposedAvatar(g, m.vertices.copy(), m.skin_weights.copy(), m.faces.copy(), labels, m,
                            meta={"name": f"subject_{subject.seed}"})


# ---------------------------------------------------------------------------
# Motions


@dataclass(frozen=True)
class MotionSpec:
    name: str = "walk"
    speed: float = 1.0
    amplitude: float = 1.0
    phase: float = 0.0

    def __post_init__(self):
        if self.name not in MOTIONS:
            raise StudioConfigError(f"unknown motion {self.name!r}; expected one of {MOTIONS}")


def _rz(a):
    return Rotation.from_rotvec([0.0, 0.0, a])


def _rx(a):
    return Rotation.from_rotvec([a, 0.0, 0.0])


def _ry(a):
    return Rotation.from_rotvec([0.0, a, 0.0])


def _walk_phase(t: float, speed: float) -> float:
    """Stride phase with a slowly modulated cadence (integral of the step rate)."""
    f0, m, period = 0.9 * speed, 0.35, 6.3
    w = 2 * np.pi / period
    return 2 * np.pi * f0 * (t + m * (1 - np.cos(w * t)) / w)


def motion_pose(spec: MotionSpec, t: float, joint_names=None) -> Pose:
    """Pose of ``spec`` at time ``t`` for the default 22-joint layout."""
    from .body import SMPL_BODY_JOINTS
    names = list(joint_names or SMPL_BODY_JOINTS)
    J = len(names)
    rot = [Rotation.identity()] * J
    root = np.zeros(3)
    A = spec.amplitude

    def setj(name, r):
        if name in names:
            rot[names.index(name)] = r

    arm_drop = 0.85
    s = t * spec.speed + spec.phase
    if spec.name == "walk":
        ph = _walk_phase(t, spec.speed) + spec.phase
        swing = 0.45 * A * np.sin(ph)
        setj("left_hip", _rx(swing))
        setj("right_hip", _rx(-swing))
        setj("left_knee", _rx(0.55 * A * max(0.0, np.sin(ph - 1.2))))
        setj("right_knee", _rx(0.55 * A * max(0.0, np.sin(-ph - 1.2))))
        setj("left_shoulder", _rx(-0.35 * A * np.sin(ph)) * _rz(-arm_drop))
        setj("right_shoulder", _rx(0.35 * A * np.sin(ph)) * _rz(arm_drop))
        setj("left_elbow", _ry(0.25 + 0.15 * np.sin(ph)))
        setj("right_elbow", _ry(-0.25 + 0.15 * np.sin(ph)))
        setj("spine2", _ry(0.08 * A * np.sin(ph)))
        yaw = 0.45 * np.sin(2 * np.pi * t / 9.7)
        rot[0] = _ry(yaw)
        root = np.array([0.015 * np.sin(ph), 0.02 * A * np.cos(2 * ph), 0.0])
    elif spec.name == "idle-sway":
        sw = np.sin(2 * np.pi * 0.3 * s)
        rot[0] = _rz(0.05 * A * sw) * _ry(0.3 * np.sin(2 * np.pi * 0.07 * s))
        root = np.array([0.03 * A * sw, 0.0, 0.0])
        setj("spine2", _rz(-0.06 * A * sw))
        setj("left_shoulder", _rz(-arm_drop + 0.05 * sw))
        setj("right_shoulder", _rz(arm_drop + 0.05 * sw))
        setj("head", _rx(0.05 * np.sin(2 * np.pi * 0.2 * s)))
    elif spec.name == "arm-wave":
        w = np.sin(2 * np.pi * 0.8 * s)
        setj("left_shoulder", _rz(0.5 * A * (1 + w) * 0.5 + 0.3))
        setj("left_elbow", _rz(0.6 * A * (0.5 + 0.5 * np.sin(2 * np.pi * 1.6 * s))))
        setj("right_shoulder", _rz(arm_drop))
        rot[0] = _ry(0.25 * np.sin(2 * np.pi * 0.05 * s))
        setj("spine2", _rz(-0.05 * A * w))
    elif spec.name == "spin":
        rot[0] = _ry(2 * np.pi * 0.25 * spec.speed * t + spec.phase)
        setj("left_shoulder", _rz(-0.5))
        setj("right_shoulder", _rz(0.5))
    rv = np.stack([r.as_rotvec() for r in rot])
    return Pose(rv, root, float(t))


def pose_track(spec: MotionSpec, fps: float, duration: float, joint_names=None) -> list[Pose]:
    n = int(round(fps * duration))
    return [motion_pose(spec, k / fps, joint_names) for k in range(n)]


# ---------------------------------------------------------------------------
# Reference cloth dynamics


def skin_points(points: np.ndarray, weights: np.ndarray, pose: Pose, mesh: SkinnedMesh) -> np.ndarray:
    M = blend_transforms(weights, joint_world_transforms(pose, mesh.joints, mesh.parents))
    return np.einsum("nab,nb->na", M[:, :, :3], points) + M[:, :, 3]


def simulate_oscillator(accel: np.ndarray, dt: float, params: GarmentParams, substeps: int = 1,
                        u0=None, v0=None) -> np.ndarray:
    """Explicit Euler on ``u'' = -k u - c u' + gamma_g g - gamma_a a``.

    ``accel`` is (S, P, 3) sampled every ``dt``; values are held linearly between
    samples across ``substeps``.  Returns displacements (S, P, 3) at the samples.
    With no ``u0`` the state starts at rest at the static equilibrium.
    """
    k, c = params.spring_gain * params.stiffness, params.spring_gain * params.damping
    gg, ga = params.gravity_gain * params.spring_gain, params.drive_gain * params.spring_gain
    S = accel.shape[0]
    out = np.zeros_like(accel)
    if k == 0:
        return out
    g = GRAVITY
    u = (gg * g - ga * accel[0]) / k if u0 is None else np.array(u0, dtype=np.float64)
    v = np.zeros_like(u) if v0 is None else np.array(v0, dtype=np.float64)
    h = dt / substeps
    out[0] = u
    for s in range(S - 1):
        a0, a1 = accel[s], accel[s + 1]
        for j in range(substeps):
            a = a0 + (a1 - a0) * (j / substeps)
            f = -k * u - c * v + gg * g - ga * a
            u = u + h * v
            v = v + h * f
        out[s + 1] = u
    return out


def cloth_dynamics(subject: SubjectAsset, poses: list[Pose], fps: float, pose_fn=None,
                   oversample: int = 10, substeps: int = 8) -> np.ndarray:
    """World-space cloth displacements (T, N_cloth, 3) for a pose track.

    Anchor accelerations come from central differences of skinned anchors sampled
    ``oversample`` times per frame; the oscillator then runs at
    ``fps * oversample * substeps`` Hz.  ``pose_fn(t)`` gives the continuous
    motion; without it the track is interpolated linearly between frames.
    """
    idx = subject.cloth_indices
    T = len(poses)
    if subject.garment.spring_gain == 0 or len(idx) == 0:
        return np.zeros((T, len(idx), 3))
    spec = pose_fn or interpolated_track(poses)
    pts = subject.gt_canonical[idx]
    w = subject.mesh.skin_weights[idx]
    h = 1.0 / (fps * oversample)
    n = (T - 1) * oversample + 1
    times = poses[0].timestamp + h * np.arange(-1, n + 1)
    anchors = np.stack([skin_points(pts, w, spec(t), subject.mesh) for t in times])
    acc = (anchors[2:] - 2 * anchors[1:-1] + anchors[:-2]) / h ** 2  # at times[1:-1]
    u = simulate_oscillator(acc, h, subject.garment, substeps)
    return u[::oversample]


def interpolated_track(poses: list[Pose]):
    """Piecewise-linear (axis-angle and root) interpolation of a pose track."""
    ts = np.array([p.timestamp for p in poses])
    rv = np.stack([p.joint_rotations for p in poses])
    rt = np.stack([p.root_translation for p in poses])

    def at(t):
        i = int(np.clip(np.searchsorted(ts, t) - 1, 0, len(ts) - 2))
        a = (t - ts[i]) / (ts[i + 1] - ts[i])
        return Pose((1 - a) * rv[i] + a * rv[i + 1], (1 - a) * rt[i] + a * rt[i + 1], t)
    return at


# ---------------------------------------------------------------------------
# Sequences


@dataclass
class Sequence:
    subject_seed: int
    motion: MotionSpec
    fps: float
    duration: float
    camera: Camera
    poses: list[Pose]
    rgb: np.ndarray  # (T, H, W, 3)
    normal: np.ndarray  # (T, H, W, 3)
    depth: np.ndarray  # (T, H, W)
    silhouette: np.ndarray  # (T, H, W)
    seg: np.ndarray  # (T, H, W) uint8, 255 = background
    cloth_world: np.ndarray | None = None  # (T, N_cloth, 3) reference cloth displacements
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.poses)

    def frame(self, i: int) -> RenderTargets:
        return RenderTargets(torch.as_tensor(self.rgb[i]), torch.as_tensor(self.normal[i]),
                             torch.as_tensor(self.depth[i]), torch.as_tensor(self.silhouette[i]))


def default_camera(width: int = 64, height: int = 64, azimuth_deg: float = 0.0,
                   distance: float = 2.7) -> Camera:
    a = np.deg2rad(azimuth_deg)
    target = np.array([0.0, -0.1, 0.0])
    eye = target + distance * np.array([np.sin(a), 0.0, np.cos(a)])
    return Camera.look_at(eye, target, width, height, fov_y=40.0)


def gt_world_positions(subject: SubjectAsset, pose: Pose, cloth_disp: np.ndarray | None) -> np.ndarray:
    x = skin_points(subject.gt_canonical, subject.mesh.skin_weights, pose, subject.mesh)
    if cloth_disp is not None:
        x[subject.cloth_indices] += cloth_disp
    return x


def render_subject(subject: SubjectAsset, world: np.ndarray, camera: Camera) -> tuple[RenderTargets, np.ndarray]:
    """Ground-truth render plus the segmentation label image.

    Labels come from a second pass with splats shrunk by ``SEG_SHRINK`` so part
    borders follow the surface rather than the splat blur; pixels that pass
    misses fall back to the full-size pass.
    """
    pos = torch.as_tensor(world, dtype=DTYPE)
    normals = vertex_normals(pos, subject.mesh.faces)
    onehot = torch.zeros(len(world), NUM_PARTS, dtype=DTYPE)
    onehot[np.arange(len(world)), subject.gt_labels] = 1.0
    rt = render_channels(pos, subject.gt_colors, subject.gt_scales, normals, camera, extra={"seg": onehot})
    coarse = rt.extra.pop("seg").numpy()
    sharp = render_channels(pos, subject.gt_colors, SEG_SHRINK * subject.gt_scales, None, camera,
                            extra={"seg": onehot}).extra["seg"].numpy()
    lab = np.where(sharp.sum(-1) > 1e-3, sharp.argmax(-1), coarse.argmax(-1))
    seg = np.where(rt.silhouette.numpy() > 0.5, lab, SEG_BACKGROUND)
    return rt, seg.astype(np.uint8)


def generate_sequence(subject: SubjectAsset, motion: MotionSpec | str, fps: float = 30.0,
                      duration: float = 20.0, camera: Camera | None = None,
                      poses: list[Pose] | None = None) -> Sequence:
    """Pose track, reference cloth dynamics and rendered ground truth for every frame."""
    spec = MotionSpec(motion) if isinstance(motion, str) else motion
    cam = camera or default_camera()
    pose_fn = None
    if poses is None:
        poses = pose_track(spec, fps, duration, subject.mesh.joint_names)
        pose_fn = lambda t: motion_pose(spec, t, subject.mesh.joint_names)
    disp = cloth_dynamics(subject, poses, fps, pose_fn)
    frames = [render_subject(subject, gt_world_positions(subject, p, disp[i]), cam)
              for i, p in enumerate(poses)]
    stack = lambda k: np.stack([getattr(f[0], k).detach().numpy() for f in frames])
    return Sequence(subject.seed, spec, fps, len(poses) / fps, cam, list(poses), stack("rgb"),
                    stack("normal"), stack("depth"), stack("silhouette"),
                    np.stack([f[1] for f in frames]), disp)


def pseudo_gt_maps(sequence: Sequence, noise: float = 0.0, seed: int = 0) -> dict[str, np.ndarray]:
    """Normal, depth, silhouette and segmentation maps, optionally with additive noise.

    Noise is zero-mean Gaussian with std ``noise`` on the normal and depth maps
    only; silhouettes and segmentations are returned untouched.
    """
    normal, depth = sequence.normal.copy(), sequence.depth.copy()
    if noise > 0:
        rng = np.random.default_rng(seed)
        normal = normal + rng.normal(0.0, noise, size=normal.shape)
        depth = depth + rng.normal(0.0, noise, size=depth.shape)
    return {"normal": normal, "depth": depth, "silhouette": sequence.silhouette.copy(),
            "seg": sequence.seg.copy()}


# ---------------------------------------------------------------------------
# Dataset directory


def subject_dir(root: str | Path, seed: int) -> Path:
    return Path(root) / f"subject_{seed}"


def save_subject(subject: SubjectAsset, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_mesh(subject.mesh, path / "body.obj")
    rec = {"seed": subject.seed, "labels": subject.gt_labels.tolist(),
           "colors": subject.gt_colors.tolist(), "scales": subject.gt_scales.tolist(),
           "offsets": subject.gt_offsets.tolist(), "garment": asdict(subject.garment),
           "body_config": asdict(subject.body_config)}
    (path / "subject.json").write_text(json.dumps(rec))


def load_subject(path: str | Path) -> SubjectAsset:
    path = Path(path)
    rec = json.loads((path / "subject.json").read_text())
    bc = rec["body_config"]
    bc["torso_radii"] = tuple(bc["torso_radii"])
    return SubjectAsset(rec["seed"], load_mesh(path / "body.obj"), np.asarray(rec["labels"], dtype=np.int64),
                        np.asarray(rec["colors"]), np.asarray(rec["scales"]), np.asarray(rec["offsets"]),
                        GarmentParams(**rec["garment"]), BodyConfig(**bc))


def write_dataset(root: str | Path, subject: SubjectAsset, seq: Sequence, noise: float = 0.0,
                  seed: int = 0) -> Path:
    """``subject_<seed>/{frames,seg,normal,depth,silhouette}/NNNN.*`` plus JSON metadata."""
    d = subject_dir(root, subject.seed)
    for sub in ("frames", "seg", "normal", "depth", "silhouette"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    save_subject(subject, d)
    maps = pseudo_gt_maps(seq, noise, seed)
    for i in range(len(seq)):
        name = f"{i:04d}"
        write_png(d / "frames" / f"{name}.png", seq.rgb[i])
        write_flt(d / "frames" / f"{name}.flt", seq.rgb[i])
        write_segmentation(d / "seg" / f"{name}.png", maps["seg"][i])
        write_flt(d / "normal" / f"{name}.flt", maps["normal"][i])
        write_flt(d / "depth" / f"{name}.flt", maps["depth"][i])
        write_flt(d / "silhouette" / f"{name}.flt", maps["silhouette"][i])
    save_poses(seq.poses, d / "poses.json")
    (d / "camera.json").write_text(json.dumps(seq.camera.to_dict()))
    manifest = {"seed": subject.seed, "frames": len(seq), "fps": seq.fps, "duration": seq.duration,
                "width": seq.camera.width, "height": seq.camera.height, "noise": noise,
                "spec": asdict(seq.motion)}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def load_dataset(path: str | Path) -> tuple[SubjectAsset, Sequence]:
    d = Path(path)
    man = json.loads((d / "manifest.json").read_text())
    cam = Camera.from_dict(json.loads((d / "camera.json").read_text()))
    poses = load_poses(d / "poses.json")
    n = man["frames"]
    rd = lambda sub: np.stack([read_flt(d / sub / f"{i:04d}.flt").astype(np.float64) for i in range(n)])
    rgb, normal = rd("frames"), rd("normal")
    depth, sil = rd("depth"), rd("silhouette")
    seg = np.stack([read_segmentation(d / "seg" / f"{i:04d}.png") for i in range(n)])
    seq = Sequence(man["seed"], MotionSpec(**man["spec"]), man["fps"], man["duration"], cam, poses,
                   rgb, normal, depth, sil, seg, None, {"noise": man["noise"]})
    return load_subject(d), seq
