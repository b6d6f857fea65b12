"""Two-stage training, evaluation, animation and checkpoint persistence."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .avatar import DecomposedAvatar, posed_attributes, scatter_offsets
from .body import DTYPE, BodyConfig, Camera, ContractError, Pose, build_canonical_body
from .closim import CloSim, ClothGraph, OffsetSequence, WindowBoundaryError, build_window, interpolate_offsets
from .codec import AvatarCodec, GaussianSet, body_extent
from .losses import (LossWeights, TrainingAbort, cloth_loss, decode_normals, geometry_terms, pyramid_gradient_distance,
                     rendering_loss, ssim, temporal_difference, total_loss)
from .parts import (LabelField, PartLabel, merge_pseudo_labels, partition, predict_labels, project_labels,
                    refine_labels, train_label_classifier)
from .render import RenderTargets, render_channels, write_flt, write_png
from .studio import Sequence, SubjectAsset, pseudo_gt_maps, skin_points

PSNR_CEILING = 99.0
CKPT_MAGIC = b"CLAVCKPT"
CKPT_VERSION = 1


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class TrainConfig:
    stage: int = 1
    subjects: list = field(default_factory=lambda: [1, 2])
    steps: int = 500
    learning_rate: float = 1e-3
    batch: int = 1
    seed: int = 0
    resolution: int = 64
    delta_t: float = 0.2
    loss: dict = field(default_factory=lambda: LossWeights().as_dict())
    # model size
    triplane_channels: int = 32
    triplane_resolution: int = 32
    decoder_hidden: int = 16
    head_hidden: int = 64
    closim_head_width: int = 64
    # a zero last layer would also zero the gradient reaching the pose pathway,
    # which then stays unused while the static avatar converges
    closim_zero_head: bool = False
    latent_std: float = 0.1
    # training path switches
    use_closim: bool = True
    collapse_window: bool = False
    supervise_center: bool = True
    alpha: float | None = None  # fixed interpolation position; None draws uniformly
    holdout_every: int = 10
    holdout_offset: int = 5
    label_source: str = "gt"  # "gt" or "segment"
    pseudo_noise: float = 0.0
    from_scratch: bool = False
    init_checkpoint: str | None = None
    # monitoring
    eval_every: int = 0
    eval_stride: int = 1
    target_psnr: float | None = None
    log_path: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.stage not in (1, 2):
            raise ConfigError("stage must be 1 or 2")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.steps < 0 or self.batch < 1:
            raise ConfigError("steps >= 0 and batch >= 1 required")
        if self.delta_t <= 0:
            raise ConfigError("delta_t must be positive")
        if self.label_source not in ("gt", "segment"):
            raise ConfigError("label_source must be 'gt' or 'segment'")
        if self.alpha is not None and not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        LossWeights(**self.loss)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(**self.loss)

    def to_dict(self) -> dict:
        return asdict(self)

    def portable_dict(self) -> dict:
        """Settings without run-location fields, so moved runs hash the same."""
        d = self.to_dict()
        d.pop("log_path")
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.portable_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base = cls().to_dict()
        loss = dict(base["loss"])
        loss.update(d.get("loss", {}))
        base.update(d)
        base["loss"] = loss
        return cls(**base)


def load_config(path: str | Path | None, overrides: list[str] = ()) -> TrainConfig:
    """JSON config file plus ``key=value`` overrides (``loss.rgb=0.5`` for nested keys)."""
    d = json.loads(Path(path).read_text()) if path else {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        target = d
        parts = key.split(".")
        for p in parts[:-1]:
            target = target.setdefault(p, {})
        target[parts[-1]] = val
    return TrainConfig.from_dict(d)


# ---------------------------------------------------------------------------
# Model


def shared_extent() -> np.ndarray:
    """Canonical box shared by every subject's triplane."""
    return body_extent(build_canonical_body(BodyConfig(levels=0)).vertices, margin=0.15)


class AvatarModel(nn.Module):
    """Shared codec and CloSim plus one latent code per subject."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        r = cfg.triplane_resolution
        self.codec = AvatarCodec(shared_extent(), cfg.triplane_channels, (r, r), cfg.decoder_hidden,
                                 head_hidden=cfg.head_hidden)
        self.closim = CloSim(3 * cfg.triplane_channels, 126, 128, cfg.closim_head_width,
                             zero_head=cfg.closim_zero_head)
        self.latents = nn.ParameterDict()
        self.latent_std = cfg.latent_std
        self.seed = cfg.seed

    def add_subject(self, name: str) -> None:
        g = torch.Generator().manual_seed((self.seed * 1000003 + zlib.crc32(name.encode())) % 2 ** 63)
        self.latents[name] = nn.Parameter(torch.randn(64, generator=g, dtype=DTYPE) * self.latent_std)


def build_model(cfg: TrainConfig) -> AvatarModel:
    torch.manual_seed(cfg.seed)
    return AvatarModel(cfg)


# ---------------------------------------------------------------------------
# Subject data


@dataclass
class SubjectData:
    name: str
    asset: SubjectAsset
    sequence: Sequence
    labels: LabelField
    maps: dict

    def __post_init__(self):
        self.parts = partition(self.asset.num_vertices, self.labels)
        self.cloth_idx = self.parts["cloth"]
        self.graph = ClothGraph.from_faces(self.asset.mesh.faces, self.cloth_idx)
        fh = np.concatenate([self.parts["face"], self.parts["hands"]])
        self.face_hand_idx = np.sort(fh)
        self.cloth_mask = self.maps["seg"] == int(PartLabel.CLOTH)

    @property
    def mesh(self):
        return self.asset.mesh

    @property
    def camera(self) -> Camera:
        return self.sequence.camera

    def half_window(self, delta_t: float) -> int:
        return int(round(delta_t * self.sequence.fps))

    def holdout_frames(self, cfg: TrainConfig) -> np.ndarray:
        n = len(self.sequence)
        return np.arange(cfg.holdout_offset, n, cfg.holdout_every)

    def train_frames(self, cfg: TrainConfig) -> np.ndarray:
        n = len(self.sequence)
        idx = np.arange(n)
        return idx[(idx % cfg.holdout_every) != cfg.holdout_offset]


def segment_subject(asset: SubjectAsset, seq: Sequence, views: int = 8, features=None,
                    frames=None, epochs: int = 300, seed: int = 0):
    """Labels from segmentation maps: project, merge views, classify, refine.

    Points are placed by skinning the undressed canonical mesh with each frame's
    pose. Without ``features`` the classifier sees canonical positions plus zeros.
    """
    mesh = asset.mesh
    n = len(seq)
    if frames is None:
        frames = np.linspace(0, n - 1, views).round().astype(int)
    votes = []
    for f in frames:
        world = skin_points(mesh.vertices, mesh.skin_weights, seq.poses[f], mesh)
        votes.append(project_labels(world, seq.camera, seq.seg[f], seq.depth[f]))
    pseudo = merge_pseudo_labels(votes)
    feats = np.zeros((mesh.num_vertices, 96)) if features is None else features
    clf, acc = train_label_classifier(feats, pseudo, epochs=epochs, positions=mesh.vertices, seed=seed)
    raw = predict_labels(clf, feats, mesh.vertices)
    refined = refine_labels(raw, mesh.edges())
    return refined, {"classifier": clf, "train_accuracy": acc, "pseudo": pseudo, "raw": raw}


def prepare_subject(name: str, asset: SubjectAsset, seq: Sequence, cfg: TrainConfig | None = None,
                    labels: LabelField | None = None) -> SubjectData:
    cfg = cfg or TrainConfig()
    if labels is None:
        if cfg.label_source == "gt":
            labels = LabelField(asset.gt_labels.copy(), np.ones(asset.num_vertices))
        else:
            labels, _ = segment_subject(asset, seq, seed=cfg.seed)
    maps = pseudo_gt_maps(seq, cfg.pseudo_noise, seed=cfg.seed)
    return SubjectData(name, asset, seq, labels, maps)


# ---------------------------------------------------------------------------
# Forward pass


@dataclass
class StepResult:
    report: object
    target_frame: int
    alpha: float
    window: object
    closim_offsets: OffsetSequence | None
    offsets_used: tuple | None
    render: RenderTargets


def static_avatar(model: AvatarModel, data: SubjectData):
    z = model.latents[data.name]
    return model.codec.static_avatar(z, data.mesh.vertices)


def cloth_offsets(model: AvatarModel, data: SubjectData, feats: torch.Tensor, window, cfg: TrainConfig):
    if not cfg.use_closim:
        return None
    if cfg.collapse_window:
        window = window.collapsed()
    return model.closim(feats[torch.as_tensor(data.cloth_idx)], window, data.graph)


def render_frame(data: SubjectData, gauss: GaussianSet, pose: Pose, camera: Camera, offsets=None,
                 subset=None) -> RenderTargets:
    full = None
    if offsets is not None:
        full = scatter_offsets(len(gauss), data.cloth_idx, *offsets)
    world, col, sc, normals = posed_attributes(gauss.positions, gauss.colors, gauss.scales, full, pose,
                                               data.mesh, data.mesh.skin_weights, data.mesh.faces)
    if subset is not None:
        idx = torch.as_tensor(np.asarray(subset), dtype=torch.long)
        world, col, sc, normals = world[idx], col[idx], sc[idx], normals[idx]
    return render_channels(world, col, sc, normals, camera)


def _target(data: SubjectData, f: int):
    s = data.sequence
    return (torch.as_tensor(s.rgb[f]), torch.as_tensor(data.maps["normal"][f]),
            torch.as_tensor(data.maps["depth"][f]), torch.as_tensor(data.maps["silhouette"][f]))


def frame_terms(model: AvatarModel, data: SubjectData, cfg: TrainConfig, center: int, k: int) -> StepResult:
    """Loss terms for the window centered at ``center`` supervised at frame ``center - W + k``."""
    W = data.half_window(cfg.delta_t)
    seq = data.sequence
    window = build_window(seq.poses, seq.poses[center].timestamp, cfg.delta_t)
    alpha = k / (2 * W)
    f = center - W + k
    gauss, feats, _ = static_avatar(model, data)
    off = cloth_offsets(model, data, feats, window, cfg)
    used = None
    if off is not None:
        used = interpolate_offsets(off.frame(0), off.frame(2), alpha)
    rt = render_frame(data, gauss, seq.poses[f], seq.camera, used)
    rgb, n_gt, d_gt, s_gt = _target(data, f)

    terms = rendering_loss(rt.rgb, rgb)
    if used is not None and cfg.supervise_center and k == W:
        rt_c = render_frame(data, gauss, seq.poses[f], seq.camera, off.frame(1))
        extra = rendering_loss(rt_c.rgb, rgb)
        terms = {key: 0.5 * (terms[key] + extra[key]) for key in terms}
    if len(data.cloth_idx):
        rt_cloth = render_frame(data, gauss, seq.poses[f], seq.camera, used, subset=data.cloth_idx)
        terms["cloth"] = cloth_loss(rt_cloth.rgb, rgb, torch.as_tensor(data.cloth_mask[f]))
    terms.update(geometry_terms(rt.normal, n_gt, rt.depth, d_gt, rt.silhouette, s_gt))
    if off is not None:
        terms["temporal"] = temporal_difference(off)
        terms["reg"] = (off.dx.pow(2).sum(-1).mean() + off.dc.pow(2).sum(-1).mean() + off.ds.pow(2).mean())
    fh = torch.as_tensor(data.face_hand_idx)
    if len(fh):
        gt = torch.as_tensor(data.asset.gt_canonical[data.face_hand_idx])
        terms["face_hands"] = (gauss.positions[fh] - gt).pow(2).sum(-1).mean()
    report = total_loss(terms, cfg.weights)
    return StepResult(report, f, alpha, window, off, used, rt)


# ---------------------------------------------------------------------------
# Trainer


def _named_params(model: nn.Module) -> list[tuple[str, nn.Parameter]]:
    return [(n, p) for n, p in model.named_parameters()]


class Trainer:
    """Single-owner training loop over a model, an optimizer and a sampling RNG."""

    def __init__(self, cfg: TrainConfig, subjects: list[SubjectData], model: AvatarModel | None = None,
                 step: int = 0, rng_state: dict | None = None):
        self.cfg = cfg
        self.subjects = {s.name: s for s in subjects}
        self.order = [s.name for s in subjects]
        self.model = model or build_model(cfg)
        for s in subjects:
            if s.name not in self.model.latents:
                self.model.add_subject(s.name)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.learning_rate)
        self.step = step
        self.rng = np.random.default_rng(cfg.seed)
        if rng_state is not None:
            self.rng.bit_generator.state = rng_state
        self.history: list[dict] = []
        self.eval_history: list[dict] = []
        self.last_good: bytes | None = None
        self._log = None
        if cfg.log_path:
            Path(cfg.log_path).parent.mkdir(parents=True, exist_ok=True)

    # sampling -------------------------------------------------------------
    def sample(self) -> tuple[SubjectData, int, int]:
        name = self.order[int(self.rng.integers(len(self.order)))]
        data = self.subjects[name]
        W = data.half_window(self.cfg.delta_t)
        a = self.rng.uniform() if self.cfg.alpha is None else self.cfg.alpha
        k = int(round(a * 2 * W))
        n = len(data.sequence)
        frames = data.train_frames(self.cfg)
        frames = frames[(frames >= k) & (frames <= n - 1 - 2 * W + k)]
        if len(frames) == 0:
            raise WindowBoundaryError("sequence too short for a training window")
        f = int(frames[self.rng.integers(len(frames))])
        return data, f + W - k, k

    # one update -------------------------------------------------------------
    def train_step(self) -> dict:
        """One update on the mean loss of ``cfg.batch`` sampled windows."""
        self.optimizer.zero_grad(set_to_none=True)
        rows = []
        for _ in range(self.cfg.batch):
            data, center, k = self.sample()
            res = frame_terms(self.model, data, self.cfg, center, k)
            (res.report.total / self.cfg.batch).backward()
            rows.append((data.name, res.target_frame, res.alpha, res.report.values()))
        for _, p in _named_params(self.model):
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise TrainingAbort("gradient", float("nan"))
        self.optimizer.step()
        self.step += 1
        name, frame, alpha, vals = rows[0]
        row = {"step": self.step, "subject": name, "frame": frame, "alpha": alpha}
        if len(rows) > 1:
            vals = {key: float(np.mean([r[3][key] for r in rows])) for key in vals}
        row.update(vals)
        self.history.append(row)
        self._write_log(row)
        return row

    def _write_log(self, row: dict) -> None:
        if not self.cfg.log_path:
            return
        path = Path(self.cfg.log_path)
        new = not path.exists() or self._log is None
        with open(path, "w" if new else "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            if new:
                w.writeheader()
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
        self._log = path

    def run(self, steps: int | None = None) -> "Trainer":
        """Train for ``steps`` updates; NaN losses abort after restoring the last good state."""
        steps = self.cfg.steps if steps is None else steps
        target = self.cfg.target_psnr
        if steps and self.last_good is None:
            self.last_good = self.checkpoint().to_bytes()
        for _ in range(steps):
            try:
                self.train_step()
            except TrainingAbort:
                if self.last_good is not None:
                    restored = Checkpoint.from_bytes(self.last_good)
                    self.model.load_state_dict(restored.model_state(), strict=False)
                raise
            if self.cfg.eval_every and self.step % self.cfg.eval_every == 0:
                rec = self.quick_eval()
                self.eval_history.append(rec)
                if target is not None and rec["psnr"] >= target:
                    break
            if self.cfg.eval_every and self.step % max(self.cfg.eval_every, 50) == 0:
                self.last_good = self.checkpoint().to_bytes()
        return self

    def quick_eval(self) -> dict:
        name = self.order[-1]
        data = self.subjects[name]
        frames = data.holdout_frames(self.cfg)[::self.cfg.eval_stride]
        m = evaluate(self.model, data, frames, self.cfg)
        return {"step": self.step, "psnr": m["mean"]["psnr"], "ssim": m["mean"]["ssim"]}

    def checkpoint(self) -> "Checkpoint":
        return Checkpoint.capture(self)


def train_stage1(subjects: list[SubjectData], cfg: TrainConfig) -> "Checkpoint":
    if len(subjects) < 2:
        raise ConfigError("stage 1 trains on at least two subjects")
    cfg = replace(cfg, stage=1)
    return Trainer(cfg, subjects).run().checkpoint()


def stage2_trainer(checkpoint: "Checkpoint | None", subject: SubjectData, cfg: TrainConfig) -> Trainer:
    cfg = replace(cfg, stage=2)
    if checkpoint is None:
        if not cfg.from_scratch:
            raise ConfigError("stage 2 needs a stage-1 checkpoint or from_scratch=True")
        return Trainer(cfg, [subject])
    model = checkpoint.build_model()
    if subject.name in model.latents:
        del model.latents[subject.name]
    model.add_subject(subject.name)
    return Trainer(cfg, [subject], model=model)


def train_stage2(checkpoint: "Checkpoint | None", subject: SubjectData, cfg: TrainConfig) -> "Checkpoint":
    return stage2_trainer(checkpoint, subject, cfg).run().checkpoint()


# ---------------------------------------------------------------------------
# Evaluation


def psnr(pred, gt) -> float:
    mse = float(((torch.as_tensor(pred) - torch.as_tensor(gt)) ** 2).mean())
    if mse <= 0:
        return PSNR_CEILING
    return min(PSNR_CEILING, 10 * math.log10(1.0 / mse))


def normal_angle_error(n_pred, n_gt, s_pred, s_gt) -> float:
    """Mean angle (degrees) between encoded normal maps inside both silhouettes."""
    m = (torch.as_tensor(s_pred) > 0.5) & (torch.as_tensor(s_gt) > 0.5)
    if not bool(m.any()):
        return 0.0
    c = (decode_normals(torch.as_tensor(n_pred)[m]) * decode_normals(torch.as_tensor(n_gt)[m])).sum(-1)
    return float(torch.rad2deg(torch.acos(c.clamp(-1, 1))).mean())


def frame_offsets(model: AvatarModel, data: SubjectData, feats, poses: list[Pose], i: int,
                  cfg: TrainConfig, alpha: float = 0.5):
    """Cloth offsets for frame ``i`` of a track from the window centered on it."""
    if not cfg.use_closim:
        return None
    window = build_window(poses, poses[i].timestamp, cfg.delta_t, clamp=True)
    off = cloth_offsets(model, data, feats, window, cfg)
    return interpolate_offsets(off.frame(0), off.frame(2), alpha)


@torch.no_grad()
def predict_frames(model: AvatarModel, data: SubjectData, frames, cfg: TrainConfig, poses=None,
                   camera: Camera | None = None) -> list[RenderTargets]:
    poses = data.sequence.poses if poses is None else poses
    cam = camera or data.camera
    gauss, feats, _ = static_avatar(model, data)
    out = []
    for i in frames:
        off = frame_offsets(model, data, feats, poses, int(i), cfg)
        out.append(render_frame(data, gauss, poses[int(i)], cam, off).detach())
    return out


def evaluate(model: AvatarModel, data: SubjectData, frames, cfg: TrainConfig,
             perceptual=pyramid_gradient_distance) -> dict:
    """Per-frame and mean PSNR, SSIM, perceptual proxy and normal angular error."""
    frames = [int(i) for i in frames]
    renders = predict_frames(model, data, frames, cfg)
    rows = []
    for i, rt in zip(frames, renders):
        gt = torch.as_tensor(data.sequence.rgb[i])
        rows.append({
            "frame": i,
            "psnr": psnr(rt.rgb, gt),
            "ssim": float(ssim(rt.rgb, gt)),
            "perceptual": float(perceptual(rt.rgb, gt)),
            "normal_error_deg": normal_angle_error(rt.normal, data.sequence.normal[i], rt.silhouette,
                                                   data.sequence.silhouette[i]),
        })
    keys = ["psnr", "ssim", "perceptual", "normal_error_deg"]
    mean = {k: float(np.mean([r[k] for r in rows])) if rows else float("nan") for k in keys}
    return {"subject": data.name, "frames": rows, "mean": mean}


def write_metrics(metrics: dict, json_path: str | Path, csv_path: str | Path | None = None) -> None:
    Path(json_path).parent.mkdir(parents=True, exist_ok=True)
    Path(json_path).write_text(json.dumps(metrics, indent=2, sort_keys=True))
    if csv_path:
        rows = metrics["frames"]
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["frame"])
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------------------
# Animation


@torch.no_grad()
def decomposed_avatar(model: AvatarModel, data: SubjectData) -> DecomposedAvatar:
    gauss, feats, _ = static_avatar(model, data)
    mesh = data.mesh
    return DecomposedAvatar(gauss.detach(), mesh.vertices.copy(), mesh.skin_weights.copy(),
                            mesh.faces.copy(), data.labels.copy(), mesh,
                            feats[torch.as_tensor(data.cloth_idx)].detach().clone(), {"name": data.name})


@torch.no_grad()
def animate_avatar(avatar: DecomposedAvatar, closim: CloSim | None, poses: list[Pose], camera: Camera,
                   delta_t: float = 0.2, out_dir: str | Path | None = None, part: str | None = None,
                   collapse_window: bool = False) -> list[RenderTargets]:
    """Render a pose track with sliding windows clamped at the track ends."""
    if len(poses) < 2 or poses[-1].timestamp - poses[0].timestamp < 2 * delta_t - 1e-9:
        raise WindowBoundaryError("pose track shorter than one window")
    cloth = avatar.cloth_indices
    graph = ClothGraph.from_faces(avatar.faces, cloth)
    subset = None if part is None else avatar.part_indices()[part]
    out = []
    for i, p in enumerate(poses):
        full = None
        if closim is not None and len(cloth):
            w = build_window(poses, p.timestamp, delta_t, clamp=True)
            if collapse_window:
                w = w.collapsed()
            off = closim(avatar.cloth_features, w, graph)
            full = scatter_offsets(len(avatar), cloth, *interpolate_offsets(off.frame(0), off.frame(2), 0.5))
        rt = avatar.render(p, camera, full, subset).detach()
        out.append(rt)
        if out_dir is not None:
            d = Path(out_dir)
            d.mkdir(parents=True, exist_ok=True)
            write_png(d / f"{i:04d}.png", rt.rgb.numpy())
            write_flt(d / f"{i:04d}.flt", rt.rgb.numpy())
            write_flt(d / f"{i:04d}_silhouette.flt", rt.silhouette.numpy())
    return out


def animate(model: AvatarModel, data: SubjectData, poses: list[Pose], camera: Camera, cfg: TrainConfig,
            out_dir=None, part: str | None = None) -> list[RenderTargets]:
    avatar = decomposed_avatar(model, data)
    return animate_avatar(avatar, model.closim if cfg.use_closim else None, poses, camera, cfg.delta_t,
                          out_dir, part, cfg.collapse_window)


# ---------------------------------------------------------------------------
# Checkpoint container


_DTYPES = {"float64": (torch.float64, "<f8"), "float32": (torch.float32, "<f4"), "int64": (torch.int64, "<i8"),
           "uint8": (torch.uint8, "|u1")}


@dataclass
class Checkpoint:
    """Versioned binary container: magic, version, JSON header, raw tensor bytes."""

    tensors: dict[str, torch.Tensor]
    header: dict

    @property
    def step(self) -> int:
        return int(self.header["step"])

    @property
    def config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.header["config"])

    @classmethod
    def capture(cls, trainer: Trainer) -> "Checkpoint":
        tensors = {f"model.{k}": v.detach().clone() for k, v in trainer.model.state_dict().items()}
        names = {id(p): n for n, p in trainer.model.named_parameters()}
        for p, st in trainer.optimizer.state.items():
            for k, v in st.items():
                tensors[f"optim.{names[id(p)]}.{k}"] = torch.as_tensor(v).detach().clone()
        for name, data in trainer.subjects.items():
            tensors[f"labels.{name}"] = torch.as_tensor(data.labels.labels, dtype=torch.int64)
        header = {
            "version": CKPT_VERSION,
            "step": trainer.step,
            "config": trainer.cfg.portable_dict(),
            "config_hash": trainer.cfg.hash(),
            "subjects": list(trainer.order),
            "rng": trainer.rng.bit_generator.state,
        }
        return cls(tensors, header)

    def model_state(self) -> dict[str, torch.Tensor]:
        return {k[6:]: v for k, v in self.tensors.items() if k.startswith("model.")}

    def build_model(self) -> AvatarModel:
        model = build_model(self.config)
        state = self.model_state()
        for k in state:
            if k.startswith("latents."):
                model.latents[k.split(".", 1)[1]] = nn.Parameter(torch.zeros_like(state[k]))
        model.load_state_dict(state)
        return model

    def restore(self, subjects: list[SubjectData], cfg: TrainConfig | None = None) -> Trainer:
        """Trainer positioned exactly where this checkpoint was taken."""
        cfg = cfg or self.config
        model = self.build_model()
        tr = Trainer(cfg, subjects, model=model, step=self.step, rng_state=self.header["rng"])
        names = {n: p for n, p in model.named_parameters()}
        state = {}
        for k, v in self.tensors.items():
            if k.startswith("optim."):
                pname, key = k[6:].rsplit(".", 1)
                state.setdefault(names[pname], {})[key] = v.clone()
        for p, st in state.items():
            tr.optimizer.state[p] = st
        return tr

    # serialization ---------------------------------------------------------
    def to_bytes(self) -> bytes:
        manifest, blobs, offset = [], [], 0
        for name in sorted(self.tensors):
            t = self.tensors[name].detach().contiguous()
            dname = str(t.dtype).replace("torch.", "")
            if dname not in _DTYPES:
                raise ContractError(f"unsupported dtype {t.dtype} for {name}")
            raw = t.numpy().astype(_DTYPES[dname][1]).tobytes()
            manifest.append({"name": name, "shape": list(t.shape), "dtype": dname, "offset": offset,
                             "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = dict(self.header, tensors=manifest)
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hb)) + hb + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != CKPT_MAGIC:
            raise ContractError("not a checkpoint container")
        version, hlen = struct.unpack("<IQ", data[8:20])
        if version != CKPT_VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        header = json.loads(data[20:20 + hlen])
        base = 20 + hlen
        tensors = {}
        for m in header.pop("tensors"):
            tdt, npdt = _DTYPES[m["dtype"]]
            buf = data[base + m["offset"]: base + m["offset"] + m["nbytes"]]
            arr = np.frombuffer(buf, dtype=npdt).reshape(m["shape"]).copy()
            tensors[m["name"]] = torch.from_numpy(arr).to(tdt)
        return cls(tensors, header)

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
