"""Part labels for Gaussians: projection, classification, refinement, partition, transfer."""

from __future__ import annotations

import enum
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from torch import nn

from .body import DTYPE, HAND_L, HAND_R, HEAD, TORSO, Camera, ContractError, camera_depth
from .codec import GaussianSet


class PartLabel(enum.IntEnum):
    UNKNOWN = -1
    FACE = 0
    HANDS = 1
    CLOTH = 2
    BODY = 3


PARTS = (PartLabel.FACE, PartLabel.HANDS, PartLabel.CLOTH, PartLabel.BODY)
PART_NAMES = {PartLabel.FACE: "face", PartLabel.HANDS: "hands", PartLabel.CLOTH: "cloth",
              PartLabel.BODY: "body"}
NUM_PARTS = len(PARTS)
SEG_BACKGROUND = 255  # segmentation pixel value for "no person"

# segmentation palette: label value -> RGB
SEG_PALETTE = {
    int(PartLabel.FACE): (255, 200, 0),
    int(PartLabel.HANDS): (0, 200, 255),
    int(PartLabel.CLOTH): (220, 30, 60),
    int(PartLabel.BODY): (60, 180, 75),
    SEG_BACKGROUND: (255, 255, 255),
}


class TransferError(ValueError):
    pass


@dataclass
class LabelField:
    labels: np.ndarray  # (N,) int, PartLabel values
    confidence: np.ndarray  # (N,) in [0, 1]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if self.labels.shape != self.confidence.shape:
            raise ContractError("labels and confidences differ in length")
        if not np.isfinite(self.confidence).all():
            raise ContractError("confidences must be finite")

    @classmethod
    def uniform(cls, n: int, label: PartLabel = PartLabel.BODY) -> "LabelField":
        return cls(np.full(n, int(label)), np.ones(n))

    def __len__(self) -> int:
        return len(self.labels)

    def copy(self) -> "LabelField":
        return LabelField(self.labels.copy(), self.confidence.copy())


# ---------------------------------------------------------------------------
# Pseudo-labels from 2D segmentations


def visibility_tolerance(depth_image: np.ndarray, fraction: float = 0.02) -> float:
    """``fraction`` of the scene depth range, taken as [0, max foreground depth]."""
    d = np.asarray(depth_image)
    fg = d[d > 0]
    return fraction * float(fg.max()) if fg.size else 0.0


def project_labels(positions, camera: Camera, seg_image: np.ndarray, depth_image: np.ndarray,
                   tau: float | None = None) -> np.ndarray:
    """Per-point label from the pixel it lands on, or UNKNOWN if hidden or off-screen.

    A point is visible when its camera depth is within ``tau`` of the depth map
    at its pixel; background pixels and points behind the camera give UNKNOWN.
    """
    seg = np.asarray(seg_image)
    depth = np.asarray(depth_image, dtype=np.float64)
    if seg.shape != (camera.height, camera.width) or depth.shape != seg.shape:
        raise ContractError(f"image shape {seg.shape} does not match camera "
                            f"{camera.height}x{camera.width}")
    p = torch.as_tensor(positions, dtype=DTYPE).detach()
    z, behind = camera_depth(p, camera)
    pc = p.numpy() @ camera.R.T + camera.t
    zz = np.where(behind.numpy(), 1.0, pc[:, 2])
    u = np.rint(camera.fx * pc[:, 0] / zz + camera.cx).astype(np.int64)
    v = np.rint(camera.fy * pc[:, 1] / zz + camera.cy).astype(np.int64)
    out = np.full(len(p), int(PartLabel.UNKNOWN), dtype=np.int64)
    ok = ~behind.numpy() & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    if tau is None:
        tau = visibility_tolerance(depth)
    iu, iv = u[ok], v[ok]
    lab = seg[iv, iu].astype(np.int64)
    d_img = depth[iv, iu]
    vis = (lab != SEG_BACKGROUND) & (d_img > 0) & (np.abs(z.numpy()[ok] - d_img) <= tau)
    out[np.nonzero(ok)[0][vis]] = lab[vis]
    return out


def merge_pseudo_labels(views: list[np.ndarray]) -> np.ndarray:
    """Per-point majority over views, ignoring UNKNOWN; ties go to the lower label."""
    V = np.stack(views)
    counts = np.stack([(V == int(k)).sum(0) for k in PARTS], axis=1)
    best = counts.argmax(1)
    return np.where(counts.max(1) > 0, best, int(PartLabel.UNKNOWN))


# ---------------------------------------------------------------------------
# Classifier


class LabelClassifier(nn.Module):
    """Small MLP on (canonical position, per-point feature) with input standardization."""

    def __init__(self, in_dim: int, hidden: int = 64, num_classes: int = NUM_PARTS):
        super().__init__()
        self.register_buffer("mean", torch.zeros(in_dim, dtype=DTYPE))
        self.register_buffer("std", torch.ones(in_dim, dtype=DTYPE))
        self.net = nn.Sequential(nn.Linear(in_dim, hidden, dtype=DTYPE), nn.ReLU(),
                                 nn.Linear(hidden, hidden, dtype=DTYPE), nn.ReLU(),
                                 nn.Linear(hidden, num_classes, dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net((x - self.mean) / self.std)


def classifier_inputs(features, positions=None) -> torch.Tensor:
    f = torch.as_tensor(features, dtype=DTYPE).detach()
    if positions is None:
        return f
    return torch.cat([torch.as_tensor(positions, dtype=DTYPE).detach(), f], dim=1)


def train_label_classifier(features, pseudo_labels, epochs: int = 300, positions=None,
                           hidden: int = 64, lr: float = 1e-2, seed: int = 0):
    """Cross-entropy over the non-UNKNOWN points; returns (classifier, training accuracy)."""
    x = classifier_inputs(features, positions)
    y = torch.as_tensor(np.asarray(pseudo_labels), dtype=torch.long)
    known = y >= 0
    if not bool(known.any()):
        raise ContractError("no labeled points")
    present = set(int(k) for k in torch.unique(y[known]))
    missing = [PART_NAMES[k] for k in PARTS if int(k) not in present]
    if missing:
        warnings.warn(f"classes absent from pseudo-labels: {missing}", RuntimeWarning)
    gen = torch.Generator().manual_seed(seed)
    clf = LabelClassifier(x.shape[1], hidden)
    with torch.no_grad():
        for p in clf.net.parameters():
            if p.ndim == 2:
                bound = 1.0 / np.sqrt(p.shape[1])
                p.copy_(torch.rand(p.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)
            else:
                p.zero_()
        clf.mean.copy_(x[known].mean(0))
        clf.std.copy_(x[known].std(0).clamp_min(1e-6) if int(known.sum()) > 1 else torch.ones(x.shape[1]))
    xs, ys = x[known], y[known]
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        loss = nn.functional.cross_entropy(clf(xs), ys)
        loss.backward()
        opt.step()
    with torch.no_grad():
        acc = float((clf(xs).argmax(1) == ys).double().mean())
    return clf, acc


def predict_labels(classifier: LabelClassifier, features, positions=None) -> LabelField:
    with torch.no_grad():
        prob = torch.softmax(classifier(classifier_inputs(features, positions)), dim=1)
    conf, lab = prob.max(1)
    return LabelField(lab.numpy(), conf.numpy())


# ---------------------------------------------------------------------------
# Connectivity refinement


def _neighbors(edges: np.ndarray, n: int) -> sparse.csr_matrix:
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(e) and e.max() >= n:
        raise ContractError("edge index outside the label field")
    A = sparse.coo_matrix((np.ones(2 * len(e)), (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])),
                          shape=(n, n)).tocsr()
    A.data[:] = 1.0
    return A


def _vote_sweep(lab: np.ndarray, indptr, indices) -> bool:
    """One in-place sequential sweep; returns whether anything changed.

    A point switches only when at most one neighbor shares its label and some
    other label is strictly more common; the most common label wins, lower
    label on ties.
    """
    changed = False
    for i in range(len(lab)):
        nb = lab[indices[indptr[i]:indptr[i + 1]]]
        if len(nb) == 0:
            continue
        own = int((nb == lab[i]).sum())
        if own > 1:
            continue
        vals, counts = np.unique(nb, return_counts=True)
        j = counts.argmax()
        if counts[j] > own and vals[j] != lab[i]:
            lab[i] = vals[j]
            changed = True
    return changed


def _component_pass(lab: np.ndarray, A: sparse.csr_matrix, min_component: int) -> bool:
    """Relabel small same-label components to their dominant neighboring label.

    Components containing a point whose whole 1-ring shares its label are kept.
    """
    n = len(lab)
    rows, cols = A.nonzero()
    same = lab[rows] == lab[cols]
    S = sparse.coo_matrix((np.ones(int(same.sum())), (rows[same], cols[same])), shape=(n, n))
    ncomp, comp = connected_components(S, directed=False)
    sizes = np.bincount(comp, minlength=ncomp)
    deg = np.diff(A.indptr)
    same_deg = np.bincount(rows[same], minlength=n)
    interior = (deg > 0) & (same_deg == deg)
    protected = np.zeros(ncomp, dtype=bool)
    protected[comp[interior]] = True
    changed = False
    order = np.lexsort((np.arange(ncomp), sizes))
    for c in order:
        if sizes[c] >= min_component or protected[c]:
            continue
        members = np.nonzero(comp == c)[0]
        sub = A[members]
        outside = sub.indices[comp[sub.indices] != c]
        if (lab[outside] == lab[members[0]]).any():
            continue  # a neighbor relabeled this pass joined it; revisit next pass
        nb = outside
        if len(nb) == 0:
            continue
        vals, counts = np.unique(lab[nb], return_counts=True)
        lab[members] = vals[counts.argmax()]
        changed = True
    return changed


def refine_labels(field: LabelField, edges: np.ndarray, max_iters: int = 100,
                  min_component: int | None = None) -> LabelField:
    """Majority-vote smoothing over 1-rings, then small-component removal, to a fixpoint.

    Both steps only ever raise the number of edges whose endpoints agree, so the
    loop terminates; the result is a fixpoint of both steps, which makes the
    operation idempotent.  Points whose whole 1-ring shares their label are never
    changed.
    """
    n = len(field)
    lab = field.labels.copy()
    A = _neighbors(edges, n)
    if min_component is None:
        min_component = max(5, int(np.ceil(0.001 * n)))
    for _ in range(max_iters):
        changed = False
        while _vote_sweep(lab, A.indptr, A.indices):
            changed = True
        if _component_pass(lab, A, min_component):
            changed = True
        if not changed:
            break
    conf = np.where(lab == field.labels, field.confidence, 0.5)
    return LabelField(lab, conf)


# ---------------------------------------------------------------------------
# Partition and transfer


def partition(gaussians: GaussianSet | int, labels: LabelField, part_hint: np.ndarray | None = None
              ) -> dict[str, np.ndarray]:
    """Disjoint index sets for face, hands, cloth and body covering every Gaussian.

    With ``part_hint`` the face and hands sets come from the mesh regions
    instead of the labels; anything not face, hands or cloth is body.
    """
    n = gaussians if isinstance(gaussians, int) else len(gaussians)
    lab = np.asarray(labels.labels)
    if len(lab) != n:
        raise ContractError(f"{len(lab)} labels for {n} Gaussians")
    lab = lab.copy()
    if part_hint is not None:
        hint = np.asarray(part_hint)
        lab[np.isin(lab, (int(PartLabel.FACE), int(PartLabel.HANDS)))] = int(PartLabel.BODY)
        lab[hint == HEAD] = int(PartLabel.FACE)
        lab[(hint == HAND_L) | (hint == HAND_R)] = int(PartLabel.HANDS)
    out = {PART_NAMES[k]: np.nonzero(lab == int(k))[0] for k in (PartLabel.FACE, PartLabel.HANDS,
                                                                  PartLabel.CLOTH)}
    out["body"] = np.nonzero(~np.isin(lab, [int(PartLabel.FACE), int(PartLabel.HANDS),
                                            int(PartLabel.CLOTH)]))[0]
    return out


def torso_box(mesh) -> np.ndarray:
    """(2, 3) bounding box of the torso-region vertices."""
    v = mesh.vertices[mesh.part_hint == TORSO]
    return np.stack([v.min(0), v.max(0)])


def transfer_clothing(source, target):
    """Replace the target's cloth Gaussians with the source's.

    Source cloth is mapped from the source torso box onto the target torso box
    (per-axis scale about the box centers) and takes skin weights from the
    nearest target canonical vertex.  Non-cloth target Gaussians are kept as is.
    """
    from .avatar import DecomposedAvatar

    src_cloth = source.part_indices()["cloth"]
    if len(src_cloth) == 0:
        raise TransferError("source avatar has no cloth Gaussians")
    tgt_keep = np.sort(np.concatenate([v for k, v in target.part_indices().items() if k != "cloth"]))

    sb, tb = torso_box(source.body), torso_box(target.body)
    ratio = (tb[1] - tb[0]) / (sb[1] - sb[0])
    cs, ct = sb.mean(0), tb.mean(0)

    def remap(p):
        return ct + (p - cs) * ratio

    r = torch.as_tensor(ratio, dtype=DTYPE)
    src_pos = torch.as_tensor(ct, dtype=DTYPE) + (source.gaussians.positions[src_cloth].detach()
                                                  - torch.as_tensor(cs, dtype=DTYPE)) * r
    anchors = remap(source.anchors[src_cloth])
    _, nearest = cKDTree(target.body.vertices).query(anchors)
    weights = target.body.skin_weights[nearest]

    tg, sg = target.gaussians, source.gaussians
    keep_t = torch.as_tensor(tgt_keep, dtype=torch.long)
    cl_t = torch.as_tensor(src_cloth, dtype=torch.long)
    gauss = GaussianSet(torch.cat([tg.positions[keep_t].detach(), src_pos]),
                        torch.cat([tg.colors[keep_t].detach(), sg.colors[cl_t].detach()]),
                        torch.cat([tg.scales[keep_t].detach(), sg.scales[cl_t].detach()]))

    nk = len(tgt_keep)
    map_t = np.full(len(target), -1)
    map_t[tgt_keep] = np.arange(nk)
    map_s = np.full(len(source), -1)
    map_s[src_cloth] = nk + np.arange(len(src_cloth))
    ft = map_t[target.faces]
    fs = map_s[source.faces]
    faces = np.concatenate([ft[(ft >= 0).all(1)], fs[(fs >= 0).all(1)]])

    lab = np.concatenate([target.labels.labels[tgt_keep], source.labels.labels[src_cloth]])
    conf = np.concatenate([target.labels.confidence[tgt_keep], source.labels.confidence[src_cloth]])
    feats = None
    if source.cloth_features is not None:
        feats = source.cloth_features.detach().clone()
    return DecomposedAvatar(gauss, np.concatenate([target.anchors[tgt_keep], anchors]),
                            np.concatenate([target.skin_weights[tgt_keep], weights]), faces,
                            LabelField(lab, conf), target.body, feats,
                            {"transferred_from": source.meta.get("name", "source")})


# ---------------------------------------------------------------------------
# Persistence


def write_segmentation(path: str | Path, seg: np.ndarray) -> None:
    """Paletted PNG; pixel values are label ids (255 = background)."""
    img = Image.fromarray(np.asarray(seg, dtype=np.uint8), mode="P")
    pal = [0] * 768
    for k, rgb in SEG_PALETTE.items():
        pal[3 * k:3 * k + 3] = rgb
    img.putpalette(pal)
    img.save(path)


def read_segmentation(path: str | Path) -> np.ndarray:
    img = Image.open(path)
    if img.mode != "P":
        raise ContractError(f"{path} is not a paletted image")
    return np.asarray(img, dtype=np.uint8)


def save_labels(field: LabelField, path: str | Path) -> None:
    rec = {PART_NAMES[k]: np.nonzero(field.labels == int(k))[0].tolist() for k in PARTS}
    rec["unknown"] = np.nonzero(field.labels == int(PartLabel.UNKNOWN))[0].tolist()
    rec["confidence"] = field.confidence.tolist()
    Path(path).write_text(json.dumps(rec))


def load_labels(path: str | Path) -> LabelField:
    rec = json.loads(Path(path).read_text())
    conf = np.asarray(rec["confidence"], dtype=np.float64)
    lab = np.full(len(conf), int(PartLabel.UNKNOWN), dtype=np.int64)
    for k in PARTS:
        lab[np.asarray(rec[PART_NAMES[k]], dtype=np.int64)] = int(k)
    return LabelField(lab, conf)
