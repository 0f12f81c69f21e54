"""Step 2: boundary/displacement branches trained on CAM seeds, affinity
random walk, and pseudo-mask emission."""
from __future__ import annotations

import functools
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn.functional as F
from scipy import ndimage

from .crf import ProbField
from .data import IGNORE_LABEL, AugmentationConfig, augment
from .nets import BoundaryDisplacementHeads
from .torchutil import seed_everything, to_tensor

log = logging.getLogger(__name__)

POSITIVE, NEGATIVE, NEUTRAL = 1, 0, -1


@dataclass
class AffinityField:
    boundary: np.ndarray        # (h, w) in [0, 1]
    displacement: np.ndarray    # (2, h, w), (dy, dx) in reduced-resolution pixels
    stride: int = 4


@dataclass
class AffinityPairSet:
    shape: tuple                # (h, w) of the pixel grid
    radius: float
    pairs: np.ndarray           # (P, 2) flat pixel indices, first < second
    labels: np.ndarray          # (P,) POSITIVE / NEGATIVE / NEUTRAL
    background: np.ndarray      # (P,) True for positive background-background pairs

    def subset(self, label):
        return self.pairs[self.labels == label]


@dataclass
class PseudoMask:
    image_id: str
    labels: np.ndarray          # (H, W) uint8, 0 = background, 255 = ignore


@dataclass
class IrnetConfig:
    radius: float = 5.0
    fg_confident: float = 0.70
    bg_confident: float = 0.95
    lr_displacement: float = 0.05
    lr_boundary: float = 0.005
    momentum: float = 0.9
    epochs: int = 5
    batch_size: int = 16
    seed: int = 0
    head_width: int = 16
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    # enlarge the training set with rescaled copies instead of fusing CAMs
    multiscale_augment: bool = False
    scales: tuple = (0.5, 1.0, 1.5, 2.0)

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig(**self.augmentation)
        self.scales = tuple(self.scales)
        if not (0 < self.fg_confident < 1 and 0 < self.bg_confident < 1):
            raise ValueError("confidence cutoffs must lie in (0, 1)")


# ---------------------------------------------------------------------------
# pair geometry

@functools.lru_cache(maxsize=None)
def neighbor_offsets(radius: float):
    """Offsets (dy, dx) with 0 < |d| <= radius in the forward half plane."""
    r = int(math.floor(radius))
    out = []
    for dy in range(0, r + 1):
        for dx in range(-r, r + 1):
            if (dy == 0 and dx <= 0) or dy * dy + dx * dx > radius * radius:
                continue
            out.append((dy, dx))
    return tuple(out)


@functools.lru_cache(maxsize=None)
def grid_pairs(h: int, w: int, radius: float) -> np.ndarray:
    """Every unordered pixel pair within ``radius``, as flat indices (a < b)."""
    yy, xx = np.mgrid[0:h, 0:w]
    out = []
    for dy, dx in neighbor_offsets(radius):
        y2, x2 = yy + dy, xx + dx
        ok = (y2 < h) & (x2 >= 0) & (x2 < w)
        a = (yy * w + xx)[ok]
        b = (y2 * w + x2)[ok]
        out.append(np.stack([a, b], 1))
    if not out:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate(out).astype(np.int64)


def _round_div(num: int, den: int) -> int:
    # round-half-up in exact integer arithmetic
    return (2 * num + den) // (2 * den)


def path_pixels(a, b):
    """Pixels on the discrete segment from ``a`` to ``b`` (both included).

    Point k of n = max(|dy|, |dx|) is ``round(a + k (b - a) / n)``, computed
    on integers; the reversed segment yields the identical pixel set.
    """
    (ay, ax), (by, bx) = a, b
    n = max(abs(by - ay), abs(bx - ax))
    if n == 0:
        return [(ay, ax)]
    pts = []
    for k in range(n + 1):
        y = _round_div(ay * n + k * (by - ay), n)
        x = _round_div(ax * n + k * (bx - ax), n)
        if not pts or pts[-1] != (y, x):
            pts.append((y, x))
    return pts


def pair_affinity_from_boundary(boundary: np.ndarray, pixel_a, pixel_b,
                                radius: float = 5.0) -> float:
    boundary = np.asarray(boundary, dtype=np.float64)
    (ay, ax), (by, bx) = pixel_a, pixel_b
    h, w = boundary.shape
    for y, x in (pixel_a, pixel_b):
        if not (0 <= y < h and 0 <= x < w):
            raise ValueError(f"pixel {(y, x)} out of bounds")
    if (ay - by) ** 2 + (ax - bx) ** 2 > radius * radius:
        raise ValueError("pixel pair farther apart than the radius")
    # sorted so that (a, b) and (b, a) multiply in the same order
    return float(np.prod([1.0 - boundary[p] for p in sorted(path_pixels(pixel_a, pixel_b))]))


@functools.lru_cache(maxsize=None)
def path_matrix(h: int, w: int, radius: float):
    """Sparse (P x N) 0/1 matrix: row p marks the path pixels of pair p."""
    pairs = grid_pairs(h, w, radius)
    rows, cols = [], []
    for p, (a, b) in enumerate(pairs):
        for y, x in path_pixels(divmod(int(a), w), divmod(int(b), w)):
            rows.append(p)
            cols.append(y * w + x)
    data = np.ones(len(rows))
    return sp.csr_matrix((data, (rows, cols)), shape=(len(pairs), h * w))


def pair_affinities(boundary: np.ndarray, radius: float) -> np.ndarray:
    h, w = boundary.shape
    b = np.clip(np.asarray(boundary, dtype=np.float64).ravel(), 0, 1)
    with np.errstate(divide="ignore"):
        logs = np.log1p(-b)
    return np.exp(path_matrix(h, w, radius) @ logs)


# ---------------------------------------------------------------------------

def confident_labels(field: ProbField, fg_confident: float, bg_confident: float) -> np.ndarray:
    """Per-pixel class id where confident, 255 elsewhere."""
    probs = np.asarray(field.probs)
    ids = np.asarray(field.class_ids)
    out = np.full(probs.shape[1:], IGNORE_LABEL, dtype=np.uint8)
    if len(ids) > 1:
        fg = probs[1:]
        best = fg.argmax(0)
        ok = fg.max(0) > fg_confident
        out[ok] = ids[1:][best[ok]]
    out[probs[0] > bg_confident] = 0
    return out


def make_affinity_labels(field: ProbField, fg_confident: float = 0.70,
                         bg_confident: float = 0.95, radius: float = 5.0) -> AffinityPairSet:
    h, w = field.probs.shape[1:]
    lab = confident_labels(field, fg_confident, bg_confident).ravel()
    return label_pairs(lab, (h, w), radius)


def label_pairs(lab: np.ndarray, shape, radius: float) -> AffinityPairSet:
    h, w = shape
    lab = np.asarray(lab).ravel()
    pairs = grid_pairs(h, w, radius)
    la, lb = lab[pairs[:, 0]], lab[pairs[:, 1]]
    known = (la != IGNORE_LABEL) & (lb != IGNORE_LABEL)
    labels = np.full(len(pairs), NEUTRAL, dtype=np.int8)
    labels[known & (la == lb)] = POSITIVE
    labels[known & (la != lb)] = NEGATIVE
    bg = (labels == POSITIVE) & (la == 0)
    return AffinityPairSet((h, w), radius, pairs, labels, bg)


def build_transition(boundary: np.ndarray, beta: float = 8.0, radius: float = 5.0) -> sp.csr_matrix:
    """Row-stochastic walk kernel: ``T_ij ∝ affinity(i, j) ** beta`` within the
    radius, self-transition with affinity 1."""
    if beta < 1:
        raise ValueError("beta must be >= 1")
    boundary = np.asarray(boundary, dtype=np.float64)
    h, w = boundary.shape
    n = h * w
    pairs = grid_pairs(h, w, radius)
    a = pair_affinities(boundary, radius) ** beta
    rows = np.concatenate([pairs[:, 0], pairs[:, 1], np.arange(n)])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0], np.arange(n)])
    vals = np.concatenate([a, a, np.ones(n)])
    A = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    deg = np.asarray(A.sum(1)).ravel()
    return sp.csr_matrix(sp.diags(1.0 / deg) @ A)


def random_walk_propagate(field: ProbField, T, t_iters: int = 256,
                          method: str = "iterate") -> ProbField:
    """Replace every channel ``v`` by ``T^t v`` and renormalize per pixel.

    ``method="square"`` forms ``T^t`` by repeated squaring; pixels whose mass
    vanishes entirely fall back to background.
    """
    if t_iters < 0:
        raise ValueError("t_iters must be >= 0")
    L, h, w = field.probs.shape
    if T.shape != (h * w, h * w):
        raise ValueError(f"transition {T.shape} does not match field {(h, w)}")
    v = np.asarray(field.probs, dtype=np.float64).reshape(L, -1).T   # (N, L)
    if method == "iterate":
        T = sp.csr_matrix(T)
        for _ in range(t_iters):
            v = T @ v
    elif method == "square":
        P, k = sp.identity(h * w, format="csr"), t_iters
        B = sp.csr_matrix(T)
        while k:
            if k & 1:
                P = P @ B
            k >>= 1
            if k:
                B = B @ B
        v = P @ v
    else:
        raise ValueError(f"unknown method {method!r}")
    return ProbField(field.image_id, list(field.class_ids), _renormalize(v.T.reshape(L, h, w)))


def _renormalize(v):
    v = np.clip(v, 0, None)
    s = v.sum(0, keepdims=True)
    empty = s[0] <= 0
    if empty.any():
        v = v.copy()
        v[:, empty] = 0
        v[0, empty] = 1
        s = v.sum(0, keepdims=True)
    return (v / s).astype(np.float32)


def downsample_field(field: ProbField, stride: int) -> ProbField:
    """Area-average probabilities onto the stride grid (ceil division, edge padding)."""
    L, h, w = field.probs.shape
    hh, ww = -(-h // stride), -(-w // stride)
    p = np.pad(field.probs, ((0, 0), (0, hh * stride - h), (0, ww * stride - w)), mode="edge")
    p = p.reshape(L, hh, stride, ww, stride).mean((2, 4))
    return ProbField(field.image_id, list(field.class_ids), _renormalize(p))


def upsample_field(field: ProbField, size) -> ProbField:
    t = torch.from_numpy(np.ascontiguousarray(field.probs, dtype=np.float32))[None]
    up = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)[0].numpy()
    return ProbField(field.image_id, list(field.class_ids), _renormalize(up))


def refine_with_displacement(field: ProbField, affinity: AffinityField, enabled: bool = False,
                             percentile: float = 90.0) -> ProbField:
    """Keep class scores only at low-displacement pixels (magnitude at or below
    the given percentile); other pixels are zeroed and refilled by the walk."""
    if not enabled:
        return field
    disp = np.asarray(affinity.displacement, dtype=np.float64)
    if not np.isfinite(disp).all():
        raise ValueError("displacement field must be finite")
    mag = np.sqrt((disp ** 2).sum(0))
    if mag.shape != field.probs.shape[1:]:
        raise ValueError("displacement and field resolution differ")
    seeds = mag <= np.percentile(mag, percentile)
    probs = np.where(seeds[None], field.probs, 0).astype(np.float32)
    return ProbField(field.image_id, list(field.class_ids), probs)


def emit_pseudo_mask(field: ProbField, irnet_threshold: float = 0.3, size=None,
                     ignore_band: float = 0.0) -> PseudoMask:
    """Foreground argmax where its score beats the threshold, background elsewhere.

    ``size`` upsamples the label map by nearest neighbour. With a positive
    ``ignore_band``, pixels whose best score lies within the band of the
    threshold get the ignore label.
    """
    if not 0 < irnet_threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    probs = np.asarray(field.probs)
    ids = np.asarray(field.class_ids, dtype=np.int64)
    h, w = probs.shape[1:]
    labels = np.zeros((h, w), dtype=np.uint8)
    if len(ids) > 1:
        fg = probs[1:]
        order = np.argsort(ids[1:], kind="stable")
        fg, fg_ids = fg[order], ids[1:][order]
        best = fg.argmax(0)
        score = fg.max(0)
        on = score > irnet_threshold
        labels[on] = fg_ids[best[on]]
        if ignore_band > 0:
            labels[np.abs(score - irnet_threshold) < ignore_band] = IGNORE_LABEL
    if size is not None and tuple(size) != (h, w):
        H, W = size
        ys = np.minimum((np.arange(H) + 0.5) * h / H, h - 1).astype(int)
        xs = np.minimum((np.arange(W) + 0.5) * w / W, w - 1).astype(int)
        labels = labels[ys][:, xs]
    return PseudoMask(field.image_id, labels)


# ---------------------------------------------------------------------------
# training

def block_consensus(labels: np.ndarray, stride: int) -> np.ndarray:
    """Reduce a label map by ``stride``: a cell keeps a label only if every
    pixel in its block agrees, otherwise it becomes the ignore label."""
    h, w = labels.shape
    hh, ww = -(-h // stride), -(-w // stride)
    p = np.pad(labels, ((0, hh * stride - h), (0, ww * stride - w)), mode="edge")
    blocks = p.reshape(hh, stride, ww, stride).transpose(0, 2, 1, 3).reshape(hh, ww, -1)
    first = blocks[..., 0]
    agree = (blocks == first[..., None]).all(-1)
    return np.where(agree, first, IGNORE_LABEL).astype(np.uint8)


def displacement_targets(labels: np.ndarray):
    """Offsets from each confident foreground pixel to its connected region's
    centroid, plus fg/bg masks."""
    h, w = labels.shape
    target = np.zeros((2, h, w), dtype=np.float32)
    fg = (labels != 0) & (labels != IGNORE_LABEL)
    yy, xx = np.mgrid[0:h, 0:w]
    for c in np.unique(labels[fg]):
        comp, n = ndimage.label(labels == c)
        for k in range(1, n + 1):
            m = comp == k
            target[0][m] = yy[m].mean() - yy[m]
            target[1][m] = xx[m].mean() - xx[m]
    return target, fg, labels == 0


class IrnetModel(torch.nn.Module):
    """Frozen classifier trunk plus trainable boundary/displacement heads."""

    def __init__(self, trunk, head_width=16):
        super().__init__()
        self.trunk = trunk
        for p in self.trunk.parameters():
            p.requires_grad_(False)
        self.heads = BoundaryDisplacementHeads(trunk.channels, head_width)

    @property
    def stride(self):
        return self.trunk.stride

    def train(self, mode=True):
        super().train(mode)
        self.trunk.eval()
        return self

    def forward(self, x):
        with torch.no_grad():
            feats = self.trunk(x)
        return self.heads([f.detach() for f in feats])

    @torch.no_grad()
    def affinity_field(self, image: np.ndarray) -> AffinityField:
        self.eval()
        edge, disp = self(to_tensor([image]))
        return AffinityField(edge[0].double().numpy(), disp[0].double().numpy(), self.stride)


def affinity_loss(edge: torch.Tensor, labels: torch.Tensor, radius: float):
    """Class-balanced BCE on path-product affinities; ``None`` when no pair is labelled."""
    B, h, w = edge.shape
    pm = path_matrix(h, w, radius).tocoo()
    P = torch.sparse_coo_tensor(np.vstack([pm.row, pm.col]), pm.data.astype(np.float32), pm.shape,
                                check_invariants=False)
    log_keep = torch.log((1 - edge).clamp_min(1e-6)).reshape(B, -1).T     # (N, B)
    log_aff = torch.sparse.mm(P, log_keep).T                               # (B, P)
    pairs = torch.from_numpy(grid_pairs(h, w, radius))
    lab = labels.reshape(B, -1).long()
    la, lb = lab[:, pairs[:, 0]], lab[:, pairs[:, 1]]
    known = (la != IGNORE_LABEL) & (lb != IGNORE_LABEL)
    pos = known & (la == lb)
    pos_bg, pos_fg = pos & (la == 0), pos & (la != 0)
    neg = known & (la != lb)
    terms = []
    if pos_fg.any():
        terms.append((-log_aff[pos_fg].mean(), 0.25))
    if pos_bg.any():
        terms.append((-log_aff[pos_bg].mean(), 0.25))
    if neg.any():
        aff = torch.exp(log_aff[neg])
        terms.append((-torch.log((1 - aff).clamp_min(1e-6)).mean(), 0.5))
    if not terms:
        return None
    norm = sum(wt for _, wt in terms)
    return sum(t * wt for t, wt in terms) / norm


def displacement_loss(disp: torch.Tensor, labels: np.ndarray):
    targets, fgs, bgs = zip(*(displacement_targets(l) for l in labels))
    target = torch.from_numpy(np.stack(targets))
    fg = torch.from_numpy(np.stack(fgs))
    bg = torch.from_numpy(np.stack(bgs))
    err = (disp - target).abs().sum(1)
    loss = disp.new_zeros(())
    if fg.any():
        loss = loss + err[fg].mean()
    if bg.any():
        loss = loss + err[bg].mean()
    return loss


def _rescale(image, labels, s, stride):
    h, w = labels.shape
    H = max(stride, int(round(h * s / stride)) * stride)
    W = max(stride, int(round(w * s / stride)) * stride)
    if (H, W) == (h, w):
        return image, labels
    x = F.interpolate(to_tensor([image]), size=(H, W), mode="bilinear", align_corners=False)
    ys = np.minimum((np.arange(H) + 0.5) * h / H, h - 1).astype(int)
    xs = np.minimum((np.arange(W) + 0.5) * w / W, w - 1).astype(int)
    return x[0].numpy().transpose(1, 2, 0), labels[ys][:, xs]


def irnet_batch_loss(model: IrnetModel, images, label_maps, radius):
    x = to_tensor(images)
    edge, disp = model(x)
    grid = np.stack([block_consensus(l, model.stride) for l in label_maps])
    grid = grid[:, :edge.shape[1], :edge.shape[2]]
    aff = affinity_loss(edge, torch.from_numpy(grid), radius)
    dl = displacement_loss(disp, grid)
    return aff, dl


def train_irnet(trunk, images: dict, seeds: dict, config: IrnetConfig, ids=None):
    """Train the heads on confident seed labels; the trunk stays frozen.

    ``seeds`` maps image_id to a full-resolution :class:`ProbField`.
    Returns ``(model, history)``.
    """
    ids = list(ids if ids is not None else seeds)
    missing = [i for i in ids if i not in seeds]
    if missing:
        raise ValueError(f"no seeds for {missing[:3]}")
    seed_everything(config.seed)
    model = IrnetModel(trunk, config.head_width)
    opt = torch.optim.SGD([
        {"params": model.heads.boundary_parameters(), "lr": config.lr_boundary},
        {"params": model.heads.displacement_parameters(), "lr": config.lr_displacement},
    ], momentum=config.momentum)
    label_maps = {i: confident_labels(seeds[i], config.fg_confident, config.bg_confident)
                  for i in ids}
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(len(ids))
        totals, n = np.zeros(2), 0
        for s in range(0, len(ids), config.batch_size):
            batch = [ids[k] for k in order[s:s + config.batch_size]]
            scale = float(rng.choice(config.scales)) if config.multiscale_augment else 1.0
            imgs, labs = [], []
            for i in batch:
                im, lb = augment(images[i], config.augmentation, rng, mask=label_maps[i])
                im, lb = _rescale(im, lb, scale, model.stride)
                imgs.append(im)
                labs.append(lb)
            aff, dl = irnet_batch_loss(model, imgs, labs, config.radius)
            if aff is None:
                log.warning("skipping batch without labelled pairs")
                continue
            loss = aff + dl
            opt.zero_grad()
            loss.backward()
            opt.step()
            totals += [aff.item(), dl.item()]
            n += 1
        entry = {"epoch": epoch, "affinity_loss": totals[0] / max(n, 1),
                 "displacement_loss": totals[1] / max(n, 1)}
        history.append(entry)
        log.info("irnet epoch %d aff %.4f disp %.4f", epoch, *totals / max(n, 1))
    model.eval()
    return model, history


def save_irnet(model: IrnetModel, config: IrnetConfig, path) -> None:
    torch.save({"format_version": 1, "kind": "irnet", "config": asdict(config),
                "heads": model.heads.state_dict()}, path)


def load_irnet(path, trunk) -> IrnetModel:
    ck = torch.load(path, map_location="cpu", weights_only=False)
    known = {f.name for f in fields(IrnetConfig)}
    cfg = IrnetConfig(**{k: v for k, v in ck["config"].items() if k in known})
    model = IrnetModel(trunk, cfg.head_width)
    model.heads.load_state_dict(ck["heads"])
    model.eval()
    return model
