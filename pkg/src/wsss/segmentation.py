"""Step 3: supervised segmentation on pseudo-masks, with flip/scale
test-time augmentation."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import IGNORE_LABEL, AugmentationConfig, augment
from .metrics import ConfusionMatrix, accumulate, mean_iou
from .nets import DeepLabV3Plus
from .torchutil import resize, seed_everything, to_tensor

log = logging.getLogger(__name__)

DEFAULT_TTA_SCALES = (0.5, 1.0, 2.0)


@dataclass
class SegConfig:
    encoder: str = "tiny_res"
    dilate: bool = True
    weights_path: Optional[str] = None
    optimizer: str = "sgd"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-6
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    ignore_label: int = IGNORE_LABEL
    loss: str = "softmax"          # or "sigmoid": per-class BCE on one-hot targets
    augmentation: AugmentationConfig = field(default_factory=lambda: AugmentationConfig.flip_only())
    # each batch is resized by a factor drawn from this set
    train_scales: tuple = (1.0,)
    # keep the epoch with the best validation mIoU (needs ground-truth val masks)
    select_best: bool = False

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig(**self.augmentation)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.loss not in ("softmax", "sigmoid"):
            raise ValueError(f"unknown loss {self.loss!r}")
        self.train_scales = tuple(float(v) for v in self.train_scales)
        if not self.train_scales or min(self.train_scales) <= 0:
            raise ValueError("train_scales must be non-empty and positive")


@dataclass
class SegPrediction:
    image_id: str
    probs: np.ndarray      # (C+1, H, W)
    labels: np.ndarray     # (H, W) uint8, argmax with ties to the lower class id


def build_segmenter(config: SegConfig, num_classes: int) -> DeepLabV3Plus:
    seed_everything(config.seed)
    model = DeepLabV3Plus(num_classes + 1, config.encoder, config.dilate, config.weights_path)
    model.loss = config.loss
    return model


def seg_loss(logits: torch.Tensor, target: torch.Tensor, config: SegConfig):
    """Mean per-pixel loss over non-ignored pixels (zero when there are none)."""
    valid = target != config.ignore_label
    n = int(valid.sum())
    if config.loss == "softmax":
        total = F.cross_entropy(logits, target.long(), ignore_index=config.ignore_label,
                                reduction="sum")
    else:
        t = torch.where(valid, target.long(), torch.zeros_like(target, dtype=torch.long))
        onehot = F.one_hot(t, logits.shape[1]).permute(0, 3, 1, 2).float()
        per = F.binary_cross_entropy_with_logits(logits, onehot, reduction="none").sum(1)
        total = (per * valid).sum()
    return total / max(n, 1), n


def _check_masks(manifest, masks, images, num_classes, ignore):
    for r in manifest.records:
        if r.image_id not in masks:
            raise ValueError(f"missing pseudo-mask for {r.image_id!r}")
        m = masks[r.image_id]
        if m.shape != images[r.image_id].shape[:2]:
            raise ValueError(f"mask/image size mismatch for {r.image_id!r}")
        bad = (m != ignore) & (m > num_classes)
        if bad.any():
            raise ValueError(f"mask {r.image_id!r} contains illegal class id {int(m[bad][0])}")


def train_segmentation(manifest, masks: dict, config: SegConfig, images: dict,
                       val: Optional[tuple] = None):
    """Train on ``masks`` (image_id -> uint8 label map).

    ``val`` is an optional ``(val_images, val_gt)`` pair of dicts used to log
    validation mIoU per epoch; with ``config.select_best`` the weights of the
    best epoch are kept, otherwise the final weights are returned.
    Returns ``(model, history)``.
    """
    C = manifest.num_classes
    _check_masks(manifest, masks, images, C, config.ignore_label)
    ids = manifest.ids()
    if not any((masks[i] != config.ignore_label).any() for i in ids):
        raise ValueError("no supervised pixels")
    model = build_segmenter(config, C)
    if config.optimizer == "sgd":
        opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                              weight_decay=config.weight_decay)
    elif config.optimizer == "adam":
        opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    else:
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    rng = np.random.default_rng(config.seed)
    history = []
    best, best_state = -1.0, None
    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(len(ids))
        total, steps = 0.0, 0
        for s in range(0, len(ids), config.batch_size):
            batch = [ids[k] for k in order[s:s + config.batch_size]]
            pairs = [augment(images[i], config.augmentation, rng, mask=masks[i]) for i in batch]
            x = to_tensor([p[0] for p in pairs])
            y = torch.from_numpy(np.stack([p[1] for p in pairs]).astype(np.int64))
            if len(config.train_scales) > 1:
                x, y = _rescale_batch(x, y, float(rng.choice(config.train_scales)))
            loss, n = train_step(model, opt, x, y, config)
            if n:
                total += loss
                steps += 1
        entry = {"epoch": epoch, "loss": total / max(steps, 1)}
        if val is not None:
            entry["val_miou"] = evaluate_miou(model, *val, num_classes=C)
            if config.select_best and entry["val_miou"] > best:
                best = entry["val_miou"]
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        history.append(entry)
        log.info("seg epoch %d loss %.4f %s", epoch, entry["loss"],
                 f"val_miou {entry['val_miou']:.4f}" if "val_miou" in entry else "")
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


def _rescale_batch(x: torch.Tensor, y: torch.Tensor, s: float):
    h, w = x.shape[2:]
    size = (max(8, round(h * s)), max(8, round(w * s)))
    if size == (h, w):
        return x, y
    x = resize(x, size)
    y = F.interpolate(y[:, None].double(), size=size, mode="nearest")[:, 0].long()
    return x, y


def train_step(model, opt, x, y, config: SegConfig):
    """One optimizer step; batches without supervised pixels are skipped."""
    logits = model(x)
    loss, n = seg_loss(logits, y, config)
    if n == 0:
        return 0.0, 0
    opt.zero_grad()
    loss.backward()
    opt.step()
    return loss.item(), n


@torch.no_grad()
def _probs(model, x: torch.Tensor, loss: str = "softmax") -> torch.Tensor:
    """Per-pixel class probabilities for a 1 x 3 x H x W tensor, reflection
    padded to the model stride and cropped back."""
    h, w = x.shape[2:]
    s = model.stride
    ph, pw = (-h) % s, (-w) % s
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect" if (ph < h and pw < w) else "replicate")
    logits = model(x)[:, :, :h, :w]
    if loss == "softmax":
        return torch.softmax(logits.double(), 1)
    p = torch.sigmoid(logits.double())
    return p / p.sum(1, keepdim=True)


def _prediction(image_id, probs: torch.Tensor) -> SegPrediction:
    p = probs[0].numpy().astype(np.float32)
    return SegPrediction(image_id, p, p.argmax(0).astype(np.uint8))


def predict(model, image: np.ndarray, image_id: str = "") -> SegPrediction:
    model.eval()
    return _prediction(image_id, _probs(model, to_tensor([image]), getattr(model, "loss", "softmax")))


def predict_tta(model, image: np.ndarray, scales: Sequence[float] = DEFAULT_TTA_SCALES,
                use_flip: bool = True, image_id: str = "") -> SegPrediction:
    """Average probability fields over rescaled and mirrored variants."""
    scales = list(scales)
    if not scales:
        raise ValueError("scales must be non-empty")
    model.eval()
    loss = getattr(model, "loss", "softmax")
    x = to_tensor([image])
    h, w = image.shape[:2]
    acc, k = None, 0
    for s in scales:
        xs = resize(x, (max(1, round(h * s)), max(1, round(w * s))))
        for flip in ([False, True] if use_flip else [False]):
            inp = torch.flip(xs, dims=[3]) if flip else xs
            p = _probs(model, inp, loss)
            if flip:
                p = torch.flip(p, dims=[3])
            p = resize(p, (h, w))
            acc = p if acc is None else acc + p
            k += 1
    probs = acc / k
    probs = probs / probs.sum(1, keepdim=True)
    return _prediction(image_id, probs)


def evaluate_miou(model, images: dict, gt: dict, num_classes: int, tta: bool = False) -> float:
    cm = ConfusionMatrix(num_classes + 1)
    for i in sorted(gt):
        pred = predict_tta(model, images[i]) if tta else predict(model, images[i])
        cm = accumulate(cm, pred.labels, gt[i])
    return mean_iou(cm)[0]


def save_segmenter(model, config: SegConfig, num_classes: int, path) -> None:
    torch.save({"format_version": 1, "kind": "segmentation", "config": asdict(config),
                "num_classes": num_classes, "state_dict": model.state_dict()}, path)


def load_segmenter(path):
    ck = torch.load(path, map_location="cpu", weights_only=False)
    config = SegConfig(**ck["config"])
    config.weights_path = None
    model = DeepLabV3Plus(ck["num_classes"] + 1, config.encoder, config.dilate)
    model.load_state_dict(ck["state_dict"])
    model.eval()
    model.loss = config.loss
    return model
