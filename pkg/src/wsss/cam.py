"""Step 1: multi-label classifier training, image-level F1, and class
activation map extraction."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import AugmentationConfig, DatasetManifest, augment, load_images
from .metrics import f1_scores
from .nets import CamClassifier
from .torchutil import resize, seed_everything, to_tensor

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DEFAULT_CAM_SCALES = (0.5, 1.0, 1.5, 2.0)


@dataclass
class ClassifierConfig:
    backbone: str = "tiny"
    extra_convs: int = 4
    head_kernel: int = 3
    width: int = 16
    weights_path: Optional[str] = None
    lr_pretrained: float = 1e-4
    lr_appended: float = 1e-3
    optimizer: str = "adam"
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    input_size: Optional[int] = None
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    f1_threshold: float = 0.5
    f1_average: str = "macro"

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig(**self.augmentation)
        if self.lr_pretrained <= 0 or self.lr_appended <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class CamStack:
    image_id: str
    class_ids: list
    maps: np.ndarray          # (K, H, W), each map in [0, 1]
    scales: tuple = (1.0,)

    @property
    def size(self):
        return tuple(self.maps.shape[1:])

    def __len__(self):
        return len(self.class_ids)


def build_classifier(config: ClassifierConfig, num_outputs: int) -> CamClassifier:
    seed_everything(config.seed)
    return CamClassifier(num_outputs, config.backbone, config.extra_convs, config.width,
                         config.weights_path, config.head_kernel)


def save_checkpoint(model, config: ClassifierConfig, class_names, path, kind="classifier",
                    extra=None) -> None:
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": asdict(config),
        "class_names": list(class_names),
        "num_outputs": model.num_outputs,
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }, path)


def load_checkpoint(path):
    ck = torch.load(path, map_location="cpu", weights_only=False)
    if ck.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {ck.get('format_version')}")
    config = ClassifierConfig(**ck["config"])
    model = CamClassifier(ck["num_outputs"], config.backbone, config.extra_convs, config.width,
                          head_kernel=config.head_kernel)
    model.load_state_dict(ck["state_dict"])
    model.eval()
    model.class_names = ck["class_names"]
    model.config = config
    model.extra = ck.get("extra", {})
    return model


def _targets(manifest: DatasetManifest, channel_classes: Sequence[int]) -> np.ndarray:
    y = np.zeros((len(manifest.records), len(channel_classes)), dtype=np.float32)
    col = {c: i for i, c in enumerate(channel_classes)}
    for n, r in enumerate(manifest.records):
        for c in r.labels:
            if c in col:
                y[n, col[c]] = 1.0
    return y


def bce_loss(model, x, y) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(model(x), y)


def _fit(model, images, targets, config: ClassifierConfig, val_fn=None):
    """Shared multi-label training loop; returns per-epoch history and keeps
    the weights of the best validation epoch when ``val_fn`` is given."""
    head_params = list(model.head.parameters())
    groups = [{"params": list(model.trunk.parameters()), "lr": config.lr_pretrained},
              {"params": head_params, "lr": config.lr_appended}]
    if config.optimizer == "adam":
        opt = torch.optim.Adam(groups)
    elif config.optimizer == "sgd":
        opt = torch.optim.SGD(groups, momentum=0.9)
    else:
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    rng = np.random.default_rng(config.seed)
    n = len(images)
    history = []
    best, best_state = -1.0, None
    y_all = torch.from_numpy(targets)
    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = [augment(images[i], config.augmentation, rng) for i in idx]
            x = to_tensor(batch)
            loss = bce_loss(model, x, y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        entry = {"epoch": epoch, "loss": total / n}
        if val_fn is not None:
            score = val_fn(model)
            entry["val_f1"] = score
            if score > best:
                best = score
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        history.append(entry)
        log.info("epoch %d loss %.4f %s", epoch, entry["loss"],
                 f"val_f1 {entry['val_f1']:.4f}" if "val_f1" in entry else "")
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return history


def train_classifier(train: DatasetManifest, val: Optional[DatasetManifest],
                     config: ClassifierConfig, out_path=None, images=None):
    """Train the multi-label CAM classifier with per-class sigmoid BCE.

    Output channel ``c - 1`` scores class ``c``. Returns ``(model, history)``;
    the checkpoint is written to ``out_path`` when given.
    """
    if not train.records:
        raise ValueError("empty training manifest")
    if images is None:
        images = load_images(train, config.input_size)
    C = train.num_classes
    model = build_classifier(config, C)
    imgs = [images[r.image_id] for r in train.records]
    y = _targets(train, range(1, C + 1))
    val_fn = None
    if val is not None and val.records:
        val_images = load_images(val, config.input_size) if any(
            r.image_id not in images for r in val.records) else images

        def val_fn(m):
            m.eval()
            return evaluate_f1(m, val, config.f1_threshold, val_images, config.f1_average)["f1"]

    history = _fit(model, imgs, y, config, val_fn)
    model.class_names = list(train.class_names)
    model.config = config
    model.extra = {}
    if out_path is not None:
        save_checkpoint(model, config, train.class_names, out_path)
    return model, history


@torch.no_grad()
def predict_scores(model, images: Sequence[np.ndarray], batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    for s in range(0, len(images), batch_size):
        out.append(torch.sigmoid(model(to_tensor(images[s:s + batch_size]))).numpy())
    if not out:
        return np.zeros((0, model.num_outputs), dtype=np.float32)
    return np.concatenate(out).astype(np.float64)


def predict_labels(model, image: np.ndarray) -> np.ndarray:
    """Per-class sigmoid confidences (index ``c - 1`` for class ``c``)."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got shape {image.shape}")
    return predict_scores(model, [image])[0]


def evaluate_f1(model, manifest: DatasetManifest, threshold: float = 0.5, images=None,
                average: str = "macro") -> dict:
    if not manifest.records:
        raise ValueError("empty manifest")
    if images is None:
        images = load_images(manifest, getattr(model, "config", ClassifierConfig()).input_size)
    scores = predict_scores(model, [images[r.image_id] for r in manifest.records])
    y_true = _targets(manifest, range(1, manifest.num_classes + 1)) > 0
    per_class, agg = f1_scores(y_true, scores > threshold, average)
    return {"per_class": per_class, "f1": agg}


@torch.no_grad()
def extract_cam(model, image: np.ndarray, scales=DEFAULT_CAM_SCALES, use_flip: bool = True,
                class_ids: Optional[Sequence[int]] = None, threshold: float = 0.5,
                image_id: str = "", channel: Optional[Sequence[int]] = None) -> CamStack:
    """Multi-scale (and optionally flip-averaged) CAMs at input resolution.

    ``class_ids`` selects the classes to report; when omitted, classes whose
    predicted score exceeds ``threshold`` are used. ``channel`` maps class ids
    to output channels (default ``c - 1``).
    """
    scales = list(scales)
    if not scales:
        raise ValueError("scales must be non-empty")
    model.eval()
    h, w = image.shape[:2]
    x = to_tensor([image])
    if class_ids is None:
        probs = torch.sigmoid(model(x))[0].numpy()
        class_ids = [c + 1 for c in range(len(probs)) if probs[c] > threshold]
    class_ids = sorted(int(c) for c in class_ids)
    if channel is None:
        channel = {c: c - 1 for c in class_ids}
    if not class_ids:
        return CamStack(image_id, [], np.zeros((0, h, w), dtype=np.float32), tuple(scales))
    acc = torch.zeros(model.num_outputs, h, w, dtype=torch.float64)
    count = 0
    for s in scales:
        xs = resize(x, (max(1, round(h * s)), max(1, round(w * s))))
        variants = [(xs, False)] + ([(torch.flip(xs, dims=[3]), True)] if use_flip else [])
        for inp, flipped in variants:
            cam = F.relu(model.score_maps(inp))
            if flipped:
                cam = torch.flip(cam, dims=[3])
            acc += resize(cam, (h, w))[0].double()
            count += 1
    acc /= count
    maps = acc[[channel[c] for c in class_ids]].clamp_min(0).numpy()
    peak = maps.reshape(len(class_ids), -1).max(1)
    nz = peak > 0
    maps[nz] /= peak[nz][:, None, None]
    return CamStack(image_id, class_ids, maps.astype(np.float32), tuple(scales))


def filter_confident(model, manifest: DatasetManifest, threshold: float = 0.8,
                     images=None) -> DatasetManifest:
    """Keep records whose every ground-truth label scores strictly above ``threshold``."""
    if not manifest.records:
        return manifest.with_records([])
    if images is None:
        images = load_images(manifest, getattr(model, "config", ClassifierConfig()).input_size)
    scores = predict_scores(model, [images[r.image_id] for r in manifest.records])
    keep = [r for r, s in zip(manifest.records, scores)
            if all(s[c - 1] > threshold for c in r.labels)]
    return manifest.with_records(keep)


# ---------------------------------------------------------------------------
# binary 'person' classifier

def train_person_classifier(manifest: DatasetManifest, person_class: int,
                            config: ClassifierConfig, out_path=None, images=None):
    """Single-output sigmoid classifier for presence of ``person_class``.

    ``manifest`` must still carry the person labels (i.e. be taken before
    :func:`wsss.data.exclude_class`).
    """
    if not any(person_class in r.labels for r in manifest.records):
        raise ValueError(f"no images labelled with class {person_class}")
    if images is None:
        images = load_images(manifest, config.input_size)
    model = build_classifier(config, 1)
    imgs = [images[r.image_id] for r in manifest.records]
    y = _targets(manifest, [person_class])
    history = _fit(model, imgs, y, config)
    model.class_names = list(manifest.class_names)
    model.config = config
    model.extra = {"person_class": person_class}
    if out_path is not None:
        save_checkpoint(model, config, manifest.class_names, out_path, kind="person",
                        extra=model.extra)
    return model, history


def person_cam(model, image, scales=DEFAULT_CAM_SCALES, use_flip=True, threshold=0.5):
    """Normalized person map, or ``None`` when the binary classifier says absent."""
    person = model.extra["person_class"]
    if predict_labels(model, image)[0] <= threshold:
        return None
    stack = extract_cam(model, image, scales, use_flip, class_ids=[person],
                        channel={person: 0})
    return stack.maps[0]


def merge_person_cam(stack: CamStack, person_map: np.ndarray, person_class: int) -> CamStack:
    pm = np.clip(np.asarray(person_map, dtype=np.float64), 0, None)
    if pm.shape != stack.size:
        raise ValueError("person map not aligned with the CAM stack")
    if pm.max() > 0:
        pm = pm / pm.max()
    ids = [c for c in stack.class_ids if c != person_class]
    maps = {c: m for c, m in zip(stack.class_ids, stack.maps) if c != person_class}
    maps[person_class] = pm.astype(np.float32)
    ids = sorted(ids + [person_class])
    return CamStack(stack.image_id, ids, np.stack([maps[c] for c in ids]).astype(np.float32),
                    stack.scales)
