"""End-to-end orchestration of the three steps with resumable sub-steps,
run metadata, evaluation reports and ablation grids."""
from __future__ import annotations

import copy
import json
import logging
import shutil
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import cam as cam_mod
from . import crf as crf_mod
from . import irnet as irnet_mod
from . import segmentation as seg_mod
from .data import (DEFAULT_VAL_FRACTION, balance_downsample, exclude_class, generate_synthetic_shapes,
                   load_gt_masks, load_images, load_label_png, load_manifest, save_label_png,
                   save_manifest, split_train_val)
from .metrics import ConfusionMatrix, accumulate, read_report, segmentation_report, write_report
from .store import (Archive, ArrayRecord, RunMetadata, config_hash, read_run_metadata, tree_hash,
                    write_archive, write_run_metadata)

log = logging.getLogger(__name__)

STEPS = ("classify", "make-cams", "crf", "train-irnet", "make-pseudo", "train-seg", "infer", "eval")

PREREQUISITES = {
    "classify": (),
    "make-cams": ("classify",),
    "crf": ("make-cams",),
    "train-irnet": ("classify", "crf"),
    "make-pseudo": ("train-irnet", "crf"),
    "train-seg": ("make-pseudo",),
    "infer": ("train-seg",),
    "eval": ("crf", "make-pseudo", "infer"),
}

# config sections each step reads; a step's key covers its own and all earlier sections
STEP_SECTIONS = {
    "classify": ("seed", "data", "classifier", "person"),
    "make-cams": ("cam",),
    "crf": ("crf",),
    "train-irnet": ("irnet",),
    "make-pseudo": ("pseudo",),
    "train-seg": ("segmentation",),
    "infer": ("infer",),
    "eval": ("eval",),
}

# short names used by ablation grids
FLAG_ALIASES = {
    "irnet_threshold": "pseudo.threshold",
    "tta": "infer.tta",
    "person_cam": "person.enabled",
    "encoder": "segmentation.encoder",
}


class ConfigError(ValueError):
    exit_code = 2


class MissingPrerequisite(RuntimeError):
    exit_code = 3


# ---------------------------------------------------------------------------
# configuration

@dataclass
class SyntheticConfig:
    n_images: int = 250
    n_classes: int = 4
    image_size: int = 64
    min_shapes: int = 1
    max_shapes: int = 3


@dataclass
class DataConfig:
    manifest: Optional[str] = None
    synthetic: Optional[SyntheticConfig] = None
    person_class: Optional[int] = None
    balance_cap: Optional[int] = None
    val_fraction: float = DEFAULT_VAL_FRACTION


@dataclass
class CamConfig:
    scales: tuple = cam_mod.DEFAULT_CAM_SCALES
    flip: bool = True
    threshold: float = 0.5
    bg_power: float = 1.0


@dataclass
class PersonConfig:
    enabled: bool = False
    epochs: Optional[int] = None     # defaults to the classifier's


@dataclass
class IrnetStepConfig(irnet_mod.IrnetConfig):
    confidence_threshold: float = 0.8


@dataclass
class PseudoConfig:
    threshold: float = 0.3
    beta: float = 8.0
    t_iters: int = 256
    walk_method: str = "iterate"
    second_crf: bool = False
    displacement_seeds: bool = False
    displacement_percentile: float = 90.0
    ignore_band: float = 0.0


@dataclass
class InferConfig:
    tta: bool = True
    scales: tuple = seg_mod.DEFAULT_TTA_SCALES
    flip: bool = True
    save_probs: bool = False


@dataclass
class EvalConfig:
    include_background: bool = True
    figures: bool = True
    n_examples: int = 5


@dataclass
class PipelineConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    classifier: cam_mod.ClassifierConfig = field(default_factory=cam_mod.ClassifierConfig)
    cam: CamConfig = field(default_factory=CamConfig)
    person: PersonConfig = field(default_factory=PersonConfig)
    crf: crf_mod.CrfParams = field(default_factory=crf_mod.CrfParams)
    irnet: IrnetStepConfig = field(default_factory=IrnetStepConfig)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    segmentation: seg_mod.SegConfig = field(default_factory=seg_mod.SegConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    base_dir: Optional[str] = None   # directory relative paths resolve against

    def to_dict(self) -> dict:
        d = _plain(asdict(self))
        d.pop("base_dir")
        return d

    def path(self, p) -> Path:
        p = Path(p)
        if p.is_absolute() or self.base_dir is None:
            return p
        return Path(self.base_dir) / p

    @property
    def out_dir(self) -> Path:
        return self.path(self.out)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, where):
    if data is None:
        return None
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        sub_cls = _nested_type(cls, name, current)
        if sub_cls is not None and isinstance(value, dict):
            value = _build(sub_cls, value, f"{where}.{name}")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def _nested_type(cls, name, current):
    if is_dataclass(current):
        return type(current)
    nested = {(DataConfig, "synthetic"): SyntheticConfig}
    return nested.get((cls, name))


def config_from_dict(d: dict, base_dir=None) -> PipelineConfig:
    cfg = _build(PipelineConfig, d or {}, "config")
    cfg.base_dir = str(base_dir) if base_dir is not None else None
    validate_config(cfg)
    return cfg


def load_config(path, overrides: Optional[dict] = None) -> PipelineConfig:
    path = Path(path)
    try:
        d = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if overrides:
        d = apply_overrides(d, overrides)
    return config_from_dict(d, base_dir=path.parent)


def apply_overrides(d: dict, overrides: dict) -> dict:
    d = copy.deepcopy(d)
    for key, value in overrides.items():
        key = FLAG_ALIASES.get(key, key)
        parts = key.split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"invalid override key {key!r}")
        node[parts[-1]] = value
    return d


def validate_config(cfg: PipelineConfig) -> None:
    if cfg.data.manifest is None and cfg.data.synthetic is None:
        raise ConfigError("data: set either 'manifest' or 'synthetic'")
    s = cfg.data.synthetic
    if s is not None:
        if not 1 <= s.n_classes <= 8 or s.image_size < 32:
            raise ConfigError("data.synthetic: n_classes must be in 1..8 and image_size >= 32")
        if not 1 <= s.min_shapes <= s.max_shapes <= s.n_classes:
            raise ConfigError("data.synthetic: need 1 <= min_shapes <= max_shapes <= n_classes")
    if cfg.data.manifest is not None and not cfg.path(cfg.data.manifest).exists():
        raise ConfigError(f"data.manifest {cfg.data.manifest} does not exist")
    if not 0 < cfg.pseudo.threshold < 1:
        raise ConfigError("pseudo.threshold must be in (0, 1)")
    if not 0 < cfg.data.val_fraction < 1:
        raise ConfigError("data.val_fraction must be in (0, 1)")
    if cfg.person.enabled and cfg.data.person_class is None:
        raise ConfigError("person.enabled requires data.person_class")
    if cfg.pseudo.walk_method not in ("iterate", "square"):
        raise ConfigError("pseudo.walk_method must be 'iterate' or 'square'")


def step_key(cfg: PipelineConfig, step: str) -> str:
    d = cfg.to_dict()
    sections = {}
    for s in STEPS[:STEPS.index(step) + 1]:
        for name in STEP_SECTIONS[s]:
            sections[name] = d[name]
    return config_hash(sections)


# ---------------------------------------------------------------------------

class Run:
    """Paths, cached inputs and metadata bookkeeping for one output directory."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = cfg.out_dir
        self._images = {}

    def p(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def meta_path(self, step):
        return self.p("meta", f"{step}.json")

    def done(self, step) -> bool:
        return self.meta_path(step).exists()

    def require(self, step):
        for pre in PREREQUISITES[step]:
            if not self.done(pre):
                raise MissingPrerequisite(
                    f"step '{step}' needs the outputs of '{pre}'; run `wsss {pre}` first")

    def manifest(self, split):
        return load_manifest(self.p("data", f"{split}.tsv"))

    def images(self, split):
        if split not in self._images:
            self._images[split] = load_images(self.manifest(split), self.cfg.classifier.input_size)
        return self._images[split]

    def finish(self, step, outputs):
        ins = {}
        for pre in PREREQUISITES[step]:
            ins[pre] = read_run_metadata(self.meta_path(pre)).outputs
        if step == "classify":
            ins["raw"] = dict(self._raw_inputs)
        outs = {}
        for rel in outputs:
            outs[str(rel)] = tree_hash(self.p(rel))
        meta = RunMetadata(step=step, config_hash=step_key(self.cfg, step), seed=self.cfg.seed,
                           inputs=ins, outputs=outs)
        self.p("meta").mkdir(parents=True, exist_ok=True)
        write_run_metadata(meta, self.meta_path(step))
        return meta


def _mask_dir(run, step, split):
    d = run.p("masks", step, split)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _read_masks(run, step, split, ids):
    d = run.p("masks", step, split)
    return {i: load_label_png(d / f"{i}.png") for i in ids}


def _person_model(run):
    path = run.p("models", "person.pt")
    return cam_mod.load_checkpoint(path) if path.exists() else None


# ---------------------------------------------------------------------------
# steps

def step_classify(run: Run):
    cfg = run.cfg
    run.p("data").mkdir(parents=True, exist_ok=True)
    run.p("models").mkdir(parents=True, exist_ok=True)
    if cfg.data.manifest is not None:
        full = load_manifest(cfg.path(cfg.data.manifest))
    else:
        s = cfg.data.synthetic
        full = generate_synthetic_shapes(s.n_images, s.n_classes, s.image_size, cfg.seed,
                                         run.p("dataset"), s.min_shapes, s.max_shapes)
    run._raw_inputs = {"manifest": tree_hash(full.root / "manifest.tsv")
                       if cfg.data.manifest is None else tree_hash(cfg.path(cfg.data.manifest)),
                       "images": tree_hash(full.root / "images") if (full.root / "images").is_dir()
                       else ""}
    m = full
    if cfg.data.balance_cap:
        m = balance_downsample(m, cfg.data.balance_cap, cfg.seed)
    train_full, val = split_train_val(m, cfg.data.val_fraction, cfg.seed)
    train = train_full
    if cfg.data.person_class is not None:
        train = exclude_class(train_full, cfg.data.person_class)
    # relative image paths must keep pointing at the dataset
    for mf in (train, val, train_full):
        mf.records = [_absolute(r, full) for r in mf.records]
    save_manifest(train, run.p("data", "train.tsv"))
    save_manifest(val, run.p("data", "val.tsv"))
    save_manifest(train_full, run.p("data", "train_full.tsv"))
    images = load_images(train, cfg.classifier.input_size)
    images.update(load_images(val, cfg.classifier.input_size))
    ccfg = copy.deepcopy(cfg.classifier)
    ccfg.seed = cfg.seed
    model, hist = cam_mod.train_classifier(train, val, ccfg, run.p("models", "classifier.pt"),
                                           images=images)
    outputs = ["data/train.tsv", "data/val.tsv", "data/train_full.tsv", "models/classifier.pt"]
    histories = {"classifier": hist}
    if cfg.person.enabled:
        pcfg = copy.deepcopy(ccfg)
        if cfg.person.epochs is not None:
            pcfg.epochs = cfg.person.epochs
        _, phist = cam_mod.train_person_classifier(train_full, cfg.data.person_class, pcfg,
                                                   run.p("models", "person.pt"), images=images)
        outputs.append("models/person.pt")
        histories["person"] = phist
    f1 = cam_mod.evaluate_f1(model, val, ccfg.f1_threshold, images, ccfg.f1_average)
    run.p("reports").mkdir(parents=True, exist_ok=True)
    rep = {"f1": f1["f1"]}
    for c, v in enumerate(f1["per_class"], start=1):
        rep[f"f1.{val.class_names[c - 1]}"] = float(v)
    write_report(rep, run.p("reports", "classifier_f1.txt"))
    (run.p("reports", "history_classify.json")).write_text(json.dumps(histories, indent=1))
    outputs.append("reports/classifier_f1.txt")
    return run.finish("classify", outputs)


def _absolute(record, manifest):
    return replace(record, image_uri=str(manifest.resolve(record.image_uri).resolve()),
                   mask_uri=(str(manifest.resolve(record.mask_uri).resolve())
                             if record.mask_uri else None))


def step_make_cams(run: Run):
    cfg = run.cfg
    run.require("make-cams")
    model = cam_mod.load_checkpoint(run.p("models", "classifier.pt"))
    person = _person_model(run) if cfg.person.enabled else None
    run.p("cams").mkdir(parents=True, exist_ok=True)
    for split in ("train", "val"):
        man = run.manifest(split)
        imgs = run.images(split)
        recs = []
        for r in man.records:
            # training images use their labels; validation relies on predictions
            ids = sorted(r.labels) if split == "train" else None
            st = cam_mod.extract_cam(model, imgs[r.image_id], cfg.cam.scales, cfg.cam.flip,
                                     class_ids=ids, threshold=cfg.cam.threshold,
                                     image_id=r.image_id)
            if person is not None:
                pm = cam_mod.person_cam(person, imgs[r.image_id], cfg.cam.scales, cfg.cam.flip,
                                        cfg.cam.threshold)
                if pm is not None:
                    st = cam_mod.merge_person_cam(st, pm, cfg.data.person_class)
            recs.append(ArrayRecord(r.image_id, st.class_ids, st.maps))
        write_archive(recs, run.p("cams", f"{split}.wssa"))
    return run.finish("make-cams", ["cams/train.wssa", "cams/val.wssa"])


def _stack(rec: ArrayRecord, scales) -> cam_mod.CamStack:
    return cam_mod.CamStack(rec.image_id, rec.class_ids, rec.array, tuple(scales))


def step_crf(run: Run):
    cfg = run.cfg
    run.require("crf")
    run.p("fields").mkdir(parents=True, exist_ok=True)
    outputs = []
    for split in ("train", "val"):
        imgs = run.images(split)
        recs = []
        mdir = _mask_dir(run, "step1", split)
        for rec in Archive(run.p("cams", f"{split}.wssa")):
            fld = crf_mod.add_background(_stack(rec, cfg.cam.scales), cfg.cam.bg_power)
            fld = crf_mod.dense_crf(imgs[rec.image_id], fld, cfg.crf)
            recs.append(ArrayRecord(rec.image_id, fld.class_ids, fld.probs))
            save_label_png(argmax_labels(fld), mdir / f"{rec.image_id}.png")
        write_archive(recs, run.p("fields", f"{split}.wssa"))
        outputs += [f"fields/{split}.wssa", f"masks/step1/{split}"]
    return run.finish("crf", outputs)


def argmax_labels(fld: crf_mod.ProbField) -> np.ndarray:
    """Class id of the most probable channel; ties go to the lower class id."""
    ids = np.asarray(fld.class_ids)
    order = np.argsort(ids, kind="stable")
    return ids[order][np.asarray(fld.probs)[order].argmax(0)].astype(np.uint8)


def _field(rec: ArrayRecord) -> crf_mod.ProbField:
    return crf_mod.ProbField(rec.image_id, rec.class_ids, rec.array)


def step_train_irnet(run: Run):
    cfg = run.cfg
    run.require("train-irnet")
    classifier = cam_mod.load_checkpoint(run.p("models", "classifier.pt"))
    train = run.manifest("train")
    imgs = run.images("train")
    confident = cam_mod.filter_confident(classifier, train, cfg.irnet.confidence_threshold, imgs)
    save_manifest(confident, run.p("data", "irnet_train.tsv"))
    if not confident.records:
        raise RuntimeError("no training image passes the confidence filter")
    seeds = {rec.image_id: _field(rec) for rec in Archive(run.p("fields", "train.wssa"))
             if rec.image_id in set(confident.ids())}
    icfg = copy.deepcopy(cfg.irnet)
    icfg.seed = cfg.seed
    model, hist = irnet_mod.train_irnet(classifier.trunk, imgs, seeds, icfg, ids=confident.ids())
    irnet_mod.save_irnet(model, icfg, run.p("models", "irnet.pt"))
    run.p("reports").mkdir(parents=True, exist_ok=True)
    run.p("reports", "history_irnet.json").write_text(json.dumps(hist, indent=1))
    return run.finish("train-irnet", ["data/irnet_train.tsv", "models/irnet.pt"])


def refine_field(model, image, fld: crf_mod.ProbField, cfg: PipelineConfig) -> crf_mod.ProbField:
    """Walk the CRF field over the learned affinities and return it at full resolution."""
    aff = model.affinity_field(image)
    small = irnet_mod.downsample_field(fld, aff.stride)
    small = crf_mod.ProbField(fld.image_id, small.class_ids,
                              small.probs[:, :aff.boundary.shape[0], :aff.boundary.shape[1]])
    small = irnet_mod.refine_with_displacement(small, aff, cfg.pseudo.displacement_seeds,
                                               cfg.pseudo.displacement_percentile)
    T = irnet_mod.build_transition(aff.boundary, cfg.pseudo.beta, cfg.irnet.radius)
    walked = irnet_mod.random_walk_propagate(small, T, cfg.pseudo.t_iters, cfg.pseudo.walk_method)
    full = irnet_mod.upsample_field(walked, fld.probs.shape[1:])
    if cfg.pseudo.second_crf:
        full = crf_mod.dense_crf(image, full, cfg.crf)
    return full


def step_make_pseudo(run: Run):
    cfg = run.cfg
    run.require("make-pseudo")
    classifier = cam_mod.load_checkpoint(run.p("models", "classifier.pt"))
    model = irnet_mod.load_irnet(run.p("models", "irnet.pt"), classifier.trunk)
    outputs = []
    for split in ("train", "val"):
        imgs = run.images(split)
        mdir = _mask_dir(run, "step2", split)
        for rec in Archive(run.p("fields", f"{split}.wssa")):
            full = refine_field(model, imgs[rec.image_id], _field(rec), cfg)
            pm = irnet_mod.emit_pseudo_mask(full, cfg.pseudo.threshold,
                                            ignore_band=cfg.pseudo.ignore_band)
            save_label_png(pm.labels, mdir / f"{rec.image_id}.png")
        outputs.append(f"masks/step2/{split}")
    return run.finish("make-pseudo", outputs)


def step_train_seg(run: Run):
    cfg = run.cfg
    run.require("train-seg")
    train = run.manifest("train")
    val = run.manifest("val")
    masks = _read_masks(run, "step2", "train", train.ids())
    scfg = copy.deepcopy(cfg.segmentation)
    scfg.seed = cfg.seed
    val_pair = None
    if all(r.mask_uri for r in val.records) and val.records:
        val_pair = (run.images("val"), load_gt_masks(val))
    model, hist = seg_mod.train_segmentation(train, masks, scfg, run.images("train"), val_pair)
    seg_mod.save_segmenter(model, scfg, train.num_classes, run.p("models", "segmentation.pt"))
    run.p("reports").mkdir(parents=True, exist_ok=True)
    run.p("reports", "history_segmentation.json").write_text(json.dumps(hist, indent=1))
    return run.finish("train-seg", ["models/segmentation.pt"])


def step_infer(run: Run):
    cfg = run.cfg
    run.require("infer")
    model = seg_mod.load_segmenter(run.p("models", "segmentation.pt"))
    val = run.manifest("val")
    imgs = run.images("val")
    mdir = _mask_dir(run, "step3", "val")
    recs = []
    for r in val.records:
        if cfg.infer.tta:
            pred = seg_mod.predict_tta(model, imgs[r.image_id], cfg.infer.scales, cfg.infer.flip,
                                       r.image_id)
        else:
            pred = seg_mod.predict(model, imgs[r.image_id], r.image_id)
        save_label_png(pred.labels, mdir / f"{r.image_id}.png")
        if cfg.infer.save_probs:
            recs.append(ArrayRecord(r.image_id, list(range(pred.probs.shape[0])), pred.probs))
    outputs = ["masks/step3/val"]
    if cfg.infer.save_probs:
        run.p("probs").mkdir(parents=True, exist_ok=True)
        write_archive(recs, run.p("probs", "step3_val.wssa"))
        outputs.append("probs/step3_val.wssa")
    return run.finish("infer", outputs)


STEP_ROWS = (("Step 1. Classification + CRF", "step1"),
             ("Step 2. IRNet", "step2"),
             ("Step 3. Segmentation" , "step3"))


def step_eval(run: Run):
    cfg = run.cfg
    run.require("eval")
    val = run.manifest("val")
    gt = load_gt_masks(val)
    names = ["background"] + list(val.class_names)
    run.p("reports", "figures").mkdir(parents=True, exist_ok=True)
    rows = []
    preds = {}
    for title, step in STEP_ROWS:
        masks = _read_masks(run, step, "val", val.ids())
        preds[step] = masks
        cm = ConfusionMatrix(len(names))
        for i in val.ids():
            cm = accumulate(cm, masks[i], gt[i])
        rep = segmentation_report(cm, names, cfg.eval.include_background)
        write_report(rep, run.p("reports", f"eval_{step}.txt"))
        if step == "step3" and cfg.infer.tta:
            title += " + TTA"
        rows.append((title, rep))
    lines = ["step\tmean_iou\tmean_accuracy\tpixel_accuracy"]
    for title, rep in rows:
        lines.append(f"{title}\t{rep['mean_iou']:.4f}\t{rep['mean_accuracy']:.4f}\t"
                     f"{rep['pixel_accuracy']:.4f}")
    run.p("reports", "steps.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    outputs = ["reports/steps.tsv"] + [f"reports/eval_{s}.txt" for _, s in STEP_ROWS]
    if cfg.eval.figures:
        from . import plotting
        plotting.bar_chart([f"Step {k + 1}" for k in range(len(rows))],
                           [rep["mean_iou"] for _, rep in rows],
                           run.p("reports", "figures", "steps_miou.png"),
                           title="Validation mIoU per step")
        imgs = run.images("val")
        examples = [[imgs[i], preds["step1"][i], preds["step2"][i], preds["step3"][i], gt[i]]
                    for i in val.ids()[:cfg.eval.n_examples]]
        plotting.step_panel(examples, run.p("reports", "figures", "examples.png"))
        hist = {}
        for name in ("classify", "irnet", "segmentation"):
            hp = run.p("reports", f"history_{name}.json")
            if hp.exists():
                h = json.loads(hp.read_text())
                hist.update(h if name == "classify" else {name: h})
        if hist:
            plotting.training_curves(hist, run.p("reports", "figures", "training.png"))
    return run.finish("eval", outputs)


STEP_FUNCS = {
    "classify": step_classify,
    "make-cams": step_make_cams,
    "crf": step_crf,
    "train-irnet": step_train_irnet,
    "make-pseudo": step_make_pseudo,
    "train-seg": step_train_seg,
    "infer": step_infer,
    "eval": step_eval,
}


def run_step(step: str, cfg: PipelineConfig) -> RunMetadata:
    if step not in STEP_FUNCS:
        raise ConfigError(f"unknown step {step!r}")
    run = Run(cfg)
    run.out.mkdir(parents=True, exist_ok=True)
    log.info("running step %s -> %s", step, run.out)
    return STEP_FUNCS[step](run)


def run_all(cfg: PipelineConfig, steps=STEPS, reuse_from=()) -> dict:
    """Run ``steps`` in order. Directories in ``reuse_from`` are searched for a
    completed step with the same step key; its outputs are copied instead of
    recomputed."""
    metas = {}
    for step in steps:
        key = step_key(cfg, step)
        src = _find_reusable(step, key, reuse_from)
        if src is not None:
            metas[step] = _copy_step(src, cfg.out_dir, step)
            log.info("reused %s from %s", step, src)
        else:
            metas[step] = run_step(step, cfg)
    return metas


def _find_reusable(step, key, dirs):
    for d in dirs:
        mp = Path(d) / "meta" / f"{step}.json"
        if mp.exists() and read_run_metadata(mp).config_hash == key:
            return Path(d)
    return None


def _copy_step(src: Path, dst: Path, step: str):
    meta = read_run_metadata(src / "meta" / f"{step}.json")
    for rel in meta.outputs:
        s, d = src / rel, dst / rel
        d.parent.mkdir(parents=True, exist_ok=True)
        if s.is_dir():
            shutil.copytree(s, d, dirs_exist_ok=True)
        else:
            shutil.copy2(s, d)
    if step == "classify":
        # manifests point at absolute dataset paths, so the dataset itself is shared
        for extra in ("reports/history_classify.json",):
            if (src / extra).exists():
                shutil.copy2(src / extra, dst / extra)
    for extra in {"train-irnet": ("reports/history_irnet.json",),
                  "train-seg": ("reports/history_segmentation.json",)}.get(step, ()):
        if (src / extra).exists():
            (dst / extra).parent.mkdir(parents=True, exist_ok=True)
            shutil.copy2(src / extra, dst / extra)
    (dst / "meta").mkdir(parents=True, exist_ok=True)
    shutil.copy2(src / "meta" / f"{step}.json", dst / "meta" / f"{step}.json")
    return meta


# ---------------------------------------------------------------------------
# ablations

GRID_COLUMNS = (("Encoder", "segmentation.encoder"), ("IRNet thr.", "pseudo.threshold"),
                ("TTA", "infer.tta"), ("Person", "person.enabled"))


def _get(cfg_dict, dotted):
    node = cfg_dict
    for p in dotted.split("."):
        node = node[p]
    return node


def run_ablation_grid(cfg_dict: dict, grid: list, out_dir, base_dir=None,
                      steps=STEPS) -> list:
    """Run one pipeline per override dict; returns rows in grid order.

    Rows share work: a step whose configuration matches an earlier row's is
    copied from that row's directory.
    """
    if not grid:
        raise ConfigError("ablation grid is empty")
    out_dir = Path(out_dir)
    rows, done = [], []
    for k, overrides in enumerate(grid):
        overrides = dict(overrides or {})
        d = apply_overrides(cfg_dict, overrides)
        d["out"] = str((out_dir / f"row{k:02d}").resolve())
        cfg = config_from_dict(d, base_dir)
        run_all(cfg, steps, reuse_from=done)
        done.append(cfg.out_dir)
        plain = cfg.to_dict()
        row = {name: _get(plain, key) for name, key in GRID_COLUMNS}
        rep = (cfg.out_dir / "reports" / "eval_step3.txt")
        r = read_report(rep)
        row.update({"mean IoU": r["mean_iou"], "mean accuracy": r["mean_accuracy"],
                    "pixel accuracy": r["pixel_accuracy"], "overrides": overrides})
        rows.append(row)
    write_grid_table(rows, out_dir / "ablation.tsv")
    try:
        from . import plotting
        plotting.bar_chart([f"row {k}" for k in range(len(rows))], [r["mean IoU"] for r in rows],
                           out_dir / "ablation_miou.png", title="Ablation grid")
    except Exception as e:  # figures are best-effort
        log.warning("could not render ablation figure: %s", e)
    return rows


def write_grid_table(rows, path):
    cols = [c for c, _ in GRID_COLUMNS] + ["mean IoU", "mean accuracy", "pixel accuracy"]
    lines = ["\t".join(cols)]
    for r in rows:
        vals = []
        for c in cols:
            v = r[c]
            if isinstance(v, bool):
                v = "Yes" if v else "No"
            elif isinstance(v, float):
                v = f"{v:.4f}"
            vals.append(str(v))
        lines.append("\t".join(vals))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_grid(path) -> list:
    d = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    grid = d.get("grid") if isinstance(d, dict) else d
    if not isinstance(grid, list):
        raise ConfigError(f"{path}: expected a list of override mappings under 'grid'")
    return [g or {} for g in grid]
