"""Two-stage region-guided classifier with a masked five-head objective.

Stage one proposes anatomical region boxes (a pluggable seam: ground-truth
boxes, an external-detector JSON adapter, or a whole-image fallback). Stage
two crops each region (optionally with intersection-over-region-constrained
augmentation), runs the shared-output five-head classifier, and aggregates
region predictions to an image-level call: any tumor-positive region makes
the image tumor-positive, and among positives the image is malignant when
the maximum malignant-class probability exceeds the threshold.

Losses and metrics only ever touch labels whose availability flag is 0; a
head that is fully masked in a batch contributes exactly zero loss and zero
gradient to its slice of the shared output layer.
"""

from __future__ import annotations

import copy
import json
import math
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

from . import evalstat
from .datamodel import DatasetManifest, ImageSample, LabeledTarget, SplitPlan, load_sample
from .heads import (
    DEFAULT_HEAD_LAYOUT,
    FRACTURE_NORMAL_INDEX,
    HeadLayout,
    LOCATION_CLASSES,
    MALIGNANT_INDEX,
    TUMOR_NORMAL_INDEX,
)
from .mae import MaeConfig, MaskedAutoencoder, load_checkpoint


class RegionError(ValueError):
    pass


@dataclass(frozen=True)
class RegionBox:
    """Axis-aligned pixel box (x, y, w, h) with an optional location class."""

    x: int
    y: int
    w: int
    h: int
    location_class: int | None = None
    confidence: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise RegionError("confidence must be in [0, 1]")

    def clipped(self, image_shape) -> "RegionBox":
        h_img, w_img = image_shape[:2]
        x0 = min(max(self.x, 0), w_img - 1)
        y0 = min(max(self.y, 0), h_img - 1)
        x1 = min(max(self.x + self.w, x0 + 1), w_img)
        y1 = min(max(self.y + self.h, y0 + 1), h_img)
        return RegionBox(x0, y0, x1 - x0, y1 - y0, self.location_class, self.confidence)

    @property
    def area(self) -> int:
        return self.w * self.h


def whole_image_box(image_shape) -> RegionBox:
    h, w = image_shape[:2]
    return RegionBox(0, 0, w, h)


# ---------------------------------------------------------------------------
# Region proposers
# ---------------------------------------------------------------------------

def ground_truth_proposer(manifest: DatasetManifest):
    """Proposer returning the region boxes stored in the manifest."""
    by_id = manifest.by_id()

    def propose(sample: ImageSample) -> list[RegionBox]:
        entry = by_id.get(sample.id)
        if entry is None:
            return []
        boxes = []
        for region in entry.regions:
            x, y, w, h = region["box"]
            boxes.append(RegionBox(int(x), int(y), int(w), int(h), region.get("location")))
        return boxes

    return propose


def whole_image_proposer(sample: ImageSample) -> list[RegionBox]:
    return [whole_image_box(sample.pixels.shape)]


def detection_json_proposer(path):
    """Adapter for a generic detection JSON: {image_id: [{box, class, score}]}.

    ``class`` may be a location name or index; unknown names map to no
    location class.
    """
    doc = json.loads(Path(path).read_text())

    def propose(sample: ImageSample) -> list[RegionBox]:
        boxes = []
        for det in doc.get(sample.id, []):
            x, y, w, h = det["box"]
            cls = det.get("class")
            if isinstance(cls, str):
                cls = LOCATION_CLASSES.index(cls) if cls in LOCATION_CLASSES else None
            score = float(det.get("score", 1.0))
            boxes.append(RegionBox(int(x), int(y), int(w), int(h), cls, min(max(score, 0.0), 1.0)))
        return boxes

    return propose


def propose_regions(image: ImageSample, proposer) -> list[RegionBox]:
    """Run a proposer, clip its boxes, and fall back to the whole image.

    A failing proposer or an empty proposal degrades to the whole-image box
    with a warning rather than aborting inference.
    """
    try:
        boxes = proposer(image)
    except Exception as exc:  # noqa: BLE001 - adapter seam must not kill inference
        warnings.warn(f"region proposer failed ({exc}); using whole image")
        boxes = []
    if not boxes:
        if proposer is not whole_image_proposer:
            warnings.warn(f"no regions proposed for {image.id!r}; using whole image")
        return [whole_image_box(image.pixels.shape)]
    return [b.clipped(image.pixels.shape) for b in boxes]


# ---------------------------------------------------------------------------
# Region cropping
# ---------------------------------------------------------------------------

def intersection_over_region(window: RegionBox, box: RegionBox) -> float:
    """Fraction of the region box covered by the crop window."""
    ix = max(0, min(window.x + window.w, box.x + box.w) - max(window.x, box.x))
    iy = max(0, min(window.y + window.h, box.y + box.h) - max(window.y, box.y))
    return (ix * iy) / box.area


def _resize_plane_stack(arr: np.ndarray, out_size: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(out_size, out_size), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def crop_region(
    image: ImageSample,
    box: RegionBox,
    augment: bool = False,
    seed: int = 0,
    out_size: int = 224,
    ior_floor: float = 0.7,
    max_rotation_deg: float = 10.0,
    jitter: float = 0.1,
) -> ImageSample:
    """Crop one region and resize to a square classifier input.

    Without augmentation this is a deterministic tight crop. With it, the
    crop window is re-sampled until its intersection-over-region with the box
    is at least ``ior_floor`` (falling back to the tight crop), then rotated
    uniformly within +-``max_rotation_deg`` and brightness/contrast jittered
    within +-``jitter``.
    """
    if box.w < 4 or box.h < 4:
        raise RegionError(f"region box smaller than 4 x 4: {box}")
    arr = image.pixels
    box = box.clipped(arr.shape)

    window = box
    rng = np.random.default_rng(seed)
    if augment:
        window = _sample_ior_window(box, arr.shape, ior_floor, rng)

    crop = arr[window.y : window.y + window.h, window.x : window.x + window.w, :]
    out = _resize_plane_stack(crop, out_size)

    if augment:
        angle = rng.uniform(-max_rotation_deg, max_rotation_deg)
        out = ndimage.rotate(out, angle, axes=(0, 1), reshape=False, order=1, mode="nearest")
        contrast = 1.0 + rng.uniform(-jitter, jitter)
        brightness = 1.0 + rng.uniform(-jitter, jitter)
        mean = out.mean()
        out = (out - mean) * contrast + mean
        out = out * brightness

    out = np.clip(out, 0.0, 1.0)
    return ImageSample(
        id=f"{image.id}:{box.x},{box.y},{box.w},{box.h}",
        pixels=out,
        patient_id=image.patient_id,
        body_part=image.body_part,
        labels=dict(image.labels),
    )


def _sample_ior_window(box: RegionBox, image_shape, ior_floor: float, rng, tries: int = 50) -> RegionBox:
    h_img, w_img = image_shape[:2]
    for _ in range(tries):
        sw = box.w * rng.uniform(0.85, 1.30)
        sh = box.h * rng.uniform(0.85, 1.30)
        cx = box.x + box.w / 2 + rng.uniform(-0.25, 0.25) * box.w
        cy = box.y + box.h / 2 + rng.uniform(-0.25, 0.25) * box.h
        cand = RegionBox(
            int(round(cx - sw / 2)), int(round(cy - sh / 2)), int(round(sw)), int(round(sh))
        ).clipped((h_img, w_img))
        if cand.w >= 4 and cand.h >= 4 and intersection_over_region(cand, box) >= ior_floor:
            return cand
    return box  # tight crop always satisfies any floor <= 1


# ---------------------------------------------------------------------------
# Masked multi-task objective
# ---------------------------------------------------------------------------

def build_head_targets(samples, layout: HeadLayout = DEFAULT_HEAD_LAYOUT) -> dict[str, tuple[torch.Tensor, torch.Tensor]]:
    """Per-head (y, m) tensors from sample labels; absent labels are masked."""
    out: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}
    for group in layout.groups:
        ys, ms = [], []
        for s in samples:
            labels = s.labels if isinstance(s, ImageSample) else s
            target = labels.get(group.name)
            if target is None:
                ys.append(0.0)
                ms.append(1)
            else:
                ys.append(float(target.y))
                ms.append(int(target.m))
        out[group.name] = (torch.tensor(ys), torch.tensor(ms, dtype=torch.long))
    return out


def masked_multitask_loss(
    logits: torch.Tensor,
    targets: dict[str, tuple[torch.Tensor, torch.Tensor]],
    layout: HeadLayout = DEFAULT_HEAD_LAYOUT,
) -> torch.Tensor:
    """Equally weighted sum of per-head losses over unmasked samples only.

    Sigmoid heads use binary cross-entropy, softmax heads categorical
    cross-entropy, each averaged over that head's unmasked samples. A head
    with every sample masked contributes exactly zero (its logit slice never
    enters the graph, so its parameters receive exactly zero gradient).
    """
    if logits.shape[-1] != layout.total:
        raise RegionError(f"logits last dim {logits.shape[-1]} != layout total {layout.total}")
    terms = []
    for group in layout.groups:
        y, m = targets[group.name]
        sel = m == 0
        if not bool(sel.any()):
            continue
        if group.activation == "sigmoid":
            term = F.binary_cross_entropy_with_logits(
                logits[sel, group.offset], y[sel].to(logits.dtype)
            )
        else:
            term = F.cross_entropy(logits[sel, group.offset : group.stop], y[sel].long())
        terms.append(term)
    if not terms:
        return (logits * 0.0).sum()
    return torch.stack(terms).sum()


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class MultiHeadModel(nn.Module):
    """Backbone embedding plus one shared linear output partitioned into heads."""

    def __init__(self, backbone_config: MaeConfig, layout: HeadLayout = DEFAULT_HEAD_LAYOUT):
        super().__init__()
        self.backbone_config = backbone_config
        self.layout = layout
        self.encoder = MaskedAutoencoder(backbone_config)
        self.shared_head = nn.Linear(backbone_config.encoder_dim, layout.total)
        nn.init.trunc_normal_(self.shared_head.weight, std=0.02)
        nn.init.zeros_(self.shared_head.bias)

    @property
    def crop_size(self) -> int:
        return self.backbone_config.image_size

    def forward(self, imgs: torch.Tensor) -> torch.Tensor:
        return self.shared_head(self.encoder.embed(imgs))

    def head_parameters(self, name: str) -> list[torch.Tensor]:
        """The shared output rows (weight slice + bias slice) private to one head."""
        sl = self.layout.logit_slice(name)
        return [self.shared_head.weight[sl], self.shared_head.bias[sl]]

    def init_encoder_from(self, checkpoint) -> None:
        model, _ = load_checkpoint(checkpoint)
        self.encoder.load_state_dict(model.state_dict())


def probabilities_from_logits(logits: np.ndarray, layout: HeadLayout = DEFAULT_HEAD_LAYOUT) -> dict:
    """Per-head probabilities from one 38-logit vector."""
    out: dict = {}
    for group in layout.groups:
        chunk = logits[group.offset : group.stop]
        if group.activation == "sigmoid":
            out[group.name] = float(1.0 / (1.0 + math.exp(-float(chunk[0]))))
        else:
            z = np.exp(chunk - chunk.max())
            out[group.name] = (z / z.sum()).astype(float)
    return out


@dataclass
class RegionPrediction:
    """Per-head probabilities for one region crop."""

    box: RegionBox
    probabilities: dict

    def __post_init__(self):
        for group in DEFAULT_HEAD_LAYOUT.groups:
            p = self.probabilities.get(group.name)
            if p is None:
                raise RegionError(f"missing head {group.name!r}")
            if group.activation == "softmax":
                total = float(np.sum(p))
                if abs(total - 1.0) > 1e-6:
                    raise RegionError(f"softmax head {group.name!r} sums to {total}")
            elif not (0.0 <= float(p) <= 1.0):
                raise RegionError(f"sigmoid head {group.name!r} outside [0, 1]")

    @property
    def tumor_subtype(self) -> np.ndarray:
        return np.asarray(self.probabilities["tumor_subtype"], dtype=float)

    @property
    def is_tumor_by_argmax(self) -> bool:
        return int(self.tumor_subtype.argmax()) != TUMOR_NORMAL_INDEX

    @property
    def p_malignant(self) -> float:
        return float(self.tumor_subtype[MALIGNANT_INDEX])


@dataclass
class ImagePrediction:
    """Image-level call aggregated over regions."""

    tumor_positive: bool
    malignancy: str  # "malignant" | "benign" | "none"
    max_p_malignant: float
    abnormality_positive: bool
    fracture_positive: bool
    implant_positive: bool
    regions: tuple[RegionPrediction, ...]
    thresholds: dict

    def __post_init__(self):
        if self.malignancy != "none" and not self.tumor_positive:
            raise RegionError("malignancy set without tumor positivity")


def aggregate_image(
    region_predictions,
    tumor_threshold: float = 0.5,
    trigger: str = "subtype_argmax",
    abnormality_trigger_threshold: float = 0.5,
) -> ImagePrediction:
    """Aggregate region predictions to one image-level prediction.

    A region counts as tumor when its subtype argmax is not "normal" (the
    default trigger) or, with ``trigger="abnormality_threshold"``, when its
    abnormality probability exceeds ``abnormality_trigger_threshold``. The
    image is tumor-positive when any region triggers; among positives it is
    malignant iff the maximum malignant-class probability over regions
    exceeds ``tumor_threshold``, else benign. Order-invariant and monotone:
    raising any region's malignant probability never flips malignant to
    benign.
    """
    preds = list(region_predictions)
    if not preds:
        raise RegionError("aggregate_image requires at least one region prediction")
    if trigger not in ("subtype_argmax", "abnormality_threshold"):
        raise RegionError(f"unknown trigger {trigger!r}")

    if trigger == "subtype_argmax":
        tumor_positive = any(p.is_tumor_by_argmax for p in preds)
    else:
        tumor_positive = any(
            float(p.probabilities["abnormality"]) > abnormality_trigger_threshold for p in preds
        )

    max_p_malignant = max(p.p_malignant for p in preds)
    if tumor_positive:
        malignancy = "malignant" if max_p_malignant > tumor_threshold else "benign"
    else:
        malignancy = "none"

    t = tumor_threshold
    abnormality_positive = max(float(p.probabilities["abnormality"]) for p in preds) > t
    fracture_positive = (
        max(1.0 - float(np.asarray(p.probabilities["fracture"])[FRACTURE_NORMAL_INDEX]) for p in preds) > t
    )
    implant_positive = max(float(p.probabilities["implant"]) for p in preds) > t

    return ImagePrediction(
        tumor_positive=tumor_positive,
        malignancy=malignancy,
        max_p_malignant=max_p_malignant,
        abnormality_positive=abnormality_positive,
        fracture_positive=fracture_positive,
        implant_positive=implant_positive,
        regions=tuple(preds),
        thresholds={"tumor_threshold": tumor_threshold, "trigger": trigger},
    )


def predict_regions(model: MultiHeadModel, image: ImageSample, boxes, seed: int = 0) -> list[RegionPrediction]:
    """Deterministic (augmentation-free) per-region inference."""
    model.eval()
    crops = [crop_region(image, b, augment=False, out_size=model.crop_size) for b in boxes]
    batch = torch.stack(
        [torch.from_numpy(np.ascontiguousarray(_match_channels(c.pixels, model.backbone_config.channels), dtype=np.float32)) for c in crops]
    )
    with torch.no_grad():
        logits = model(batch).numpy()
    return [
        RegionPrediction(box=b, probabilities=probabilities_from_logits(logits[i], model.layout))
        for i, b in enumerate(boxes)
    ]


def _match_channels(pixels: np.ndarray, channels: int) -> np.ndarray:
    if pixels.shape[2] == channels:
        return pixels
    if pixels.shape[2] == 1:
        return np.repeat(pixels, channels, axis=2)
    return pixels[:, :, :channels]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class MultiheadConfig:
    """Training recipe for the five-head classifier.

    Defaults follow the full-scale recipe: AdamW at 5e-5 with weight decay
    0.02, cosine decay with 10% warmup over 30 epochs, batch 64, crops
    resized to 224. ``desk`` shrinks everything to CPU scale.
    """

    base_lr: float = 5e-5
    weight_decay: float = 0.02
    warmup_ratio: float = 0.1
    epochs: int = 30
    batch_size: int = 64
    crop_size: int = 224
    channels: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    augment: bool = False
    ior_floor: float = 0.7
    group_field: str = "body_part"

    @classmethod
    def desk(cls, **overrides) -> "MultiheadConfig":
        params = dict(base_lr=1e-3, epochs=16, batch_size=64, crop_size=64, channels=1)
        params.update(overrides)
        return cls(**params)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class HeadReport:
    name: str
    status: str  # "trained" | "untrained"
    metrics: dict[str, float] = field(default_factory=dict)
    confusion: dict | None = None

    def to_dict(self) -> dict:
        d = {"head": self.name, "status": self.status, "metrics": self.metrics}
        if self.confusion is not None:
            d["confusion"] = {g: m.tolist() for g, m in self.confusion.items()}
        return d


@dataclass
class MultiheadCvResult:
    config: MultiheadConfig
    fold_states: list[dict]
    fold_histories: list[list[dict]]
    test_reports: list[dict[str, HeadReport]]
    layout: HeadLayout = DEFAULT_HEAD_LAYOUT

    def mean_test_auroc(self, head: str) -> float:
        vals = [
            r[head].metrics["auroc"]
            for r in self.test_reports
            if r[head].status == "trained" and "auroc" in r[head].metrics
        ]
        if not vals:
            return math.nan
        return float(np.mean(vals))


def _region_dataset(manifest: DatasetManifest, ids, config: MultiheadConfig, augment: bool, seed: int = 0):
    """Crop every stored region of the given entries; returns (x, targets, groups)."""
    proposer = ground_truth_proposer(manifest)
    crops = []
    groups = []
    for n, entry_id in enumerate(ids):
        entry = manifest.entry(entry_id)
        sample = load_sample(manifest, entry, None, config.channels)
        for b, box in enumerate(propose_regions(sample, proposer)):
            crop = crop_region(
                sample,
                box,
                augment=augment,
                seed=seed * 100003 + n * 13 + b,
                out_size=config.crop_size,
                ior_floor=config.ior_floor,
            )
            if box.location_class is not None:
                crop.labels["location"] = LabeledTarget(y=box.location_class)
            crops.append(crop)
            groups.append(getattr(entry, config.group_field, None))
    x = torch.stack([torch.from_numpy(np.ascontiguousarray(c.pixels, dtype=np.float32)) for c in crops])
    targets = build_head_targets(crops)
    return x, targets, groups


def _subset_targets(targets, idx: torch.Tensor):
    return {k: (y[idx], m[idx]) for k, (y, m) in targets.items()}


def _head_val_score(model, x, targets, layout, batch_size) -> float:
    """Mean AUROC over heads that have both classes unmasked in the batch."""
    probs = _predict_probs(model, x, batch_size)
    scores = []
    for group in layout.groups:
        y, m = targets[group.name]
        sel = (m == 0).numpy()
        if sel.sum() < 2:
            continue
        try:
            if group.activation == "sigmoid":
                scores.append(evalstat.auroc(probs[group.name][sel], y.numpy()[sel].astype(int)))
            else:
                scores.append(evalstat.macro_auroc(probs[group.name][sel], y.numpy()[sel].astype(int)))
        except evalstat.MetricError:
            continue
    return float(np.mean(scores)) if scores else math.nan


def _predict_probs(model, x, batch_size) -> dict[str, np.ndarray]:
    model.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            outs.append(model(x[start : start + batch_size]))
    logits = torch.cat(outs).numpy()
    probs: dict[str, np.ndarray] = {}
    for group in model.layout.groups:
        chunk = logits[:, group.offset : group.stop]
        if group.activation == "sigmoid":
            probs[group.name] = 1.0 / (1.0 + np.exp(-chunk[:, 0]))
        else:
            z = np.exp(chunk - chunk.max(axis=1, keepdims=True))
            probs[group.name] = z / z.sum(axis=1, keepdims=True)
    return probs


def _head_test_report(probs, targets, groups, layout) -> dict[str, HeadReport]:
    reports: dict[str, HeadReport] = {}
    for group in layout.groups:
        y, m = targets[group.name]
        sel = (m == 0).numpy()
        y_sel = y.numpy()[sel].astype(int)
        if sel.sum() == 0 or np.unique(y_sel).size < 2:
            reports[group.name] = HeadReport(name=group.name, status="untrained")
            continue
        p = probs[group.name][sel]
        if group.activation == "sigmoid":
            metrics = {"auroc": evalstat.auroc(p, y_sel)}
            preds = (p > 0.5).astype(int)
            confusion = None
        else:
            metrics = {"auroc": evalstat.macro_auroc(p, y_sel)}
            preds = p.argmax(axis=1)
            g_sel = [g for g, keep in zip(groups, sel) if keep]
            confusion = evalstat.grouped_confusion(preds, y_sel, g_sel, group.size)
        metrics.update(evalstat.classification_metrics(preds, y_sel))
        reports[group.name] = HeadReport(name=group.name, status="trained", metrics=metrics, confusion=confusion)
    return reports


def train_multihead(
    manifest: DatasetManifest,
    plan: SplitPlan,
    config: MultiheadConfig,
    encoder_checkpoint=None,
    out_dir=None,
) -> MultiheadCvResult:
    """Cross-validated training of the five-head classifier on region crops.

    Each fold trains end to end (encoder initialized from ``encoder_checkpoint``
    when given), keeps its best-validation-AUROC epoch, and is scored on the
    held-out test crops: per-head AUROC/balanced accuracy/precision/recall/F1
    over unmasked labels plus grouped confusion matrices for multiclass
    heads. Heads with no usable test labels are reported "untrained".
    """
    mae_cfg = MaeConfig.toy(image_size=config.crop_size, channels=config.channels)
    if encoder_checkpoint is not None:
        ref, _ = load_checkpoint(encoder_checkpoint)
        mae_cfg = ref.config

    x_test, targets_test, groups_test = _region_dataset(manifest, plan.test_ids, config, augment=False)

    fold_states: list[dict] = []
    fold_histories: list[list[dict]] = []
    test_reports: list[dict[str, HeadReport]] = []

    for fi, (train_ids, val_ids) in enumerate(plan.folds):
        fold_seed = config.seed * 10007 + fi
        torch.manual_seed(fold_seed)
        rng = np.random.default_rng(fold_seed)

        model = MultiHeadModel(mae_cfg)
        if encoder_checkpoint is not None:
            model.init_encoder_from(encoder_checkpoint)

        x_train, targets_train, _ = _region_dataset(
            manifest, train_ids, config, augment=config.augment, seed=fold_seed
        )
        x_val, targets_val, _ = _region_dataset(manifest, val_ids, config, augment=False)

        opt = torch.optim.AdamW(
            model.parameters(),
            lr=config.base_lr,
            betas=(config.beta1, config.beta2),
            weight_decay=config.weight_decay,
        )
        warmup = int(round(config.warmup_ratio * config.epochs))
        best_score = -math.inf
        best_state = copy.deepcopy(model.state_dict())
        history: list[dict] = []

        n = x_train.shape[0]
        for epoch in range(config.epochs):
            if warmup > 0 and epoch < warmup:
                factor = (epoch + 1) / warmup
            else:
                span = max(1, config.epochs - warmup)
                factor = 0.5 * (1 + math.cos(math.pi * (epoch - warmup) / span))
            for gparam in opt.param_groups:
                gparam["lr"] = config.base_lr * factor

            model.train()
            order = rng.permutation(n)
            losses = []
            for start in range(0, n, config.batch_size):
                idx = torch.from_numpy(order[start : start + config.batch_size])
                logits = model(x_train[idx])
                loss = masked_multitask_loss(logits, _subset_targets(targets_train, idx), model.layout)
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(float(loss.item()))

            val_score = _head_val_score(model, x_val, targets_val, model.layout, config.batch_size)
            if val_score > best_score:
                best_score = val_score
                best_state = copy.deepcopy(model.state_dict())
            history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_mean_auroc": val_score})

        model.load_state_dict(best_state)
        probs = _predict_probs(model, x_test, config.batch_size)
        test_reports.append(_head_test_report(probs, targets_test, groups_test, model.layout))
        fold_states.append(best_state)
        fold_histories.append(history)

    result = MultiheadCvResult(
        config=config,
        fold_states=fold_states,
        fold_histories=fold_histories,
        test_reports=test_reports,
    )
    if out_dir is not None:
        _write_multihead_run(result, mae_cfg, Path(out_dir))
    return result


def _write_multihead_run(result: MultiheadCvResult, mae_cfg: MaeConfig, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(result.config.to_dict(), indent=1, sort_keys=True))
    for fi, (state, history, report) in enumerate(
        zip(result.fold_states, result.fold_histories, result.test_reports)
    ):
        fold_dir = out_dir / f"fold{fi}"
        fold_dir.mkdir(exist_ok=True)
        torch.save(state, fold_dir / "best.ckpt")
        with (fold_dir / "history.jsonl").open("w") as f:
            for rec in history:
                f.write(json.dumps(rec) + "\n")
        (fold_dir / "report.json").write_text(
            json.dumps({h: r.to_dict() for h, r in report.items()}, indent=1)
        )
    # bundle the best fold (by mean head AUROC) as a servable checkpoint
    means = []
    for report in result.test_reports:
        vals = [r.metrics.get("auroc", math.nan) for r in report.values() if r.status == "trained"]
        means.append(float(np.nanmean(vals)) if vals else -math.inf)
    best_fold = int(np.argmax(means))
    model = MultiHeadModel(mae_cfg)
    model.load_state_dict(result.fold_states[best_fold])
    save_multihead_checkpoint(model, out_dir / "serve", extra={"fold": best_fold})


# ---------------------------------------------------------------------------
# Checkpoint I/O for the service
# ---------------------------------------------------------------------------

def save_multihead_checkpoint(model: MultiHeadModel, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "kind": "multihead",
        "backbone_config": model.backbone_config.to_dict(),
        "heads": [
            {"name": g.name, "size": g.size, "activation": g.activation, "class_names": list(g.class_names)}
            for g in model.layout.groups
        ],
    }
    if extra:
        meta.update(extra)
    (path / "metadata.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    torch.save(model.state_dict(), path / "weights.pt")
    return path


def load_multihead_checkpoint(path) -> tuple[MultiHeadModel, dict]:
    path = Path(path)
    meta = json.loads((path / "metadata.json").read_text())
    if meta.get("kind") != "multihead":
        raise RegionError(f"{path} is not a multi-head checkpoint")
    model = MultiHeadModel(MaeConfig.from_dict(meta["backbone_config"]))
    model.load_state_dict(torch.load(path / "weights.pt", weights_only=True))
    model.eval()
    return model, meta
