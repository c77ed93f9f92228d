"""Task registry and cross-validated fine-tuning/evaluation harness.

Twelve built-in diagnostic tasks cover fracture detection, abnormality
screening, bone tumor subtyping/malignancy/presence, osteoarthritis grading,
bone-age regression, pes planus, and implant detection. Every task trains
through the same loop: per-fold end-to-end optimization with layer-wise
learning-rate decay, per-epoch validation, and selection of the checkpoint
with the best validation AUROC (classification) or MAE (regression), ties
resolved toward the earliest epoch. The selected checkpoints are then scored
once on the held-out test split.

Backbones are pluggable behind an embedding interface (images in, fixed-size
vector out), so a convolutional baseline trains under the identical
protocol and splits as the transformer encoder.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import evalstat
from .datamodel import DatasetManifest, SplitPlan, subsample_training
from .evalstat import MetricReport
from .mae import MaskedAutoencoder, MaeConfig, load_checkpoint, load_manifest_images

TUMOR_SUBTYPE_NAMES = (
    "osteochondroma",
    "multiple_osteochondromas",
    "simple_bone_cyst",
    "giant_cell_tumor",
    "osteofibroma",
    "synovial_osteochondroma",
    "other_benign_tumor",
    "osteosarcoma",
    "other_malignant_tumor",
)

WRIST_AO_NAMES = (
    "23r-M/2.1",
    "23-M/2.1",
    "23r-M/3.1",
    "23r-M/3.1;23u-M/2.1",
    "23r-M/3.1;23u-E/7",
    "23r-M/2.1;23u-E/7",
    "23-M/3.1",
    "23r-E/2.1",
    "23r-E/2.1;23u-E/7",
    "23r-E/2.1;23u-M/2.1",
)

KL_GRADE_NAMES = ("KL0", "KL1", "KL2", "KL3", "KL4")


class FinetuneError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    """One downstream task: its kind fixes the loss and the selection metric."""

    task_id: str
    kind: str  # binary | multiclass | regression
    num_classes: int = 0
    class_names: tuple[str, ...] = ()
    loss: str = ""
    selection_metric: str = ""

    def __post_init__(self):
        pairs = {
            "binary": ("sigmoid-bce", "auroc"),
            "multiclass": ("softmax-ce", "auroc"),
            "regression": ("mse", "mae"),
        }
        if self.kind not in pairs:
            raise FinetuneError(f"unknown task kind {self.kind!r}")
        loss, metric = pairs[self.kind]
        object.__setattr__(self, "loss", loss)
        object.__setattr__(self, "selection_metric", metric)
        if self.kind == "binary":
            object.__setattr__(self, "num_classes", 2)
        if self.kind == "multiclass" and self.num_classes < 2:
            raise FinetuneError(f"multiclass task {self.task_id!r} needs num_classes >= 2")

    @property
    def output_arity(self) -> int:
        if self.kind == "multiclass":
            return self.num_classes
        return 1


def register_builtin_tasks() -> dict[str, TaskSpec]:
    """The twelve built-in diagnostic tasks."""
    specs = [
        TaskSpec("wrist-AO-10class", "multiclass", 10, WRIST_AO_NAMES),
        TaskSpec("wrist-fracture", "binary", class_names=("no_fracture", "fracture")),
        TaskSpec("fracture", "binary", class_names=("no_fracture", "fracture")),
        TaskSpec("abnormality", "binary", class_names=("normal", "abnormal")),
        TaskSpec("tumor-subtype-9class", "multiclass", 9, TUMOR_SUBTYPE_NAMES),
        TaskSpec("tumor-malignancy", "binary", class_names=("benign", "malignant")),
        TaskSpec("tumor-presence", "binary", class_names=("no_tumor", "tumor")),
        TaskSpec("OA-KL-5class", "multiclass", 5, KL_GRADE_NAMES),
        TaskSpec("bone-age-regression", "regression"),
        TaskSpec("pes-planus", "binary", class_names=("normal", "pes_planus")),
        TaskSpec("wrist-implant", "binary", class_names=("absent", "present")),
        TaskSpec("implant", "binary", class_names=("absent", "present")),
    ]
    return {s.task_id: s for s in specs}


def task_for_manifest(manifest: DatasetManifest, task_id: str) -> TaskSpec:
    """TaskSpec derived from a manifest's own task declaration."""
    decl = manifest.tasks.get(task_id)
    if decl is None:
        raise FinetuneError(f"unknown task {task_id!r}")
    return TaskSpec(task_id, decl.kind, decl.num_classes, decl.class_names)


# ---------------------------------------------------------------------------
# Backbones
# ---------------------------------------------------------------------------

class EncoderBackbone(nn.Module):
    """Embedding backbone wrapping the autoencoder's ViT encoder."""

    def __init__(self, model: MaskedAutoencoder):
        super().__init__()
        self.inner = model
        self.image_size = model.config.image_size
        self.channels = model.config.channels

    @property
    def embed_dim(self) -> int:
        return self.inner.embed_dim

    def forward(self, imgs: torch.Tensor) -> torch.Tensor:
        return self.inner.embed(imgs)

    def layer_groups(self) -> list[list[nn.Parameter]]:
        groups = [list(self.inner.patch_embed.parameters())]
        blocks = list(self.inner.encoder_blocks)
        for i, blk in enumerate(blocks):
            params = list(blk.parameters())
            if i == len(blocks) - 1:
                params += list(self.inner.encoder_norm.parameters())
            groups.append(params)
        return groups


class SmallConvBackbone(nn.Module):
    """Compact convolutional baseline behind the same embedding interface."""

    def __init__(self, channels: int = 1, image_size: int = 64, embed_dim: int = 64, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.image_size = image_size
        self.channels = channels
        self._embed_dim = embed_dim
        self.features = nn.Sequential(
            nn.Conv2d(channels, 16, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(32, embed_dim, 3, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
        )

    @property
    def embed_dim(self) -> int:
        return self._embed_dim

    def forward(self, imgs: torch.Tensor) -> torch.Tensor:
        x = imgs.permute(0, 3, 1, 2)
        return self.features(x).flatten(1)

    def layer_groups(self) -> list[list[nn.Parameter]]:
        # convolutional baseline trains with a single lr group
        return [list(self.parameters())]


def encoder_backbone_from_checkpoint(path) -> EncoderBackbone:
    model, _ = load_checkpoint(path)
    model.train()
    return EncoderBackbone(model)


class TaskModel(nn.Module):
    """Backbone plus one linear task head (1, K, or 1 outputs)."""

    def __init__(self, backbone, task: TaskSpec):
        super().__init__()
        self.backbone = backbone
        self.task = task
        self.head = nn.Linear(backbone.embed_dim, task.output_arity)
        nn.init.zeros_(self.head.bias)
        nn.init.trunc_normal_(self.head.weight, std=0.02)

    def forward(self, imgs: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(imgs))


def attach_head(backbone, task: TaskSpec, expected_dim: int | None = None) -> TaskModel:
    """Attach a fresh task head; errors on an embedding-dimension mismatch."""
    if expected_dim is not None and expected_dim != backbone.embed_dim:
        raise FinetuneError(
            f"embedding-dimension mismatch: backbone gives {backbone.embed_dim}, expected {expected_dim}"
        )
    return TaskModel(backbone, task)


def layerwise_lr_scales(n_layers: int, decay: float) -> list[float]:
    """Geometric schedule: layer l of L gets decay^(L - l), topmost layer gets 1."""
    return [decay ** (n_layers - (l + 1)) for l in range(n_layers)]


def build_param_groups(model: TaskModel, base_lr: float, decay: float, weight_decay: float) -> list[dict]:
    layers = model.backbone.layer_groups() + [list(model.head.parameters())]
    scales = layerwise_lr_scales(len(layers), decay)
    return [
        {"params": params, "lr": base_lr * scale, "weight_decay": weight_decay}
        for params, scale in zip(layers, scales)
    ]


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

@dataclass
class FinetuneConfig:
    """Fine-tuning hyperparameters.

    ``transformer_defaults`` gives the standard transformer recipe (lr 5e-5,
    layer-wise decay 0.75, batch 64, weight decay 0.05, 10% warmup, 50
    epochs); ``conv_defaults`` the convolutional one (lr 5e-4, weight decay
    1e-4, no layer-wise decay).
    """

    base_lr: float = 5e-5
    layerwise_lr_decay: float = 0.75
    batch_size: int = 64
    weight_decay: float = 0.05
    warmup_ratio: float = 0.1
    epochs: int = 50
    backbone: str = "transformer"  # "transformer" | "conv"
    backbone_checkpoint: str | None = None
    image_size: int = 224
    channels: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    freeze_backbone: bool = False

    @classmethod
    def transformer_defaults(cls, **overrides) -> "FinetuneConfig":
        return cls(**overrides)

    @classmethod
    def conv_defaults(cls, **overrides) -> "FinetuneConfig":
        params = dict(base_lr=5e-4, weight_decay=1e-4, layerwise_lr_decay=1.0, backbone="conv")
        params.update(overrides)
        return cls(**params)

    def to_dict(self) -> dict:
        return asdict(self)


def _make_backbone(config: FinetuneConfig, fold_seed: int):
    if config.backbone == "conv":
        return SmallConvBackbone(channels=config.channels, image_size=config.image_size, seed=fold_seed)
    if config.backbone_checkpoint is not None:
        return encoder_backbone_from_checkpoint(config.backbone_checkpoint)
    torch.manual_seed(fold_seed)
    mae_cfg = MaeConfig.toy(image_size=config.image_size, channels=config.channels)
    return EncoderBackbone(MaskedAutoencoder(mae_cfg))


# ---------------------------------------------------------------------------
# Data access
# ---------------------------------------------------------------------------

def _labels_for(manifest: DatasetManifest, ids, task: TaskSpec, require_unmasked: bool, context: str):
    by_id = manifest.by_id()
    values = []
    for i in ids:
        target = by_id[i].labels.get(task.task_id)
        if target is None or target.m == 1:
            if require_unmasked:
                raise FinetuneError(f"{context}: entry {i!r} has no usable label for {task.task_id!r}")
            values.append(None)
        else:
            values.append(float(target.y))
    return values


def _task_tensors(manifest, ids, task, config, cache):
    images = torch.stack([cache[i] for i in ids])
    labels = _labels_for(manifest, ids, task, require_unmasked=True, context="dataset")
    if task.kind == "regression":
        y = torch.tensor(labels, dtype=torch.float32)
    else:
        y = torch.tensor([int(v) for v in labels], dtype=torch.long)
    return images, y


def _loss_and_scores(model, images, y, task, batch_size, train_order=None, opt=None):
    """One pass over the data; returns (mean loss, scores) — scores only when evaluating."""
    training = opt is not None
    model.train() if training else model.eval()
    n = images.shape[0]
    order = train_order if train_order is not None else np.arange(n)
    losses = []
    scores = [] if not training else None
    ctx = torch.enable_grad() if training else torch.no_grad()
    with ctx:
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb = images[torch.from_numpy(np.asarray(idx))]
            yb = y[torch.from_numpy(np.asarray(idx))]
            logits = model(xb)
            if task.kind == "binary":
                loss = F.binary_cross_entropy_with_logits(logits.squeeze(-1), yb.float())
                if not training:
                    scores.append(torch.sigmoid(logits.squeeze(-1)))
            elif task.kind == "multiclass":
                loss = F.cross_entropy(logits, yb)
                if not training:
                    scores.append(torch.softmax(logits, dim=1))
            else:
                loss = F.mse_loss(logits.squeeze(-1), yb)
                if not training:
                    scores.append(logits.squeeze(-1))
            if training:
                opt.zero_grad()
                loss.backward()
                opt.step()
            losses.append(float(loss.item()))
    mean_loss = float(np.mean(losses)) if losses else math.nan
    if training:
        return mean_loss, None
    return mean_loss, torch.cat(scores).numpy()


def _validation_metric(scores: np.ndarray, y: np.ndarray, task: TaskSpec) -> float:
    if task.kind == "binary":
        return evalstat.auroc(scores, y)
    if task.kind == "multiclass":
        return evalstat.macro_auroc(scores, y)
    return evalstat.regression_metrics(scores, y)["mae"]


def _epoch_lr_factor(epoch: int, epochs: int, warmup_ratio: float) -> float:
    warmup = int(round(warmup_ratio * epochs))
    if warmup > 0 and epoch < warmup:
        return (epoch + 1) / warmup
    span = max(1, epochs - warmup)
    progress = (epoch - warmup) / span
    return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


# ---------------------------------------------------------------------------
# Cross-validated fine-tuning
# ---------------------------------------------------------------------------

@dataclass
class FoldOutcome:
    fold: int
    best_epoch: int
    best_metric: float
    state_dict: dict
    history: list[dict] = field(default_factory=list)


@dataclass
class FinetuneResult:
    task: TaskSpec
    config: FinetuneConfig
    folds: list[FoldOutcome]

    def best_metrics(self) -> list[float]:
        return [f.best_metric for f in self.folds]


def finetune_cv(
    manifest: DatasetManifest,
    task: TaskSpec,
    plan: SplitPlan,
    config: FinetuneConfig,
    image_cache: dict[str, torch.Tensor] | None = None,
    run_dir=None,
) -> FinetuneResult:
    """Train one model per fold, keeping the best-validation checkpoint of each.

    Selection maximizes validation AUROC (classification) or minimizes MAE
    (regression); ties keep the earliest epoch. The training loop never reads
    test ids.
    """
    if image_cache is None:
        image_cache = load_image_cache(manifest, config, ids=plan.train_val_pool())

    # fail fast on degenerate validation folds
    if task.kind != "regression":
        by_id = manifest.by_id()
        for fi, (_train, val) in enumerate(plan.folds):
            vals = {
                int(by_id[i].labels[task.task_id].y)
                for i in val
                if task.task_id in by_id[i].labels and by_id[i].labels[task.task_id].m == 0
            }
            if len(vals) < 2:
                raise FinetuneError(f"AUROC undefined: fold {fi} validation set is single-class")

    folds: list[FoldOutcome] = []
    for fi, (train_ids, val_ids) in enumerate(plan.folds):
        fold_seed = config.seed * 10007 + fi
        torch.manual_seed(fold_seed)
        rng = np.random.default_rng(fold_seed)

        backbone = _make_backbone(config, fold_seed)
        model = attach_head(backbone, task)
        if config.freeze_backbone:
            for p in model.backbone.parameters():
                p.requires_grad_(False)

        x_train, y_train = _task_tensors(manifest, train_ids, task, config, image_cache)
        x_val, y_val = _task_tensors(manifest, val_ids, task, config, image_cache)
        if config.freeze_backbone:
            x_train = _precompute_embeddings(model.backbone, x_train, config.batch_size)
            x_val = _precompute_embeddings(model.backbone, x_val, config.batch_size)
            runner = _HeadOnly(model.head)
        else:
            runner = model

        param_groups = build_param_groups(model, config.base_lr, config.layerwise_lr_decay, config.weight_decay)
        param_groups = [g for g in param_groups if any(p.requires_grad for p in g["params"])]
        base_lrs = [g["lr"] for g in param_groups]
        opt = torch.optim.AdamW(param_groups, betas=(config.beta1, config.beta2))

        maximize = task.selection_metric == "auroc"
        best_metric = -math.inf if maximize else math.inf
        best_epoch = -1
        best_state = copy.deepcopy(model.state_dict())
        history: list[dict] = []

        for epoch in range(config.epochs):
            factor = _epoch_lr_factor(epoch, config.epochs, config.warmup_ratio)
            for group, lr0 in zip(opt.param_groups, base_lrs):
                group["lr"] = lr0 * factor
            order = rng.permutation(len(train_ids))
            train_loss, _ = _loss_and_scores(runner, x_train, y_train, task, config.batch_size, order, opt)
            _, scores = _loss_and_scores(runner, x_val, y_val, task, config.batch_size)
            metric = _validation_metric(scores, y_val.numpy(), task)
            improved = metric > best_metric if maximize else metric < best_metric
            if improved:
                best_metric = metric
                best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
            history.append(
                {"epoch": epoch, "train_loss": train_loss, f"val_{task.selection_metric}": metric}
            )

        if best_epoch < 0:
            best_epoch = 0
        folds.append(
            FoldOutcome(fold=fi, best_epoch=best_epoch, best_metric=best_metric, state_dict=best_state, history=history)
        )

    result = FinetuneResult(task=task, config=config, folds=folds)
    if run_dir is not None:
        _write_run(result, Path(run_dir))
    return result


class _HeadOnly(nn.Module):
    """Runs only the head over precomputed embeddings (frozen-backbone path)."""

    def __init__(self, head: nn.Linear):
        super().__init__()
        self.head = head

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        return self.head(embeddings)


def _precompute_embeddings(backbone, images: torch.Tensor, batch_size: int) -> torch.Tensor:
    backbone.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            outs.append(backbone(images[start : start + batch_size]))
    return torch.cat(outs)


def load_image_cache(manifest: DatasetManifest, config: FinetuneConfig, ids=None) -> dict[str, torch.Tensor]:
    data, kept = load_manifest_images(manifest, config.image_size, config.channels, ids=ids)
    return {i: data[k] for k, i in enumerate(kept)}


def _write_run(result: FinetuneResult, run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(result.config.to_dict(), indent=1, sort_keys=True))
    for fold in result.folds:
        fold_dir = run_dir / f"fold{fold.fold}"
        fold_dir.mkdir(exist_ok=True)
        with (fold_dir / "history.jsonl").open("w") as f:
            for rec in fold.history:
                f.write(json.dumps(rec) + "\n")
        torch.save(fold.state_dict, fold_dir / "best.ckpt")
        (fold_dir / "report.json").write_text(
            json.dumps({"best_epoch": fold.best_epoch, "best_metric": fold.best_metric}, indent=1)
        )


# ---------------------------------------------------------------------------
# Test evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvaluationReport:
    task_id: str
    reports: dict[str, MetricReport]
    per_fold: list[dict[str, float]]
    subgroups: dict[str, dict[str, MetricReport]] | None = None

    def to_dict(self) -> dict:
        d = {
            "task": self.task_id,
            "metrics": {k: v.to_dict() for k, v in self.reports.items()},
            "per_fold": self.per_fold,
        }
        if self.subgroups is not None:
            d["subgroups"] = {
                g: {k: v.to_dict() for k, v in reps.items()} for g, reps in self.subgroups.items()
            }
        return d


def _fold_test_metrics(scores: np.ndarray, y: np.ndarray, task: TaskSpec) -> dict[str, float]:
    if task.kind == "regression":
        return evalstat.regression_metrics(scores, y)
    if task.kind == "binary":
        preds = (scores > 0.5).astype(int)
        out = {"auroc": evalstat.auroc(scores, y)}
    else:
        preds = scores.argmax(axis=1)
        out = {"auroc": evalstat.macro_auroc(scores, y)}
    out.update(evalstat.classification_metrics(preds, y))
    return out


def evaluate_test(
    result: FinetuneResult,
    manifest: DatasetManifest,
    plan: SplitPlan,
    task: TaskSpec,
    image_cache: dict[str, torch.Tensor] | None = None,
    group_field: str | None = None,
) -> EvaluationReport:
    """Score every fold's selected checkpoint on the held-out test set.

    Reports each metric's per-fold values with mean and 95% CI; with
    ``group_field`` (an entry attribute such as ``body_part``) adds per-group
    breakdowns.
    """
    test_ids = list(plan.test_ids)
    if not test_ids:
        raise FinetuneError("test set is empty")
    config = result.config
    if image_cache is None:
        image_cache = load_image_cache(manifest, config, ids=test_ids)
    x_test, y_test = _task_tensors(manifest, test_ids, task, config, image_cache)

    per_fold_scores = []
    per_fold = []
    for fold in result.folds:
        model = attach_head(_make_backbone(config, config.seed * 10007 + fold.fold), task)
        model.load_state_dict(fold.state_dict)
        _, scores = _loss_and_scores(model, x_test, y_test, task, config.batch_size)
        per_fold_scores.append(scores)
        per_fold.append(_fold_test_metrics(scores, y_test.numpy(), task))

    names = sorted(per_fold[0])
    reports = {m: evalstat.metric_report(m, [f[m] for f in per_fold]) for m in names}

    subgroups = None
    if group_field is not None:
        by_id = manifest.by_id()
        groups = [getattr(by_id[i], group_field, None) for i in test_ids]
        subgroups = {}
        for g in sorted({str(v) for v in groups if v is not None}):
            sel = np.array([str(v) == g for v in groups])
            if sel.sum() < 2:
                continue
            try:
                fold_metrics = [
                    _fold_test_metrics(s[sel], y_test.numpy()[sel], task) for s in per_fold_scores
                ]
            except evalstat.MetricError:
                continue
            subgroups[g] = {
                m: evalstat.metric_report(m, [f[m] for f in fold_metrics]) for m in sorted(fold_metrics[0])
            }
    return EvaluationReport(task_id=task.task_id, reports=reports, per_fold=per_fold, subgroups=subgroups)


# ---------------------------------------------------------------------------
# Label-efficiency sweep
# ---------------------------------------------------------------------------

DEFAULT_SWEEP_FRACTIONS = (0.1, 0.2, 0.5, 0.9)


@dataclass
class SweepPoint:
    fraction: float
    seed: int
    per_fold: list[float]
    mean: float


@dataclass
class SweepResult:
    task_id: str
    metric: str
    points: list[SweepPoint]

    def curve(self) -> dict[float, list[float]]:
        """fraction -> per-seed mean metric values."""
        out: dict[float, list[float]] = {}
        for p in self.points:
            out.setdefault(p.fraction, []).append(p.mean)
        return out

    def to_dict(self) -> dict:
        return {
            "task": self.task_id,
            "metric": self.metric,
            "points": [asdict(p) for p in self.points],
        }


def label_efficiency_sweep(
    manifest: DatasetManifest,
    task: TaskSpec,
    plan: SplitPlan,
    config: FinetuneConfig,
    fractions=DEFAULT_SWEEP_FRACTIONS,
    seeds=(0,),
    image_cache: dict[str, torch.Tensor] | None = None,
) -> SweepResult:
    """Fine-tune at several training-set fractions and score each point.

    For every (fraction, seed) the training pool is stratified-subsampled to
    ceil(fraction * N); the unsampled remainder serves as that point's test
    set. The headline metric is the task's selection metric on that test set.
    """
    for f in fractions:
        if not (0.0 < f <= 1.0):
            raise FinetuneError(f"fraction {f} outside (0, 1]")
    if image_cache is None:
        image_cache = load_image_cache(manifest, config)

    metric_name = "auroc" if task.selection_metric == "auroc" else "mae"
    points: list[SweepPoint] = []
    for fraction in fractions:
        for seed in seeds:
            sub = subsample_training(manifest, plan, fraction, seed)
            res = finetune_cv(manifest, task, sub, config, image_cache=image_cache)
            report = evaluate_test(res, manifest, sub, task, image_cache=image_cache)
            vals = [f[metric_name] for f in report.per_fold]
            points.append(SweepPoint(fraction=fraction, seed=seed, per_fold=vals, mean=float(np.mean(vals))))
    return SweepResult(task_id=task.task_id, metric=metric_name, points=points)
