"""Samples, manifests, labels, and deterministic split/subsampling plans.

A manifest is a single JSON document with a ``tasks`` section declaring every
label's task (binary / multiclass / regression) and an ``entries`` array of
images with per-task labels. Each label carries an availability flag ``m``
(1 = unknown / not applicable) that downstream losses and metrics honor.

Split planning is a pure function of (manifest, parameters, seed): the same
inputs always produce byte-identical plans. When a group key (typically
``patient_id``) is present, no group ever straddles a train/val/test
boundary.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

TASK_KINDS = ("binary", "multiclass", "regression")


class ManifestError(ValueError):
    """Raised for malformed manifests or invariant violations."""


class SplitError(ValueError):
    """Raised when a split plan cannot satisfy its constraints."""


@dataclass(frozen=True)
class LabeledTarget:
    """One label value with its availability flag (m=1 means unknown)."""

    y: float
    m: int = 0

    def __post_init__(self):
        if self.m not in (0, 1):
            raise ManifestError(f"availability flag must be 0 or 1, got {self.m}")


@dataclass(frozen=True)
class TaskDecl:
    """Declaration of one labeling task within a manifest."""

    task_id: str
    kind: str
    num_classes: int = 0
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ManifestError(f"unknown task kind {self.kind!r} for {self.task_id!r}")
        if self.kind == "binary":
            object.__setattr__(self, "num_classes", 2)
        if self.kind == "multiclass" and self.num_classes < 2:
            raise ManifestError(f"multiclass task {self.task_id!r} needs num_classes >= 2")
        if self.class_names and self.kind != "regression" and len(self.class_names) != self.num_classes:
            raise ManifestError(f"task {self.task_id!r}: class_names length != num_classes")


@dataclass
class ImageSample:
    """One decoded image with identifiers and per-task labels.

    ``pixels`` is an H x W x C float array in [0, 1].
    """

    id: str
    pixels: np.ndarray
    patient_id: str | None = None
    body_part: str | None = None
    labels: dict[str, LabeledTarget] = field(default_factory=dict)

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3:
            raise ManifestError(f"pixels must be H x W x C, got shape {px.shape}")
        if px.size == 0:
            raise ManifestError("zero-area image")
        if float(px.min()) < -1e-9 or float(px.max()) > 1 + 1e-9:
            raise ManifestError("pixel values must lie in [0, 1]")
        self.pixels = px

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class ManifestEntry:
    """One manifest row: an image reference plus its labels."""

    id: str
    path: str
    patient_id: str | None = None
    body_part: str | None = None
    labels: dict[str, LabeledTarget] = field(default_factory=dict)
    regions: tuple[dict, ...] = ()


@dataclass
class DatasetManifest:
    """Validated collection of entries and their task declarations."""

    tasks: dict[str, TaskDecl]
    entries: list[ManifestEntry]
    root: Path | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        seen: set[str] = set()
        for entry in self.entries:
            if entry.id in seen:
                raise ManifestError(f"duplicate id {entry.id!r}")
            seen.add(entry.id)
            for task_id, target in entry.labels.items():
                decl = self.tasks.get(task_id)
                if decl is None:
                    raise ManifestError(f"undeclared task {task_id!r} on entry {entry.id!r}")
                if decl.kind != "regression" and target.m == 0:
                    y = int(target.y)
                    if y != target.y or not (0 <= y < decl.num_classes):
                        raise ManifestError(
                            f"entry {entry.id!r}: label {target.y!r} outside task "
                            f"{task_id!r} cardinality {decl.num_classes}"
                        )

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def entry(self, entry_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == entry_id:
                return e
        raise KeyError(entry_id)

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.id: e for e in self.entries}

    def resolve_path(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def label_value(self, entry: ManifestEntry, task_id: str) -> LabeledTarget | None:
        return entry.labels.get(task_id)


@dataclass(frozen=True)
class SplitPlan:
    """Deterministic test/fold assignment over manifest ids.

    ``notes`` records provenance: grouping fallbacks, achieved test
    fractions, and subsampling lineage.
    """

    test_ids: tuple[str, ...]
    folds: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...]
    seed: int
    group_key: str | None = None
    stratify_key: str | None = None
    notes: tuple[str, ...] = ()

    def train_val_pool(self) -> tuple[str, ...]:
        pool: list[str] = []
        seen: set[str] = set()
        for train_ids, val_ids in self.folds:
            for i in (*train_ids, *val_ids):
                if i not in seen:
                    seen.add(i)
                    pool.append(i)
        return tuple(pool)


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------

def _target_from_json(raw) -> LabeledTarget:
    if isinstance(raw, dict):
        if "y" not in raw:
            raise ManifestError(f"label object missing 'y': {raw!r}")
        return LabeledTarget(y=raw["y"], m=int(raw.get("m", 0)))
    return LabeledTarget(y=raw, m=0)


def load_manifest(path) -> DatasetManifest:
    """Load and validate a manifest JSON document.

    Raises ManifestError on parse failures, undeclared task ids, duplicate
    entry ids, or out-of-range class labels.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot parse manifest {path}: {exc}") from exc

    if not isinstance(raw, dict) or "tasks" not in raw or "entries" not in raw:
        raise ManifestError(f"manifest {path} must contain 'tasks' and 'entries'")

    tasks: dict[str, TaskDecl] = {}
    for task_id, decl in raw["tasks"].items():
        tasks[task_id] = TaskDecl(
            task_id=task_id,
            kind=decl["kind"],
            num_classes=int(decl.get("num_classes", 0)),
            class_names=tuple(decl.get("class_names", ())),
        )

    entries: list[ManifestEntry] = []
    for item in raw["entries"]:
        labels = {tid: _target_from_json(v) for tid, v in item.get("labels", {}).items()}
        entries.append(
            ManifestEntry(
                id=str(item["id"]),
                path=item["path"],
                patient_id=item.get("patient_id"),
                body_part=item.get("body_part"),
                labels=labels,
                regions=tuple(item.get("regions", ())),
            )
        )
    return DatasetManifest(tasks=tasks, entries=entries, root=path.parent)


def save_manifest(manifest: DatasetManifest, path) -> Path:
    """Write a manifest JSON document (stable key order for reproducibility)."""
    path = Path(path)
    doc = {
        "tasks": {
            t.task_id: {
                "kind": t.kind,
                **({"num_classes": t.num_classes} if t.kind == "multiclass" else {}),
                **({"class_names": list(t.class_names)} if t.class_names else {}),
            }
            for t in manifest.tasks.values()
        },
        "entries": [
            {
                "id": e.id,
                "path": e.path,
                **({"patient_id": e.patient_id} if e.patient_id is not None else {}),
                **({"body_part": e.body_part} if e.body_part is not None else {}),
                "labels": {t: {"y": lt.y, "m": lt.m} for t, lt in e.labels.items()},
                **({"regions": list(e.regions)} if e.regions else {}),
            }
            for e in manifest.entries
        ],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


# ---------------------------------------------------------------------------
# Split planning
# ---------------------------------------------------------------------------

def _strata(manifest: DatasetManifest, ids: list[str], stratify_key: str | None) -> dict:
    """Map stratum value -> ids, in manifest order. Masked labels form their own stratum."""
    if stratify_key is None:
        return {"__all__": list(ids)}
    decl = manifest.tasks.get(stratify_key)
    if decl is None:
        raise SplitError(f"stratify_key {stratify_key!r} is not a declared task")
    if decl.kind == "regression":
        # regression targets are not stratified
        return {"__all__": list(ids)}
    by_id = manifest.by_id()
    out: dict = {}
    for i in ids:
        target = by_id[i].labels.get(stratify_key)
        key = "__masked__" if (target is None or target.m == 1) else int(target.y)
        out.setdefault(key, []).append(i)
    return out


def _largest_remainder_quotas(counts: list[int], fraction: float, total: int) -> list[int]:
    """Integer per-stratum quotas summing to ``total``, each within 1 of fraction*count."""
    exact = [fraction * c for c in counts]
    quotas = [min(int(math.floor(x)), c) for x, c in zip(exact, counts)]
    remainder = total - sum(quotas)
    order = sorted(range(len(counts)), key=lambda i: (-(exact[i] - math.floor(exact[i])), i))
    pos = 0
    while remainder > 0 and any(q < c for q, c in zip(quotas, counts)):
        i = order[pos % len(order)]
        if quotas[i] < counts[i]:
            quotas[i] += 1
            remainder -= 1
        pos += 1
    return quotas


def _deal_folds(stratum_ids: dict, k: int, rng: np.random.Generator) -> list[list[str]]:
    """Deal ids round-robin per stratum into k validation buckets."""
    buckets: list[list[str]] = [[] for _ in range(k)]
    offset = 0
    for key in sorted(stratum_ids, key=str):
        ids = list(stratum_ids[key])
        rng.shuffle(ids)
        for j, i in enumerate(ids):
            buckets[(j + offset) % k].append(i)
        # stagger strata so small classes do not pile onto fold 0
        offset += len(ids)
    return buckets


def make_splits(
    manifest: DatasetManifest,
    test_frac: float,
    k: int,
    seed: int,
    stratify_key: str | None = None,
    group_key: str | None = None,
) -> SplitPlan:
    """Build a deterministic held-out test split plus k cross-validation folds.

    With ``group_key`` set (e.g. "patient_id"), whole groups are assigned to
    one side of every boundary; the achieved test fraction is recorded and a
    warning note is added when oversized groups push it beyond twice the
    request. Without grouping, stratified splits keep per-class counts within
    one sample of the ideal quota.
    """
    if not (0.0 < test_frac < 1.0):
        raise SplitError("test_frac must be in (0, 1)")
    if k < 2:
        raise SplitError("k must be >= 2")
    if len(manifest) < k + 1:
        raise SplitError("manifest too small for requested folds")

    rng = np.random.default_rng(seed)
    all_ids = manifest.ids()
    notes: list[str] = []

    if group_key is not None:
        groups = _group_map(manifest, group_key)
        if groups is None:
            notes.append(f"group_key={group_key!r} absent from all entries; image-level fallback")
            group_key = None

    if group_key is None:
        test_ids, fold_vals = _split_ungrouped(manifest, all_ids, test_frac, k, rng, stratify_key)
    else:
        test_ids, fold_vals, group_notes = _split_grouped(
            manifest, groups, test_frac, k, rng, stratify_key
        )
        notes.extend(group_notes)

    pool = [i for i in all_ids if i not in set(test_ids)]
    pool_set = set(pool)
    folds = []
    for val in fold_vals:
        val_set = set(val)
        train = tuple(i for i in pool if i not in val_set)
        folds.append((train, tuple(val)))

    _check_fold_classes(manifest, folds, stratify_key, grouped=group_key is not None)

    plan = SplitPlan(
        test_ids=tuple(test_ids),
        folds=tuple(folds),
        seed=seed,
        group_key=group_key,
        stratify_key=stratify_key,
        notes=tuple(notes),
    )
    assert set(plan.train_val_pool()) == pool_set
    return plan


def _group_map(manifest: DatasetManifest, group_key: str) -> dict[str, list[str]] | None:
    values = [getattr(e, group_key, None) for e in manifest.entries]
    if all(v is None for v in values):
        return None
    missing = [e.id for e, v in zip(manifest.entries, values) if v is None]
    if missing:
        raise SplitError(f"entries missing group field {group_key!r}: {missing[:5]}")
    out: dict[str, list[str]] = {}
    for e, v in zip(manifest.entries, values):
        out.setdefault(str(v), []).append(e.id)
    return out


def _split_ungrouped(manifest, all_ids, test_frac, k, rng, stratify_key):
    strata = _strata(manifest, all_ids, stratify_key)
    keys = sorted(strata, key=str)
    counts = [len(strata[kk]) for kk in keys]
    total_test = int(round(test_frac * len(all_ids)))
    total_test = max(1, min(total_test, len(all_ids) - k))
    quotas = _largest_remainder_quotas(counts, test_frac, total_test)

    test_ids: list[str] = []
    remaining: dict = {}
    for kk, quota in zip(keys, quotas):
        ids = list(strata[kk])
        rng.shuffle(ids)
        test_ids.extend(ids[:quota])
        remaining[kk] = ids[quota:]
    fold_vals = _deal_folds(remaining, k, rng)
    return test_ids, fold_vals


def _split_grouped(manifest, groups, test_frac, k, rng, stratify_key):
    notes: list[str] = []
    n_total = len(manifest)
    target = test_frac * n_total

    names = sorted(groups)
    rng.shuffle(names)
    test_groups: list[str] = []
    count = 0
    for name in names:
        if count >= target:
            break
        test_groups.append(name)
        count += len(groups[name])
    achieved = count / n_total
    notes.append(f"grouped test fraction achieved={achieved:.4f} requested={test_frac:.4f}")
    if achieved > 2 * test_frac:
        warnings.warn(
            f"group sizes force test fraction {achieved:.3f} beyond twice the "
            f"requested {test_frac:.3f}"
        )
        notes.append("warning: oversized group exceeded 2x requested test fraction")

    test_ids = [i for g in test_groups for i in groups[g]]
    rest = [g for g in names if g not in set(test_groups)]

    # deal groups into fold buckets, stratified by the group's majority class
    # when a stratify key is given, always balancing bucket image counts
    by_id = manifest.by_id()

    def group_label(g: str):
        if stratify_key is None:
            return "__all__"
        vals = [
            int(by_id[i].labels[stratify_key].y)
            for i in groups[g]
            if stratify_key in by_id[i].labels and by_id[i].labels[stratify_key].m == 0
        ]
        if not vals:
            return "__masked__"
        counts = np.bincount(vals)
        return int(counts.argmax())

    by_label: dict = {}
    for g in rest:
        by_label.setdefault(group_label(g), []).append(g)

    buckets: list[list[str]] = [[] for _ in range(k)]
    sizes = [0] * k
    for label in sorted(by_label, key=str):
        for g in sorted(by_label[label], key=lambda x: -len(groups[x])):
            j = int(np.argmin(sizes))
            buckets[j].extend(groups[g])
            sizes[j] += len(groups[g])
    return test_ids, buckets, notes


def _check_fold_classes(manifest, folds, stratify_key, grouped):
    if stratify_key is None:
        return
    decl = manifest.tasks.get(stratify_key)
    if decl is None or decl.kind == "regression":
        return
    by_id = manifest.by_id()

    def classes_of(ids):
        return {
            int(by_id[i].labels[stratify_key].y)
            for i in ids
            if stratify_key in by_id[i].labels and by_id[i].labels[stratify_key].m == 0
        }

    pool_classes = classes_of([i for train, val in folds for i in (*train, *val)])
    for fi, (train, _val) in enumerate(folds):
        missing = pool_classes - classes_of(train)
        if missing:
            msg = f"fold {fi}: classes {sorted(missing)} empty after split"
            if grouped:
                warnings.warn(msg)
            else:
                raise SplitError(msg)


def subsample_training(
    manifest: DatasetManifest,
    plan: SplitPlan,
    fraction: float,
    seed: int,
) -> SplitPlan:
    """Reduce the training pool to ceil(fraction * N) stratified samples.

    The samples left out of the reduced pool become the plan's held-out test
    set (the per-fraction protocol used for label-efficiency sweeps), and the
    folds are rebuilt within the reduced pool. ``fraction=1.0`` returns the
    plan unchanged apart from a provenance note.
    """
    if not (0.0 < fraction <= 1.0):
        raise SplitError("fraction must be in (0, 1]")
    if fraction == 1.0:
        return replace(plan, notes=(*plan.notes, f"subsample fraction=1.0 seed={seed}: unchanged"))

    pool = list(plan.train_val_pool())
    n_target = int(math.ceil(fraction * len(pool)))
    rng = np.random.default_rng(seed)

    strata = _strata(manifest, pool, plan.stratify_key)
    keys = sorted(strata, key=str)
    counts = [len(strata[kk]) for kk in keys]
    quotas = _largest_remainder_quotas(counts, fraction, n_target)
    for kk, quota in zip(keys, quotas):
        if quota == 0 and isinstance(kk, int):
            raise SplitError(f"fraction {fraction} yields zero samples for class {kk!r}")

    sampled: list[str] = []
    for kk, quota in zip(keys, quotas):
        ids = list(strata[kk])
        rng.shuffle(ids)
        sampled.extend(ids[:quota])
    sampled_set = set(sampled)
    held_out = tuple(i for i in pool if i not in sampled_set)

    k = len(plan.folds)
    sampled_strata = _strata(manifest, [i for i in pool if i in sampled_set], plan.stratify_key)
    fold_vals = _deal_folds(sampled_strata, k, rng)
    ordered = [i for i in pool if i in sampled_set]
    folds = []
    for val in fold_vals:
        val_set = set(val)
        folds.append((tuple(i for i in ordered if i not in val_set), tuple(val)))

    return SplitPlan(
        test_ids=held_out,
        folds=tuple(folds),
        seed=plan.seed,
        group_key=plan.group_key,
        stratify_key=plan.stratify_key,
        notes=(
            *plan.notes,
            f"subsample fraction={fraction} seed={seed} n={len(sampled)} of {len(pool)}",
            "held-out test set = unsampled remainder of the training pool",
        ),
    )


# ---------------------------------------------------------------------------
# Image ingestion
# ---------------------------------------------------------------------------

def ingest_image(path, target_size: tuple[int, int] | None, channels: int = 3) -> ImageSample:
    """Read an 8- or 16-bit raster, resize bilinearly, and scale to [0, 1].

    ``target_size=None`` keeps the native resolution. Single-channel inputs
    are replicated to ``channels``. Values are scaled by the source bit depth
    (255 or 65535), so a constant image stays constant after resizing.
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            return pixels_from_pil(img, target_size, channels, sample_id=path.stem)
    except ManifestError:
        raise
    except Exception as exc:
        raise ManifestError(f"unreadable image {path}: {exc}") from exc


def pixels_from_pil(img: Image.Image, target_size, channels: int = 3, sample_id: str = "upload") -> ImageSample:
    """Decode an open PIL image into an ImageSample (shared by file and upload paths)."""
    mode = img.mode
    arr = np.asarray(img)
    if arr.size == 0:
        raise ManifestError(f"zero-area image {sample_id!r}")

    arr = arr.astype(np.float64)
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[:, :, :3]
    if mode in ("I;16", "I;16B", "I;16L", "I") or (arr.max() > 255):
        arr = arr / 65535.0
    elif mode == "F":
        arr = np.clip(arr, 0.0, 1.0)
    else:
        arr = arr / 255.0

    if arr.ndim == 2:
        planes = [arr]
    else:
        planes = [arr[:, :, c] for c in range(arr.shape[2])]
    if target_size is not None:
        h, w = target_size
        planes = [
            np.asarray(Image.fromarray(p.astype(np.float32)).resize((w, h), Image.BILINEAR))
            for p in planes
        ]
    out = np.stack(planes, axis=2).astype(np.float32)
    out = np.clip(out, 0.0, 1.0)
    if out.shape[2] == 1 and channels > 1:
        out = np.repeat(out, channels, axis=2)
    elif out.shape[2] != channels:
        out = out[:, :, :channels]
    return ImageSample(id=sample_id, pixels=out)


def load_sample(manifest: DatasetManifest, entry: ManifestEntry, target_size, channels: int = 3) -> ImageSample:
    """Ingest one manifest entry, attaching its identifiers and labels."""
    sample = ingest_image(manifest.resolve_path(entry), target_size, channels)
    sample.id = entry.id
    sample.patient_id = entry.patient_id
    sample.body_part = entry.body_part
    sample.labels = dict(entry.labels)
    return sample
