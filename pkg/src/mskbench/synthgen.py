"""Procedural radiograph-like corpus so every pipeline stage runs without clinical data.

Each image shows one elongated high-intensity bone "shaft" with brighter
cortical borders on a near-black background. Shaft orientation and caliber
are keyed to a synthetic anatomical-location class, so the location head has
a learnable visual signal inside a region crop. Injectable anomalies map
one-to-one onto the classifier heads:

    tumor_blob   -> tumor subtype head (bright benign blob, dark ragged
                    malignant blob, or ring-shaped intermediate lesion)
    fracture_gap -> fracture head (dark transverse band; the neoplastic
                    variant adds a lytic halo)
    implant_bar  -> implant head (near-saturated bar along the shaft)

Generation is deterministic: every image is rendered from a seed derived by
hashing the corpus seed with the image id, so corpora are reproducible and
images can be rendered in parallel.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .datamodel import (
    DatasetManifest,
    ImageSample,
    LabeledTarget,
    ManifestEntry,
    TaskDecl,
    load_manifest,
    save_manifest,
)
from .heads import (
    FRACTURE_CLASSES,
    FRACTURE_NORMAL_INDEX,
    LOCATION_CLASSES,
    TUMOR_NORMAL_INDEX,
    TUMOR_SUBTYPE_CLASSES,
)

ANOMALY_KINDS = ("tumor_blob", "fracture_gap", "implant_bar")

# rendering constants
BACKGROUND = 0.012
MEDULLARY = 0.50
CORTEX = 0.88
BONE_THRESHOLD = 0.25  # pixels above this count as shaft when placing anomalies
EDGE_SOFTNESS = 1.2


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class AnomalySpec:
    """Placement and strength of one injectable anomaly.

    ``variant`` picks the sub-appearance: tumor_blob accepts "benign",
    "malignant", or "intermediate"; fracture_gap accepts "simple" or
    "neoplastic".
    """

    kind: str
    center: tuple[int, int]  # (row, col)
    scale: float  # pixels
    intensity_delta: float
    variant: str | None = None

    def __post_init__(self):
        if self.kind not in ANOMALY_KINDS:
            raise SynthError(f"unknown anomaly kind {self.kind!r}")
        if self.scale <= 0:
            raise SynthError("scale must be positive")


@dataclass(frozen=True)
class CorpusSpec:
    """Recipe for a synthetic corpus."""

    n_normal: int
    n_abnormal: int
    size: tuple[int, int] = (64, 64)
    seed: int = 0
    anomaly_mix: dict = field(
        default_factory=lambda: {"tumor_blob": 1 / 3, "fracture_gap": 1 / 3, "implant_bar": 1 / 3}
    )
    n_locations: int = 8
    channels: int = 1

    def __post_init__(self):
        if self.n_normal < 0 or self.n_abnormal < 0:
            raise SynthError("counts must be >= 0")
        if min(self.size) < 32:
            raise SynthError("size must be at least 32 x 32")
        if abs(sum(self.anomaly_mix.values()) - 1.0) > 1e-9:
            raise SynthError("anomaly mix proportions must sum to 1")
        for kind in self.anomaly_mix:
            if kind not in ANOMALY_KINDS:
                raise SynthError(f"unknown anomaly kind {kind!r} in mix")
        if not (1 <= self.n_locations <= len(LOCATION_CLASSES)):
            raise SynthError(f"n_locations must be in [1, {len(LOCATION_CLASSES)}]")


@dataclass(frozen=True)
class ShaftGeometry:
    """Axis and caliber of the rendered shaft, for anomaly placement and boxes."""

    p0: tuple[float, float]
    p1: tuple[float, float]
    radius: float
    angle: float

    @property
    def center(self) -> tuple[float, float]:
        return ((self.p0[0] + self.p1[0]) / 2, (self.p0[1] + self.p1[1]) / 2)

    @property
    def axis(self) -> tuple[float, float]:
        di = self.p1[0] - self.p0[0]
        dj = self.p1[1] - self.p0[1]
        n = math.hypot(di, dj)
        return (di / n, dj / n)


def derive_seed(corpus_seed: int, image_id: str) -> int:
    """Stable per-image seed: hash of (corpus seed, id)."""
    digest = hashlib.blake2b(f"{corpus_seed}:{image_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def _smoothstep(x: np.ndarray) -> np.ndarray:
    t = np.clip(x, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _segment_distance(size, p0, p1) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel distance to the segment p0-p1 and projection along it (in [0,1])."""
    h, w = size
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    di, dj = p1[0] - p0[0], p1[1] - p0[1]
    length_sq = di * di + dj * dj
    t = ((ii - p0[0]) * di + (jj - p0[1]) * dj) / length_sq
    tc = np.clip(t, 0.0, 1.0)
    nearest_i = p0[0] + tc * di
    nearest_j = p0[1] + tc * dj
    dist = np.hypot(ii - nearest_i, jj - nearest_j)
    return dist, t


def _render_shaft(rng: np.random.Generator, size, angle=None, radius_frac=None):
    """Render one normal bone image; returns (pixels H x W, geometry)."""
    h, w = size
    scale = min(h, w)
    if angle is None:
        angle = rng.uniform(0.0, math.pi)
    if radius_frac is None:
        radius_frac = rng.uniform(0.085, 0.125)
    radius = radius_frac * scale
    half_len = rng.uniform(0.30, 0.36) * scale
    ci = h / 2 + rng.uniform(-0.03, 0.03) * h
    cj = w / 2 + rng.uniform(-0.03, 0.03) * w
    di, dj = math.sin(angle), math.cos(angle)
    p0 = (ci - half_len * di, cj - half_len * dj)
    p1 = (ci + half_len * di, cj + half_len * dj)

    dist, t_axis = _segment_distance((h, w), p0, p1)
    cortex_width = max(1.5, radius * 0.30)

    outer = _smoothstep((radius - dist) / EDGE_SOFTNESS)
    inner = _smoothstep((radius - cortex_width - dist) / EDGE_SOFTNESS)

    # faint longitudinal trabecular ripple inside the medullary canal
    ripple = 0.04 * np.sin(t_axis * rng.uniform(6.0, 9.0) * math.pi + rng.uniform(0, 2 * math.pi))
    med = MEDULLARY + ripple

    img = BACKGROUND + outer * (CORTEX - BACKGROUND) + inner * (med - CORTEX)
    img += rng.normal(0.0, 0.015, size=(h, w))
    img = np.clip(img, 0.0, 1.0)
    return img, ShaftGeometry(p0=p0, p1=p1, radius=radius, angle=angle)


def generate_normal(seed: int, size: tuple[int, int]) -> ImageSample:
    """Deterministic normal bone image for the given seed."""
    if min(size) < 32:
        raise SynthError("size must be at least 32 x 32")
    rng = np.random.default_rng(seed)
    img, _ = _render_shaft(rng, size)
    return ImageSample(id=f"normal-{seed}", pixels=img[:, :, None].astype(np.float64))


def _estimate_axis(pixels: np.ndarray) -> tuple[np.ndarray, tuple[float, float]]:
    """Principal axis of the bright (bone) pixels: (unit axis vector, centroid)."""
    plane = pixels[:, :, 0] if pixels.ndim == 3 else pixels
    mask = plane > BONE_THRESHOLD
    if not mask.any():
        raise SynthError("no bone pixels found")
    ii, jj = np.nonzero(mask)
    pts = np.stack([ii, jj], axis=1).astype(np.float64)
    centroid = pts.mean(axis=0)
    cov = np.cov((pts - centroid).T)
    eigvals, eigvecs = np.linalg.eigh(cov)
    axis = eigvecs[:, int(np.argmax(eigvals))]
    return axis, (float(centroid[0]), float(centroid[1]))


def _anomaly_footprint(shape, spec: AnomalySpec, axis) -> np.ndarray:
    h, w = shape
    ci, cj = spec.center
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    rel_i, rel_j = ii - ci, jj - cj
    along = rel_i * axis[0] + rel_j * axis[1]
    across = -rel_i * axis[1] + rel_j * axis[0]

    if spec.kind == "tumor_blob":
        return np.hypot(rel_i, rel_j) <= spec.scale
    if spec.kind == "fracture_gap":
        band = (np.abs(along) <= spec.scale * 0.5) & (np.abs(across) <= spec.scale * 2.2)
        if spec.variant == "neoplastic":
            band |= np.hypot(rel_i, rel_j) <= spec.scale * 1.2
        return band
    # implant_bar
    return (np.abs(along) <= spec.scale * 2.2) & (np.abs(across) <= spec.scale * 0.45)


def _anomaly_profile(shape, spec: AnomalySpec, axis, rng: np.random.Generator) -> np.ndarray:
    """Signed, in-[0,1] modulation profile; intensity change = delta * profile."""
    h, w = shape
    ci, cj = spec.center
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    rel_i, rel_j = ii - ci, jj - cj
    radial = np.hypot(rel_i, rel_j)
    along = rel_i * axis[0] + rel_j * axis[1]
    across = -rel_i * axis[1] + rel_j * axis[0]

    if spec.kind == "tumor_blob":
        bump = _smoothstep((spec.scale - radial) / max(1.0, spec.scale * 0.45))
        if spec.variant == "malignant":
            # ragged, moth-eaten margin
            rough = 0.6 + 0.4 * rng.random((h, w))
            return bump * rough
        if spec.variant == "intermediate":
            rim = _smoothstep(1.0 - np.abs(radial - 0.8 * spec.scale) / (0.25 * spec.scale))
            core = _smoothstep((0.5 * spec.scale - radial) / (0.25 * spec.scale))
            return np.clip(rim - 1.4 * core, -1.5, 1.0)
        return bump
    if spec.kind == "fracture_gap":
        band = _smoothstep((spec.scale * 0.5 - np.abs(along)) / 1.0)
        extent = _smoothstep((spec.scale * 2.2 - np.abs(across)) / 1.5)
        profile = band * extent
        if spec.variant == "neoplastic":
            halo = _smoothstep((spec.scale * 1.2 - radial) / (0.3 * spec.scale))
            profile = np.maximum(profile, halo)
        return profile
    # implant_bar: crisp rectangle with slightly soft ends
    bar = _smoothstep((spec.scale * 2.2 - np.abs(along)) / 1.5) * _smoothstep(
        (spec.scale * 0.45 - np.abs(across)) / 0.8
    )
    return bar


def inject_anomaly(
    image: ImageSample, spec: AnomalySpec, seed: int
) -> tuple[ImageSample, np.ndarray]:
    """Inject one anomaly; returns the modified sample and its footprint mask.

    The image is only modified inside the returned mask. Labels are updated:
    the anomaly's own head goes positive, abnormality goes positive, and the
    other two abnormality heads are masked as unknown (mirroring datasets
    with incomplete label coverage).
    """
    pixels = image.pixels
    h, w, c = pixels.shape
    footprint_axis, _ = _estimate_axis(pixels)
    fp = _anomaly_footprint((h, w), spec, footprint_axis)

    ii, jj = np.nonzero(fp)
    if ii.size == 0:
        raise SynthError("anomaly footprint is empty")
    if ii.min() < 1 or jj.min() < 1 or ii.max() > h - 2 or jj.max() > w - 2:
        raise SynthError("anomaly footprint outside image interior")
    bone = pixels[:, :, 0] > BONE_THRESHOLD
    overlap = float(bone[fp].mean())
    if overlap < 0.25:
        raise SynthError("anomaly off-bone: footprint does not overlap the shaft")

    rng = np.random.default_rng(seed)
    profile = _anomaly_profile((h, w), spec, footprint_axis, rng)
    change = spec.intensity_delta * profile
    change[~fp] = 0.0

    out = pixels.astype(np.float64).copy()
    out += change[:, :, None]
    out = np.clip(out, 0.0, 1.0)

    labels = dict(image.labels)
    labels["abnormality"] = LabeledTarget(y=1)
    if spec.kind == "tumor_blob":
        variant = spec.variant or "benign"
        labels["tumor_subtype"] = LabeledTarget(y=TUMOR_SUBTYPE_CLASSES.index(variant))
        labels["fracture"] = LabeledTarget(y=FRACTURE_NORMAL_INDEX, m=1)
        labels["implant"] = LabeledTarget(y=0, m=1)
    elif spec.kind == "fracture_gap":
        idx = 0 if spec.variant == "neoplastic" else 1
        labels["fracture"] = LabeledTarget(y=idx)
        labels["tumor_subtype"] = LabeledTarget(y=TUMOR_NORMAL_INDEX, m=1)
        labels["implant"] = LabeledTarget(y=0, m=1)
    else:
        labels["implant"] = LabeledTarget(y=1)
        labels["tumor_subtype"] = LabeledTarget(y=TUMOR_NORMAL_INDEX, m=1)
        labels["fracture"] = LabeledTarget(y=FRACTURE_NORMAL_INDEX, m=1)

    sample = ImageSample(
        id=image.id,
        pixels=out,
        patient_id=image.patient_id,
        body_part=image.body_part,
        labels=labels,
    )
    return sample, fp


# ---------------------------------------------------------------------------
# Corpus assembly
# ---------------------------------------------------------------------------

def _quota_counts(total: int, proportions: list[float]) -> list[int]:
    exact = [p * total for p in proportions]
    counts = [int(math.floor(x)) for x in exact]
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - math.floor(exact[i])), i))
    i = 0
    while sum(counts) < total:
        counts[order[i % len(order)]] += 1
        i += 1
    return counts


def _location_angle(location: int, n_locations: int, u: float) -> float:
    """Angle bin for a location class, with jitter kept inside the bin."""
    bin_width = math.pi / n_locations
    return (location + 0.2 + 0.6 * u) * bin_width


def _location_radius_frac(location: int) -> float:
    return 0.085 + 0.045 * ((location % 4) / 3.0)


def _shaft_box(geom: ShaftGeometry, shape, margin: float = 2.0) -> tuple[int, int, int, int]:
    """Square pixel box (x, y, w, h) around the shaft, clipped to the image."""
    h, w = shape
    i_lo = min(geom.p0[0], geom.p1[0]) - geom.radius - margin
    i_hi = max(geom.p0[0], geom.p1[0]) + geom.radius + margin
    j_lo = min(geom.p0[1], geom.p1[1]) - geom.radius - margin
    j_hi = max(geom.p0[1], geom.p1[1]) + geom.radius + margin
    side = max(i_hi - i_lo, j_hi - j_lo)
    ci, cj = (i_lo + i_hi) / 2, (j_lo + j_hi) / 2
    i0 = max(0, int(round(ci - side / 2)))
    j0 = max(0, int(round(cj - side / 2)))
    i1 = min(h, int(round(ci + side / 2)))
    j1 = min(w, int(round(cj + side / 2)))
    return (j0, i0, j1 - j0, i1 - i0)


def _normal_labels(location: int) -> dict[str, LabeledTarget]:
    return {
        "abnormality": LabeledTarget(y=0),
        "tumor_subtype": LabeledTarget(y=TUMOR_NORMAL_INDEX),
        "location": LabeledTarget(y=location),
        "fracture": LabeledTarget(y=FRACTURE_NORMAL_INDEX),
        "implant": LabeledTarget(y=0),
    }


def corpus_tasks() -> dict[str, TaskDecl]:
    return {
        "abnormality": TaskDecl("abnormality", "binary", class_names=("normal", "abnormal")),
        "tumor_subtype": TaskDecl(
            "tumor_subtype", "multiclass", len(TUMOR_SUBTYPE_CLASSES), TUMOR_SUBTYPE_CLASSES
        ),
        "location": TaskDecl("location", "multiclass", len(LOCATION_CLASSES), LOCATION_CLASSES),
        "fracture": TaskDecl("fracture", "multiclass", len(FRACTURE_CLASSES), FRACTURE_CLASSES),
        "implant": TaskDecl("implant", "binary", class_names=("absent", "present")),
    }


def _plan_anomalies(spec: CorpusSpec, rng: np.random.Generator) -> list[tuple[str, str | None]]:
    """(kind, variant) for each abnormal image, in deterministic order."""
    kinds = sorted(spec.anomaly_mix)
    counts = _quota_counts(spec.n_abnormal, [spec.anomaly_mix[k] for k in kinds])
    plan: list[tuple[str, str | None]] = []
    for kind, count in zip(kinds, counts):
        if kind == "tumor_blob":
            # fixed 10% intermediate so all four subtype classes appear
            n_inter = int(round(0.10 * count))
            n_benign = (count - n_inter + 1) // 2
            n_malig = count - n_inter - n_benign
            plan += [("tumor_blob", "benign")] * n_benign
            plan += [("tumor_blob", "malignant")] * n_malig
            plan += [("tumor_blob", "intermediate")] * n_inter
        elif kind == "fracture_gap":
            n_neo = int(round(0.4 * count))
            plan += [("fracture_gap", "simple")] * (count - n_neo)
            plan += [("fracture_gap", "neoplastic")] * n_neo
        else:
            plan += [("implant_bar", None)] * count
    rng.shuffle(plan)
    return plan


def render_corpus_image(spec: CorpusSpec, image_id: str, location: int, anomaly: tuple | None):
    """Render one corpus image from its derived seed. Returns (sample, geometry, anomaly_mask)."""
    rng = np.random.default_rng(derive_seed(spec.seed, image_id))
    angle = _location_angle(location, spec.n_locations, rng.random())
    img, geom = _render_shaft(rng, spec.size, angle=angle, radius_frac=_location_radius_frac(location))
    pixels = img[:, :, None]
    if spec.channels > 1:
        pixels = np.repeat(pixels, spec.channels, axis=2)
    sample = ImageSample(id=image_id, pixels=pixels, labels=_normal_labels(location))
    sample.body_part = LOCATION_CLASSES[location]

    if anomaly is None:
        return sample, geom, None

    kind, variant = anomaly
    ci, cj = geom.center
    axis = geom.axis
    t = rng.uniform(-0.45, 0.45)
    half_len = math.hypot(geom.p1[0] - geom.p0[0], geom.p1[1] - geom.p0[1]) / 2
    center_i = ci + t * half_len * axis[0]
    center_j = cj + t * half_len * axis[1]

    if kind == "tumor_blob":
        scale = rng.uniform(0.8, 1.15) * geom.radius
        delta = rng.uniform(0.3, 0.38)
        if variant == "malignant":
            delta = -delta
        elif variant == "intermediate":
            delta = abs(delta)
    elif kind == "fracture_gap":
        scale = rng.uniform(0.7, 0.95) * geom.radius
        delta = -rng.uniform(0.6, 0.7)
    else:
        scale = rng.uniform(0.45, 0.6) * geom.radius
        delta = rng.uniform(0.5, 0.6)

    h, w = spec.size
    lim = scale * 2.4 + 3
    center_i = float(np.clip(center_i, lim, h - 1 - lim))
    center_j = float(np.clip(center_j, lim, w - 1 - lim))

    a_spec = AnomalySpec(
        kind=kind,
        center=(int(round(center_i)), int(round(center_j))),
        scale=float(scale),
        intensity_delta=float(delta),
        variant=variant,
    )
    out, mask = inject_anomaly(sample, a_spec, derive_seed(spec.seed, image_id + ":anomaly"))
    return out, geom, mask


def build_corpus(spec: CorpusSpec, out_dir) -> DatasetManifest:
    """Write the corpus (PNG images plus manifest.json) and return the manifest.

    Byte-identical output for identical specs. Synthetic patients own 1-4
    images each so grouped splitting has something to group.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    try:
        images_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SynthError(f"unwritable output directory {out_dir}: {exc}") from exc

    rng = np.random.default_rng(spec.seed)
    ids = [f"n{i:05d}" for i in range(spec.n_normal)] + [f"a{i:05d}" for i in range(spec.n_abnormal)]
    locations = {i: int(rng.integers(0, spec.n_locations)) for i in ids}
    anomalies = _plan_anomalies(spec, rng)

    # patients drawn over a shuffled copy so normals and abnormals mix
    order = list(ids)
    rng.shuffle(order)
    patient_of: dict[str, str] = {}
    p = 0
    cursor = 0
    while cursor < len(order):
        take = int(rng.integers(1, 5))
        for i in order[cursor : cursor + take]:
            patient_of[i] = f"p{p:04d}"
        cursor += take
        p += 1

    entries: list[ManifestEntry] = []
    for idx, image_id in enumerate(ids):
        anomaly = anomalies[idx - spec.n_normal] if idx >= spec.n_normal else None
        sample, geom, _mask = render_corpus_image(spec, image_id, locations[image_id], anomaly)
        rel_path = f"images/{image_id}.png"
        arr8 = np.round(sample.pixels[:, :, 0] * 255.0).astype(np.uint8)
        Image.fromarray(arr8, mode="L").save(out_dir / rel_path)
        box = _shaft_box(geom, spec.size)
        entries.append(
            ManifestEntry(
                id=image_id,
                path=rel_path,
                patient_id=patient_of[image_id],
                body_part=sample.body_part,
                labels=sample.labels,
                regions=({"box": list(box), "location": locations[image_id]},),
            )
        )

    manifest = DatasetManifest(tasks=corpus_tasks(), entries=entries, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return load_manifest(out_dir / "manifest.json")
