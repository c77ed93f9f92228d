"""Shared label space for the five-head region classifier.

All five heads live in one shared 38-logit output vector partitioned into
contiguous groups: abnormality (1, sigmoid), tumor subtype (4, softmax),
anatomical location (29, softmax), fracture category (3, softmax), and
implant presence (1, sigmoid).
"""

from __future__ import annotations

from dataclasses import dataclass

TUMOR_SUBTYPE_CLASSES = ("malignant", "intermediate", "benign", "normal")
FRACTURE_CLASSES = ("neoplastic_pathologic_fracture", "non_neoplastic_fracture", "normal")

LOCATION_CLASSES = (
    "distal_femur",
    "proximal_femur",
    "proximal_tibia",
    "proximal_fibula",
    "patella",
    "pelvis",
    "femur_diaphysis",
    "metacarpal",
    "metatarsal",
    "proximal_humerus",
    "clavicle",
    "distal_tibia",
    "finger_phalanges",
    "hindfoot",
    "distal_fibula",
    "proximal_radius",
    "distal_humerus",
    "scapula",
    "tibia_diaphysis",
    "proximal_ulna",
    "fibula_diaphysis",
    "humerus_diaphysis",
    "toe_phalanges",
    "distal_radius",
    "midfoot",
    "carpal_bones",
    "distal_ulna",
    "radius_diaphysis",
    "ulna_diaphysis",
)

TUMOR_NORMAL_INDEX = TUMOR_SUBTYPE_CLASSES.index("normal")
FRACTURE_NORMAL_INDEX = FRACTURE_CLASSES.index("normal")
MALIGNANT_INDEX = TUMOR_SUBTYPE_CLASSES.index("malignant")

# task ids used in manifests for the five heads
HEAD_TASK_IDS = ("abnormality", "tumor_subtype", "location", "fracture", "implant")


@dataclass(frozen=True)
class HeadGroup:
    """One contiguous logit group of the shared output vector."""

    name: str
    size: int
    activation: str  # "sigmoid" | "softmax"
    offset: int
    class_names: tuple[str, ...] = ()

    @property
    def stop(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class HeadLayout:
    """Ordered, non-overlapping head groups covering one logit vector."""

    groups: tuple[HeadGroup, ...]

    def __post_init__(self):
        expected = 0
        for g in self.groups:
            if g.offset != expected:
                raise ValueError(f"head {g.name!r}: offset {g.offset} != expected {expected}")
            if g.activation not in ("sigmoid", "softmax"):
                raise ValueError(f"head {g.name!r}: unknown activation {g.activation!r}")
            if g.activation == "sigmoid" and g.size != 1:
                raise ValueError(f"sigmoid head {g.name!r} must have size 1")
            expected = g.stop

    @property
    def total(self) -> int:
        return self.groups[-1].stop

    def group(self, name: str) -> HeadGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def logit_slice(self, name: str) -> slice:
        g = self.group(name)
        return slice(g.offset, g.stop)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(g.name for g in self.groups)


def default_head_layout() -> HeadLayout:
    """The 38-logit layout: 1 + 4 + 29 + 3 + 1."""
    specs = (
        ("abnormality", 1, "sigmoid", ("normal", "abnormal")),
        ("tumor_subtype", 4, "softmax", TUMOR_SUBTYPE_CLASSES),
        ("location", 29, "softmax", LOCATION_CLASSES),
        ("fracture", 3, "softmax", FRACTURE_CLASSES),
        ("implant", 1, "sigmoid", ("absent", "present")),
    )
    groups = []
    offset = 0
    for name, size, act, classes in specs:
        groups.append(HeadGroup(name=name, size=size, activation=act, offset=offset, class_names=classes))
        offset += size
    return HeadLayout(groups=tuple(groups))


DEFAULT_HEAD_LAYOUT = default_head_layout()
