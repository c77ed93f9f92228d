"""Synthetic corpus generator: determinism, anomaly locality, label wiring."""

import json
from collections import Counter

import numpy as np
import pytest

from mskbench import synthgen as sg
from mskbench.datamodel import LabeledTarget
from mskbench.heads import FRACTURE_NORMAL_INDEX, TUMOR_NORMAL_INDEX, TUMOR_SUBTYPE_CLASSES


def test_generate_normal_deterministic():
    a = sg.generate_normal(0, (64, 64))
    b = sg.generate_normal(0, (64, 64))
    assert np.array_equal(a.pixels, b.pixels)


def test_generate_normal_seed_sensitive():
    a = sg.generate_normal(0, (64, 64))
    b = sg.generate_normal(1, (64, 64))
    assert not np.array_equal(a.pixels, b.pixels)


def test_generate_normal_background_fraction():
    # regression bound frozen from measuring the generator over many seeds
    fractions = [
        float((sg.generate_normal(seed, (64, 64)).pixels < 0.05).mean()) for seed in range(50)
    ]
    assert min(fractions) >= 0.30


def test_generate_normal_rejects_tiny_size():
    with pytest.raises(sg.SynthError):
        sg.generate_normal(0, (16, 16))


def test_inject_changes_only_inside_mask():
    base = sg.generate_normal(3, (64, 64))
    spec = sg.AnomalySpec("tumor_blob", center=(32, 32), scale=6, intensity_delta=0.3)
    out, mask = sg.inject_anomaly(base, spec, seed=5)
    changed = (out.pixels != base.pixels).any(axis=2)
    assert not (changed & ~mask).any()
    assert changed.any()


def test_inject_zero_delta_identity_with_mask():
    base = sg.generate_normal(3, (64, 64))
    spec = sg.AnomalySpec("tumor_blob", center=(32, 32), scale=6, intensity_delta=0.0)
    out, mask = sg.inject_anomaly(base, spec, seed=5)
    assert np.array_equal(out.pixels, base.pixels)
    assert mask.sum() > 0


def test_fracture_gap_darkens():
    base = sg.generate_normal(4, (64, 64))
    spec = sg.AnomalySpec("fracture_gap", center=(32, 32), scale=5, intensity_delta=-0.6)
    out, mask = sg.inject_anomaly(base, spec, seed=1)
    assert out.pixels[mask].mean() < base.pixels[mask].mean()


def test_implant_bar_brightens():
    base = sg.generate_normal(4, (64, 64))
    spec = sg.AnomalySpec("implant_bar", center=(32, 32), scale=4, intensity_delta=0.55)
    out, mask = sg.inject_anomaly(base, spec, seed=1)
    assert out.pixels[mask].mean() > base.pixels[mask].mean()


def test_inject_off_bone_rejected():
    base = sg.generate_normal(5, (64, 64))
    spec = sg.AnomalySpec("tumor_blob", center=(4, 4), scale=3, intensity_delta=0.3)
    with pytest.raises(sg.SynthError, match="off-bone|interior"):
        sg.inject_anomaly(base, spec, seed=0)


def test_inject_label_updates_per_kind():
    base = sg.generate_normal(6, (64, 64))
    base.labels = {"abnormality": LabeledTarget(0)}
    spec = sg.AnomalySpec("tumor_blob", center=(32, 32), scale=6, intensity_delta=-0.3, variant="malignant")
    out, _ = sg.inject_anomaly(base, spec, seed=0)
    assert out.labels["abnormality"].y == 1
    assert out.labels["tumor_subtype"].y == TUMOR_SUBTYPE_CLASSES.index("malignant")
    assert out.labels["tumor_subtype"].m == 0
    assert out.labels["fracture"].m == 1
    assert out.labels["implant"].m == 1


def test_corpus_counts_and_determinism(tmp_path):
    spec = sg.CorpusSpec(n_normal=20, n_abnormal=20, size=(64, 64), seed=3)
    m1 = sg.build_corpus(spec, tmp_path / "one")
    m2 = sg.build_corpus(spec, tmp_path / "two")
    assert len(m1) == 40
    positives = sum(1 for e in m1.entries if e.labels["abnormality"].y == 1)
    assert positives == 20
    doc1 = (tmp_path / "one" / "manifest.json").read_text()
    doc2 = (tmp_path / "two" / "manifest.json").read_text()
    assert doc1 == doc2
    img1 = (tmp_path / "one" / "images" / "a00000.png").read_bytes()
    img2 = (tmp_path / "two" / "images" / "a00000.png").read_bytes()
    assert img1 == img2


def test_corpus_pure_tumor_mix_masks_fracture(tmp_path):
    spec = sg.CorpusSpec(
        n_normal=5, n_abnormal=12, size=(64, 64), seed=4, anomaly_mix={"tumor_blob": 1.0}
    )
    manifest = sg.build_corpus(spec, tmp_path)
    abnormal = [e for e in manifest.entries if e.id.startswith("a")]
    assert len(abnormal) == 12
    for e in abnormal:
        assert e.labels["tumor_subtype"].m == 0
        assert e.labels["tumor_subtype"].y != TUMOR_NORMAL_INDEX
        assert e.labels["fracture"].m == 1
    # fixed 10% intermediate share populates all four subtype classes over a larger draw
    variants = Counter(int(e.labels["tumor_subtype"].y) for e in abnormal)
    assert set(variants) <= {0, 1, 2}


def test_corpus_normal_labels_fully_observed(tmp_path):
    spec = sg.CorpusSpec(n_normal=6, n_abnormal=0, size=(64, 64), seed=5)
    manifest = sg.build_corpus(spec, tmp_path)
    for e in manifest.entries:
        assert e.labels["abnormality"].y == 0
        assert e.labels["tumor_subtype"].y == TUMOR_NORMAL_INDEX
        assert e.labels["fracture"].y == FRACTURE_NORMAL_INDEX
        assert e.labels["implant"].y == 0
        assert all(t.m == 0 for t in e.labels.values())


def test_corpus_patients_own_one_to_four(small_corpus):
    sizes = Counter(e.patient_id for e in small_corpus.entries)
    assert all(1 <= n <= 4 for n in sizes.values())
    assert len(sizes) > 10


def test_corpus_regions_stored(small_corpus):
    for e in small_corpus.entries:
        assert len(e.regions) == 1
        x, y, w, h = e.regions[0]["box"]
        assert w > 8 and h > 8
        assert 0 <= x and 0 <= y and x + w <= 64 and y + h <= 64
        assert 0 <= e.regions[0]["location"] < 29


def test_anomaly_masks_avoid_borders():
    spec = sg.CorpusSpec(n_normal=0, n_abnormal=30, size=(64, 64), seed=8)
    variants = [
        ("tumor_blob", "benign"),
        ("tumor_blob", "malignant"),
        ("tumor_blob", "intermediate"),
        ("fracture_gap", "simple"),
        ("fracture_gap", "neoplastic"),
        ("implant_bar", None),
    ]
    for k, (kind, variant) in enumerate(variants * 5):
        _sample, _geom, mask = sg.render_corpus_image(spec, f"a{k:05d}", k % 8, (kind, variant))
        assert mask is not None and mask.any()
        assert not mask[0, :].any() and not mask[-1, :].any()
        assert not mask[:, 0].any() and not mask[:, -1].any()


def test_corpus_mix_proportions_validated():
    with pytest.raises(sg.SynthError, match="sum to 1"):
        sg.CorpusSpec(n_normal=1, n_abnormal=1, anomaly_mix={"tumor_blob": 0.7})
    with pytest.raises(sg.SynthError, match="unknown anomaly"):
        sg.CorpusSpec(n_normal=1, n_abnormal=1, anomaly_mix={"blob": 1.0})


def test_derive_seed_stable():
    assert sg.derive_seed(3, "img1") == sg.derive_seed(3, "img1")
    assert sg.derive_seed(3, "img1") != sg.derive_seed(3, "img2")
    assert sg.derive_seed(3, "img1") != sg.derive_seed(4, "img1")
