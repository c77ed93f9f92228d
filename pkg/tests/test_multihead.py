"""Region proposal, IoR-constrained cropping, masked loss, aggregation."""

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from mskbench import multihead as mh
from mskbench import synthgen as sg
from mskbench.heads import DEFAULT_HEAD_LAYOUT, TUMOR_SUBTYPE_CLASSES
from mskbench.mae import MaeConfig


# ---------------------------------------------------------------------------
# Head layout
# ---------------------------------------------------------------------------

def test_layout_arities_and_offsets():
    layout = DEFAULT_HEAD_LAYOUT
    assert layout.total == 38
    assert [g.size for g in layout.groups] == [1, 4, 29, 3, 1]
    assert [g.name for g in layout.groups] == [
        "abnormality",
        "tumor_subtype",
        "location",
        "fracture",
        "implant",
    ]
    offsets = [g.offset for g in layout.groups]
    assert offsets == [0, 1, 5, 34, 37]
    assert layout.logit_slice("fracture") == slice(34, 37)
    assert len(layout.group("location").class_names) == 29


# ---------------------------------------------------------------------------
# Region proposal
# ---------------------------------------------------------------------------

def test_ground_truth_proposer_passthrough(small_corpus):
    from mskbench.datamodel import load_sample

    proposer = mh.ground_truth_proposer(small_corpus)
    entry = small_corpus.entries[0]
    sample = load_sample(small_corpus, entry, None, 1)
    boxes = mh.propose_regions(sample, proposer)
    assert len(boxes) == 1
    x, y, w, h = entry.regions[0]["box"]
    assert (boxes[0].x, boxes[0].y, boxes[0].w, boxes[0].h) == (x, y, w, h)
    assert boxes[0].location_class == entry.regions[0]["location"]


def test_empty_proposal_falls_back_to_whole_image():
    sample = sg.generate_normal(0, (64, 64))
    with pytest.warns(UserWarning, match="whole image"):
        boxes = mh.propose_regions(sample, lambda s: [])
    assert len(boxes) == 1
    assert (boxes[0].x, boxes[0].y, boxes[0].w, boxes[0].h) == (0, 0, 64, 64)


def test_failing_proposer_falls_back():
    sample = sg.generate_normal(0, (64, 64))

    def broken(s):
        raise RuntimeError("detector crashed")

    with pytest.warns(UserWarning, match="failed"):
        boxes = mh.propose_regions(sample, broken)
    assert boxes == [mh.whole_image_box(sample.pixels.shape)]


def test_out_of_bounds_box_clipped():
    sample = sg.generate_normal(0, (64, 64))
    boxes = mh.propose_regions(sample, lambda s: [mh.RegionBox(-10, 50, 40, 40)])
    b = boxes[0]
    assert b.x >= 0 and b.y >= 0
    assert b.x + b.w <= 64 and b.y + b.h <= 64


def test_detection_json_adapter(tmp_path):
    import json

    doc = {
        "img0": [
            {"box": [4, 4, 20, 20], "class": "patella", "score": 0.9},
            {"box": [30, 30, 90, 90], "class": 3, "score": 0.7},
        ]
    }
    path = tmp_path / "detections.json"
    path.write_text(json.dumps(doc))
    proposer = mh.detection_json_proposer(path)
    sample = sg.generate_normal(1, (64, 64))
    sample.id = "img0"
    boxes = mh.propose_regions(sample, proposer)
    assert len(boxes) == 2
    assert boxes[0].location_class == 4  # patella index
    assert boxes[1].x + boxes[1].w <= 64  # clipped


# ---------------------------------------------------------------------------
# Region cropping
# ---------------------------------------------------------------------------

def test_tight_crop_deterministic():
    sample = sg.generate_normal(2, (64, 64))
    box = mh.RegionBox(10, 12, 30, 28)
    a = mh.crop_region(sample, box, augment=False, out_size=32)
    b = mh.crop_region(sample, box, augment=False, out_size=32)
    assert a.pixels.shape == (32, 32, 1)
    assert np.array_equal(a.pixels, b.pixels)


def test_crop_rejects_tiny_box():
    sample = sg.generate_normal(2, (64, 64))
    with pytest.raises(mh.RegionError, match="4 x 4"):
        mh.crop_region(sample, mh.RegionBox(10, 10, 3, 10))


def test_ior_floor_one_means_containment():
    box = mh.RegionBox(20, 20, 20, 20)
    rng = np.random.default_rng(0)
    for _ in range(50):
        window = mh._sample_ior_window(box, (64, 64), ior_floor=1.0, rng=rng)
        assert mh.intersection_over_region(window, box) == pytest.approx(1.0)
        assert window.x <= box.x and window.y <= box.y
        assert window.x + window.w >= box.x + box.w
        assert window.y + window.h >= box.y + box.h


def test_augmented_windows_satisfy_ior_floor():
    box = mh.RegionBox(16, 18, 26, 24)
    rng = np.random.default_rng(1)
    floor = 0.7
    for _ in range(1000):
        window = mh._sample_ior_window(box, (64, 64), ior_floor=floor, rng=rng)
        assert mh.intersection_over_region(window, box) >= floor


def test_augmented_crop_in_range_and_seeded():
    sample = sg.generate_normal(3, (64, 64))
    box = mh.RegionBox(12, 12, 36, 36)
    a = mh.crop_region(sample, box, augment=True, seed=5, out_size=32)
    b = mh.crop_region(sample, box, augment=True, seed=5, out_size=32)
    c = mh.crop_region(sample, box, augment=True, seed=6, out_size=32)
    assert np.array_equal(a.pixels, b.pixels)
    assert not np.array_equal(a.pixels, c.pixels)
    assert a.pixels.min() >= 0.0 and a.pixels.max() <= 1.0


# ---------------------------------------------------------------------------
# Masked multi-task loss
# ---------------------------------------------------------------------------

def make_targets(n, unmask=None, y_values=None):
    """All heads masked except those named in ``unmask``."""
    targets = {}
    for group in DEFAULT_HEAD_LAYOUT.groups:
        y = torch.zeros(n)
        m = torch.ones(n, dtype=torch.long)
        if unmask and group.name in unmask:
            m = torch.zeros(n, dtype=torch.long)
            if y_values and group.name in y_values:
                y = torch.as_tensor(y_values[group.name], dtype=torch.float)
        targets[group.name] = (y, m)
    return targets


def test_fully_masked_loss_zero_and_zero_grad():
    torch.manual_seed(0)
    model = mh.MultiHeadModel(MaeConfig.toy())
    imgs = torch.rand(3, 64, 64, 1)
    logits = model(imgs)
    loss = mh.masked_multitask_loss(logits, make_targets(3))
    assert float(loss) == 0.0
    loss.backward()
    for p in model.parameters():
        if p.grad is not None:
            assert float(p.grad.abs().max()) == 0.0


def test_bce_closed_form_ln2():
    logits = torch.zeros(1, 38)  # sigmoid -> 0.5 on the implant logit
    targets = make_targets(1, unmask={"implant"}, y_values={"implant": [1.0]})
    loss = mh.masked_multitask_loss(logits, targets)
    assert float(loss) == pytest.approx(math.log(2.0), rel=1e-6)


def test_half_masked_head_matches_scalar_reference():
    torch.manual_seed(1)
    n = 8
    logits = torch.randn(n, 38)
    y = torch.randint(0, 3, (n,)).float()
    m = torch.tensor([0, 1] * (n // 2))
    targets = make_targets(n)
    targets["fracture"] = (y, m)
    loss = float(mh.masked_multitask_loss(logits, targets))

    # independent per-sample scalar reference over the unmasked half only
    sl = DEFAULT_HEAD_LAYOUT.logit_slice("fracture")
    per_sample = []
    for i in range(n):
        if int(m[i]) == 1:
            continue
        z = logits[i, sl]
        log_probs = z - torch.logsumexp(z, dim=0)
        per_sample.append(-float(log_probs[int(y[i])]))
    assert loss == pytest.approx(float(np.mean(per_sample)), rel=1e-6)


def test_masked_head_gradient_isolation_exact():
    torch.manual_seed(2)
    model = mh.MultiHeadModel(MaeConfig.toy()).double()
    imgs = torch.rand(4, 64, 64, 1, dtype=torch.float64)
    logits = model(imgs)
    # fracture fully masked, tumor_subtype active
    targets = make_targets(4, unmask={"tumor_subtype"}, y_values={"tumor_subtype": [0, 1, 2, 3]})
    loss = mh.masked_multitask_loss(logits, targets)
    loss.backward()
    w_grad = model.shared_head.weight.grad
    b_grad = model.shared_head.bias.grad
    sl = DEFAULT_HEAD_LAYOUT.logit_slice("fracture")
    assert float(w_grad[sl].abs().max()) == 0.0
    assert float(b_grad[sl].abs().max()) == 0.0
    ts = DEFAULT_HEAD_LAYOUT.logit_slice("tumor_subtype")
    assert float(w_grad[ts].abs().max()) > 0.0


def test_masked_head_finite_difference_agreement():
    torch.manual_seed(3)
    model = mh.MultiHeadModel(MaeConfig.toy()).double()
    imgs = torch.rand(2, 64, 64, 1, dtype=torch.float64)
    targets = make_targets(2, unmask={"abnormality"}, y_values={"abnormality": [1.0, 0.0]})

    def loss_value():
        return mh.masked_multitask_loss(model(imgs), targets)

    loss = loss_value()
    loss.backward()
    eps = 1e-6
    bias = model.shared_head.bias
    checks = [(0, "abnormality, active"), (35, "fracture, masked")]
    for idx, _desc in checks:
        analytic = float(bias.grad[idx])
        with torch.no_grad():
            bias[idx] += eps
            up = float(loss_value())
            bias[idx] -= 2 * eps
            down = float(loss_value())
            bias[idx] += eps
        fd = (up - down) / (2 * eps)
        if abs(analytic) > 1e-10:
            assert abs(fd - analytic) / abs(analytic) < 1e-4
        else:
            assert abs(fd) < 1e-9


# ---------------------------------------------------------------------------
# Aggregation semantics
# ---------------------------------------------------------------------------

def region_pred(subtype, abnormality=0.5, fracture=(0.1, 0.1, 0.8), implant=0.2, box=None):
    subtype = np.asarray(subtype, dtype=float)
    location = np.full(29, 1 / 29)
    return mh.RegionPrediction(
        box=box or mh.RegionBox(0, 0, 10, 10),
        probabilities={
            "abnormality": abnormality,
            "tumor_subtype": subtype / subtype.sum(),
            "location": location,
            "fracture": np.asarray(fracture, dtype=float),
            "implant": implant,
        },
    )


def subtype_for(name, p=0.7):
    rest = (1 - p) / 3
    vec = [rest] * 4
    vec[TUMOR_SUBTYPE_CLASSES.index(name)] = p
    return vec


def test_any_region_tumor_triggers_positive():
    regions = [region_pred(subtype_for("normal")), region_pred(subtype_for("benign"))]
    out = mh.aggregate_image(regions)
    assert out.tumor_positive is True


def test_malignant_above_threshold():
    regions = [region_pred([0.6, 0.1, 0.2, 0.1])]  # P(malignant)=0.6, argmax malignant
    out = mh.aggregate_image(regions)
    assert out.tumor_positive and out.malignancy == "malignant"
    assert out.max_p_malignant == pytest.approx(0.6)


def test_all_normal_regions_negative():
    regions = [region_pred(subtype_for("normal")), region_pred(subtype_for("normal", 0.9))]
    out = mh.aggregate_image(regions)
    assert out.tumor_positive is False
    assert out.malignancy == "none"


def test_tumor_positive_but_low_malignant_is_benign():
    regions = [region_pred(subtype_for("benign", 0.8))]
    out = mh.aggregate_image(regions)
    assert out.tumor_positive and out.malignancy == "benign"


def test_aggregation_permutation_invariant():
    regions = [
        region_pred(subtype_for("benign"), implant=0.9),
        region_pred([0.55, 0.15, 0.15, 0.15]),
        region_pred(subtype_for("normal"), abnormality=0.9),
    ]
    a = mh.aggregate_image(regions)
    b = mh.aggregate_image(regions[::-1])
    assert (a.tumor_positive, a.malignancy, a.max_p_malignant) == (
        b.tumor_positive,
        b.malignancy,
        b.max_p_malignant,
    )
    assert (a.abnormality_positive, a.fracture_positive, a.implant_positive) == (
        b.abnormality_positive,
        b.fracture_positive,
        b.implant_positive,
    )


def test_aggregation_monotone_in_malignant_probability():
    rng = np.random.default_rng(4)
    for _ in range(50):
        vec = rng.dirichlet(np.ones(4))
        regions = [region_pred(vec)]
        base = mh.aggregate_image(regions)
        if base.malignancy != "malignant":
            continue
        # raise P(malignant), renormalizing the rest down
        raised = vec.copy()
        raised[0] = min(1.0, raised[0] + 0.2)
        rest = 1 - raised[0]
        raised[1:] = raised[1:] / raised[1:].sum() * rest
        after = mh.aggregate_image([region_pred(raised)])
        assert after.malignancy == "malignant"


def test_abnormality_threshold_trigger_mode():
    regions = [region_pred(subtype_for("normal"), abnormality=0.9)]
    default = mh.aggregate_image(regions)
    assert default.tumor_positive is False
    alt = mh.aggregate_image(regions, trigger="abnormality_threshold")
    assert alt.tumor_positive is True
    assert alt.thresholds["trigger"] == "abnormality_threshold"


def test_softmax_group_validation():
    bad = {
        "abnormality": 0.5,
        "tumor_subtype": np.array([0.5, 0.5, 0.5, 0.5]),
        "location": np.full(29, 1 / 29),
        "fracture": np.array([0.3, 0.3, 0.4]),
        "implant": 0.1,
    }
    with pytest.raises(mh.RegionError, match="sums to"):
        mh.RegionPrediction(box=mh.RegionBox(0, 0, 4, 4), probabilities=bad)


def test_aggregate_requires_regions():
    with pytest.raises(mh.RegionError):
        mh.aggregate_image([])


# ---------------------------------------------------------------------------
# Prediction path and masked metrics
# ---------------------------------------------------------------------------

def test_predict_regions_valid_probabilities(small_corpus):
    from mskbench.datamodel import load_sample

    torch.manual_seed(5)
    model = mh.MultiHeadModel(MaeConfig.toy())
    sample = load_sample(small_corpus, small_corpus.entries[0], None, 1)
    boxes = mh.propose_regions(sample, mh.ground_truth_proposer(small_corpus))
    preds = mh.predict_regions(model, sample, boxes)
    assert len(preds) == len(boxes)
    for p in preds:
        assert abs(float(np.sum(p.probabilities["tumor_subtype"])) - 1.0) < 1e-6
        assert abs(float(np.sum(p.probabilities["location"])) - 1.0) < 1e-6


def test_head_metrics_masking_contract():
    rng = np.random.default_rng(6)
    n = 40
    probs = {"abnormality": rng.random(n)}
    y = torch.tensor(rng.integers(0, 2, n).astype(np.float32))
    m = torch.tensor([0] * 20 + [1] * 20)
    layout_one = type(DEFAULT_HEAD_LAYOUT)(groups=(DEFAULT_HEAD_LAYOUT.groups[0],))
    full = mh._head_test_report(probs, {"abnormality": (y, m)}, [None] * n, layout_one)
    subset = mh._head_test_report(
        {"abnormality": probs["abnormality"][:20]},
        {"abnormality": (y[:20], m[:20])},
        [None] * 20,
        layout_one,
    )
    assert full["abnormality"].metrics == subset["abnormality"].metrics


def test_untrained_head_reported():
    layout_one = type(DEFAULT_HEAD_LAYOUT)(groups=(DEFAULT_HEAD_LAYOUT.groups[0],))
    probs = {"abnormality": np.array([0.2, 0.8])}
    y = torch.tensor([0.0, 1.0])
    m = torch.tensor([1, 1])  # everything masked
    report = mh._head_test_report(probs, {"abnormality": (y, m)}, [None, None], layout_one)
    assert report["abnormality"].status == "untrained"


def test_multihead_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(7)
    model = mh.MultiHeadModel(MaeConfig.toy())
    mh.save_multihead_checkpoint(model, tmp_path / "ckpt", extra={"fold": 2})
    again, meta = mh.load_multihead_checkpoint(tmp_path / "ckpt")
    assert meta["fold"] == 2
    for k, v in model.state_dict().items():
        assert torch.equal(v, again.state_dict()[k])
