"""Patch grids, masking sampler, reconstruction objective, training loop."""

import json
import math

import numpy as np
import pytest
import torch

from mskbench import mae
from mskbench import synthgen as sg


# ---------------------------------------------------------------------------
# Patchify / unpatchify
# ---------------------------------------------------------------------------

def test_patchify_standard_geometry():
    img = np.random.default_rng(0).random((224, 224, 1))
    grid = mae.patchify(img, 16)
    assert grid.patches.shape == (196, 256)
    assert grid.grid_shape == (14, 14)
    rgb = np.random.default_rng(1).random((224, 224, 3))
    assert mae.patchify(rgb, 16).patches.shape == (196, 768)


def test_patchify_constant_image():
    img = np.full((32, 32, 1), 0.25)
    grid = mae.patchify(img, 8)
    assert np.all(grid.patches == grid.patches[0])


def test_patchify_roundtrip_exact():
    rng = np.random.default_rng(2)
    for _ in range(100):
        c = int(rng.integers(1, 4))
        img = rng.random((32, 48, c))
        grid = mae.patchify(img, 8)
        assert np.array_equal(mae.unpatchify(grid), img)


def test_patchify_rejects_indivisible():
    with pytest.raises(mae.MaeError):
        mae.patchify(np.zeros((30, 30, 1)), 8)


def test_model_patchify_matches_numpy():
    cfg = mae.MaeConfig.toy()
    torch.manual_seed(0)
    model = mae.MaskedAutoencoder(cfg)
    img = np.random.default_rng(3).random((64, 64, 1)).astype(np.float32)
    ours = mae.patchify(img, 8).patches
    theirs = model.patchify_images(torch.from_numpy(img)[None])[0].numpy()
    assert np.array_equal(ours.astype(np.float32), theirs)


# ---------------------------------------------------------------------------
# Masking sampler
# ---------------------------------------------------------------------------

def test_sample_mask_exact_count():
    pattern = mae.sample_mask(196, 0.75, seed=0)
    assert pattern.n_masked == 147


def test_sample_mask_deterministic():
    a = mae.sample_mask(64, 0.75, seed=9)
    b = mae.sample_mask(64, 0.75, seed=9)
    assert np.array_equal(a.patch_mask, b.patch_mask)
    c = mae.sample_mask(64, 0.75, seed=10)
    assert not np.array_equal(a.patch_mask, c.patch_mask)


def test_sample_mask_count_matches_round():
    for n, ratio in [(16, 0.5), (196, 0.75), (100, 0.33), (49, 0.6), (64, 0.47)]:
        pattern = mae.sample_mask(n, ratio, seed=1, grid_shape=(1, n))
        assert pattern.n_masked == round(ratio * n)


def test_sample_mask_uniformity_monte_carlo():
    # binomial 3-sigma band: 10,000 draws at ratio 0.5 -> each patch 5,000 +- 200
    counts = np.zeros(16, dtype=int)
    for seed in range(10_000):
        counts += mae.sample_mask(16, 0.5, seed=seed).patch_mask
    assert counts.min() >= 4800 and counts.max() <= 5200


def test_sample_mask_degenerate_rejected():
    with pytest.raises(mae.MaeError, match="degenerate"):
        mae.sample_mask(4, 0.05, seed=0, grid_shape=(2, 2))
    with pytest.raises(mae.MaeError, match="degenerate"):
        mae.sample_mask(4, 0.95, seed=0, grid_shape=(2, 2))


def test_pixel_mask_expansion():
    pattern = mae.MaskPattern(np.array([1, 0, 0, 1], dtype=np.uint8), (2, 2), 3)
    px = pattern.pixel_mask()
    assert px.shape == (6, 6)
    assert px[:3, :3].all() and not px[:3, 3:].any()
    assert px[3:, 3:].all() and not px[3:, :3].any()


# ---------------------------------------------------------------------------
# Reconstruction loss
# ---------------------------------------------------------------------------

def test_loss_zero_at_identity():
    target = torch.rand(4, 16)
    mask = torch.tensor([1, 0, 1, 0])
    assert float(mae.reconstruction_loss(target.clone(), target, mask)) == 0.0


def test_loss_single_patch_constant_error():
    d = 0.37
    target = torch.zeros(2, 8)
    pred = target.clone()
    pred[0] += d
    mask = torch.tensor([1, 0])
    loss = float(mae.reconstruction_loss(pred, target, mask))
    assert loss == pytest.approx(d * d, rel=1e-6)


def test_loss_ignores_visible_targets_bitwise():
    rng = torch.Generator().manual_seed(4)
    pred = torch.rand(6, 12, generator=rng)
    target = torch.rand(6, 12, generator=rng)
    mask = torch.tensor([1, 0, 1, 0, 0, 1])
    base = mae.reconstruction_loss(pred, target, mask)
    perturbed = target.clone()
    perturbed[mask == 0] = 1e6
    after = mae.reconstruction_loss(pred, perturbed, mask)
    assert float(base) == float(after)  # bit-identical


def test_loss_ignores_visible_predictions():
    rng = torch.Generator().manual_seed(5)
    pred = torch.rand(4, 10, generator=rng)
    target = torch.rand(4, 10, generator=rng)
    mask = torch.tensor([0, 1, 1, 0])
    base = float(mae.reconstruction_loss(pred, target, mask))
    pred2 = pred.clone()
    pred2[mask == 0] = -99.0
    assert float(mae.reconstruction_loss(pred2, target, mask)) == base


def test_loss_all_visible_rejected():
    with pytest.raises(mae.MaeError, match="all-zero"):
        mae.reconstruction_loss(torch.rand(3, 4), torch.rand(3, 4), torch.zeros(3))


def test_loss_normalized_targets():
    # normalized mode standardizes the target patch before comparison
    target = torch.tensor([[1.0, 2.0, 3.0, 4.0]])
    pred = torch.zeros(1, 4)
    mask = torch.ones(1)
    mean, var = 2.5, 1.25
    standardized = (np.array([1, 2, 3, 4]) - mean) / math.sqrt(var + 1e-6)
    expected = float(np.mean(standardized**2))
    got = float(mae.reconstruction_loss(pred, target, mask, normalize=True))
    assert got == pytest.approx(expected, rel=1e-5)


def test_loss_gradient_matches_central_differences():
    # 2-patch toy setup in float64
    torch.manual_seed(0)
    pred = torch.randn(2, 6, dtype=torch.float64, requires_grad=True)
    target = torch.randn(2, 6, dtype=torch.float64)
    mask = torch.tensor([1, 0])
    loss = mae.reconstruction_loss(pred, target, mask)
    loss.backward()
    analytic = pred.grad.clone()
    eps = 1e-6
    for i in range(2):
        for j in range(6):
            plus = pred.detach().clone()
            plus[i, j] += eps
            minus = pred.detach().clone()
            minus[i, j] -= eps
            fd = (
                float(mae.reconstruction_loss(plus, target, mask))
                - float(mae.reconstruction_loss(minus, target, mask))
            ) / (2 * eps)
            if analytic[i, j].abs() > 1e-12:
                assert abs(fd - float(analytic[i, j])) / abs(float(analytic[i, j])) < 1e-4
            else:
                assert abs(fd) < 1e-9


# ---------------------------------------------------------------------------
# Config validation
# ---------------------------------------------------------------------------

def test_config_defaults_full_scale():
    cfg = mae.MaeConfig()
    assert cfg.patch_size == 16
    assert (cfg.encoder_depth, cfg.encoder_dim) == (24, 1024)
    assert (cfg.decoder_depth, cfg.decoder_dim) == (8, 512)
    assert cfg.mask_ratio == 0.75
    assert cfg.base_lr == 7.5e-5
    assert cfg.batch_size == 128
    assert cfg.weight_decay == 0.05
    assert cfg.warmup_ratio == 0.05
    assert cfg.epochs == 50
    assert cfg.crop_area == (0.2, 1.0)
    assert cfg.normalize_pixel_loss is False
    assert (cfg.beta1, cfg.beta2) == (0.9, 0.999)


def test_config_validation():
    with pytest.raises(mae.MaeError):
        mae.MaeConfig(mask_ratio=0.0)
    with pytest.raises(mae.MaeError):
        mae.MaeConfig(image_size=100, patch_size=16)
    with pytest.raises(mae.MaeError):
        mae.MaeConfig(encoder_dim=100, encoder_heads=16)


# ---------------------------------------------------------------------------
# Pretraining loop
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def mini_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("mini")
    return sg.build_corpus(sg.CorpusSpec(n_normal=24, n_abnormal=0, size=(64, 64), seed=13), out)


def test_pretrain_zero_epochs_keeps_init(mini_corpus, tmp_path):
    cfg = mae.MaeConfig.toy(epochs=0, seed=3)
    result = mae.pretrain(mini_corpus, cfg, tmp_path / "run")
    model, meta = mae.load_checkpoint(result.best_checkpoint)
    torch.manual_seed(cfg.seed)
    fresh = mae.MaskedAutoencoder(cfg)
    for k, v in fresh.state_dict().items():
        assert torch.equal(v, model.state_dict()[k])
    assert meta["step"] == 0
    assert result.history == []


def test_pretrain_deterministic_loss_curves(mini_corpus, tmp_path):
    cfg = mae.MaeConfig.toy(epochs=2, seed=4)
    r1 = mae.pretrain(mini_corpus, cfg, tmp_path / "a")
    r2 = mae.pretrain(mini_corpus, cfg, tmp_path / "b")
    assert r1.losses == r2.losses


def test_pretrain_warm_start_from_checkpoint(mini_corpus, tmp_path):
    cfg = mae.MaeConfig.toy(epochs=1, seed=6)
    first = mae.pretrain(mini_corpus, cfg, tmp_path / "first")
    cfg2 = mae.MaeConfig.toy(epochs=0, seed=99)
    warmed = mae.pretrain(
        mini_corpus, cfg2, tmp_path / "second", init_checkpoint=first.best_checkpoint
    )
    src, _ = mae.load_checkpoint(first.best_checkpoint)
    dst, _ = mae.load_checkpoint(warmed.best_checkpoint)
    for k, v in src.state_dict().items():
        assert torch.equal(v, dst.state_dict()[k])


def test_pretrain_aborts_on_non_finite_loss(mini_corpus, tmp_path, monkeypatch):
    def poisoned(*args, **kwargs):
        return torch.tensor(float("nan"), requires_grad=True)

    monkeypatch.setattr(mae, "reconstruction_loss", poisoned)
    cfg = mae.MaeConfig.toy(epochs=1, seed=7)
    with pytest.raises(RuntimeError, match="non-finite loss"):
        mae.pretrain(mini_corpus, cfg, tmp_path / "run")


def test_pretrain_writes_history_and_checkpoints(mini_corpus, tmp_path):
    cfg = mae.MaeConfig.toy(epochs=2, seed=5)
    result = mae.pretrain(mini_corpus, cfg, tmp_path / "run")
    assert (tmp_path / "run" / "history.jsonl").exists()
    assert (tmp_path / "run" / "config.json").exists()
    assert (result.best_checkpoint / "weights.pt").exists()
    assert (result.last_checkpoint / "metadata.json").exists()
    assert len(result.history) == cfg.epochs * math.ceil(24 / cfg.batch_size)


def test_pretrain_loss_decreases(zero_shot_setup):
    losses = [
        float(json.loads(line)["loss"])
        for line in (zero_shot_setup.checkpoint.parent / "history.jsonl").read_text().splitlines()
    ]
    first = np.mean(losses[:16])
    last = np.mean(losses[-16:])
    assert last < first * 0.6


# ---------------------------------------------------------------------------
# Reconstruction compositing
# ---------------------------------------------------------------------------

def test_reconstruct_empty_mask_is_identity():
    cfg = mae.MaeConfig.toy()
    torch.manual_seed(1)
    model = mae.MaskedAutoencoder(cfg)
    img = np.random.default_rng(6).random((64, 64, 1)).astype(np.float32)
    pattern = mae.empty_mask(cfg.n_patches, cfg.grid_shape, cfg.patch_size)
    out = mae.reconstruct(img, pattern, model)
    assert np.array_equal(out, img)


def test_reconstruct_visible_pixels_bit_equal():
    cfg = mae.MaeConfig.toy()
    torch.manual_seed(2)
    model = mae.MaskedAutoencoder(cfg)
    img = np.random.default_rng(7).random((64, 64, 1)).astype(np.float32)
    pattern = mae.sample_mask(cfg.n_patches, 0.75, seed=3, grid_shape=cfg.grid_shape, patch_size=8)
    out = mae.reconstruct(img, pattern, model)
    visible = pattern.pixel_mask() == 0
    assert np.array_equal(out[visible], img[visible])
    assert not np.array_equal(out[~visible], img[~visible])


def test_reconstruct_shape_mismatch_rejected():
    cfg = mae.MaeConfig.toy()
    torch.manual_seed(3)
    model = mae.MaskedAutoencoder(cfg)
    img = np.random.default_rng(8).random((32, 32, 1))
    pattern = mae.sample_mask(16, 0.5, seed=0, grid_shape=(4, 4), patch_size=8)
    with pytest.raises(mae.MaeError, match="incompatible|patches"):
        mae.reconstruct(img, pattern, model)


def test_trained_model_beats_untrained_on_masked_shaft(zero_shot_setup):
    cfg = zero_shot_setup.model.config
    torch.manual_seed(11)
    untrained = mae.MaskedAutoencoder(cfg)
    sample = sg.generate_normal(987, (64, 64))
    img = sample.pixels.astype(np.float32)
    pattern = mae.sample_mask(cfg.n_patches, cfg.mask_ratio, seed=5, grid_shape=cfg.grid_shape, patch_size=cfg.patch_size)
    masked_px = pattern.pixel_mask().astype(bool)

    out_trained = mae.reconstruct(img, pattern, zero_shot_setup.model)
    out_untrained = mae.reconstruct(img, pattern, untrained)
    mse_trained = float(((out_trained - img)[masked_px] ** 2).mean())
    mse_untrained = float(((out_untrained - img)[masked_px] ** 2).mean())
    assert mse_trained < mse_untrained


def test_checkpoint_roundtrip(tmp_path):
    cfg = mae.MaeConfig.toy()
    torch.manual_seed(4)
    model = mae.MaskedAutoencoder(cfg)
    mae.save_checkpoint(model, tmp_path / "ckpt", step=7, epoch=2)
    again, meta = mae.load_checkpoint(tmp_path / "ckpt")
    assert meta["step"] == 7 and meta["epoch"] == 2
    for k, v in model.state_dict().items():
        assert torch.equal(v, again.state_dict()[k])
