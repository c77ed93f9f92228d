"""Masked-autoencoder model, masking sampler, reconstruction objective, and pretraining loop.

The model is a size-configurable ViT encoder/decoder pair. Images are split
into non-overlapping patches; a random 75% subset (configurable) is hidden
from the encoder, and a lightweight decoder predicts the pixel content of
every patch position. The loss is mean squared error over the masked patches
only; per-patch target normalization is supported for parity with the
upstream formulation but disabled by default, since large uniform black
backgrounds make it counterproductive on radiographs.

Checkpoints are directories holding ``metadata.json`` (config echo plus step
counters) and ``weights.pt`` (a torch state dict).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datamodel import DatasetManifest, ImageSample, load_sample


class MaeError(ValueError):
    pass


@dataclass
class MaeConfig:
    """Hyperparameters for the autoencoder and its pretraining run.

    Defaults are the full-scale recipe: ViT-L/16-sized encoder (24 x 1024),
    8 x 512 decoder, 75% masking, AdamW at 7.5e-5 with beta2 = 0.999, cosine
    decay with 5% warmup over 50 epochs, batch 128, random resized crops of
    20-100% area plus horizontal flips, and raw-pixel (unnormalized) loss.
    """

    image_size: int = 224
    channels: int = 3
    patch_size: int = 16
    encoder_depth: int = 24
    encoder_dim: int = 1024
    encoder_heads: int = 16
    decoder_depth: int = 8
    decoder_dim: int = 512
    decoder_heads: int = 16
    mask_ratio: float = 0.75
    normalize_pixel_loss: bool = False
    base_lr: float = 7.5e-5
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    warmup_ratio: float = 0.05
    epochs: int = 50
    batch_size: int = 128
    crop_area: tuple[float, float] = (0.2, 1.0)
    horizontal_flip: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (0.0 < self.mask_ratio < 1.0):
            raise MaeError("mask_ratio must be in (0, 1)")
        if self.image_size % self.patch_size != 0:
            raise MaeError("patch_size must divide image_size")
        if self.encoder_dim % self.encoder_heads != 0:
            raise MaeError("encoder_dim must be divisible by encoder_heads")
        if self.decoder_dim % self.decoder_heads != 0:
            raise MaeError("decoder_dim must be divisible by decoder_heads")
        if self.encoder_dim % 4 != 0 or self.decoder_dim % 4 != 0:
            raise MaeError("embedding dims must be divisible by 4 (2-D sin-cos positions)")

    @property
    def grid_shape(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return (g, g)

    @property
    def n_patches(self) -> int:
        g = self.image_size // self.patch_size
        return g * g

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @classmethod
    def toy(cls, **overrides) -> "MaeConfig":
        """Desk-scale configuration: 64 x 64 inputs, patch 8, encoder 2 x 64."""
        params = dict(
            image_size=64,
            channels=1,
            patch_size=8,
            encoder_depth=2,
            encoder_dim=64,
            encoder_heads=4,
            decoder_depth=1,
            decoder_dim=32,
            decoder_heads=4,
            base_lr=1.5e-3,
            batch_size=64,
            epochs=10,
            warmup_ratio=0.05,
        )
        params.update(overrides)
        return cls(**params)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_area"] = list(self.crop_area)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MaeConfig":
        d = dict(d)
        if "crop_area" in d:
            d["crop_area"] = tuple(d["crop_area"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Patch grids and masks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchGrid:
    """Row-major patch matrix (N, p*p*C) plus the grid geometry to invert it."""

    patches: np.ndarray
    grid_shape: tuple[int, int]
    patch_size: int
    channels: int


def patchify(image, patch_size: int) -> PatchGrid:
    """Split an H x W x C array (or ImageSample) into row-major patches. Lossless."""
    arr = image.pixels if isinstance(image, ImageSample) else np.asarray(image)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    if h % patch_size or w % patch_size:
        raise MaeError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    patches = (
        arr.reshape(gh, patch_size, gw, patch_size, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * gw, patch_size * patch_size * c)
    )
    return PatchGrid(patches=patches, grid_shape=(gh, gw), patch_size=patch_size, channels=c)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    """Exact inverse of patchify."""
    gh, gw = grid.grid_shape
    p = grid.patch_size
    c = grid.channels
    return (
        grid.patches.reshape(gh, gw, p, p, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * p, gw * p, c)
    )


@dataclass(frozen=True)
class MaskPattern:
    """Patch-level binary mask (1 = masked) and its pixel-level expansion."""

    patch_mask: np.ndarray
    grid_shape: tuple[int, int]
    patch_size: int

    @property
    def n_patches(self) -> int:
        return int(self.patch_mask.size)

    @property
    def n_masked(self) -> int:
        return int(self.patch_mask.sum())

    def pixel_mask(self) -> np.ndarray:
        """H x W {0,1} mask, constant within each patch."""
        gh, gw = self.grid_shape
        grid = self.patch_mask.reshape(gh, gw)
        return np.kron(grid, np.ones((self.patch_size, self.patch_size), dtype=self.patch_mask.dtype))


def _infer_grid(n_patches: int) -> tuple[int, int]:
    g = int(round(math.sqrt(n_patches)))
    if g * g != n_patches:
        raise MaeError("grid_shape required for non-square patch counts")
    return (g, g)


def sample_mask(
    n_patches: int,
    mask_ratio: float,
    seed: int,
    grid_shape: tuple[int, int] | None = None,
    patch_size: int = 1,
) -> MaskPattern:
    """Uniformly random masked subset of exactly round(mask_ratio * N) patches."""
    if not (0.0 < mask_ratio < 1.0):
        raise MaeError("mask_ratio must be in (0, 1)")
    n_masked = int(round(mask_ratio * n_patches))
    if n_masked in (0, n_patches):
        raise MaeError(f"degenerate mask: {n_masked} of {n_patches} patches masked")
    rng = np.random.default_rng(seed)
    mask = np.zeros(n_patches, dtype=np.uint8)
    mask[rng.permutation(n_patches)[:n_masked]] = 1
    if grid_shape is None:
        grid_shape = _infer_grid(n_patches)
    return MaskPattern(patch_mask=mask, grid_shape=grid_shape, patch_size=patch_size)


def empty_mask(n_patches: int, grid_shape=None, patch_size: int = 1) -> MaskPattern:
    """All-visible pattern (test-only bypass of the degenerate-mask guard)."""
    if grid_shape is None:
        grid_shape = _infer_grid(n_patches)
    return MaskPattern(
        patch_mask=np.zeros(n_patches, dtype=np.uint8),
        grid_shape=grid_shape,
        patch_size=patch_size,
    )


# ---------------------------------------------------------------------------
# Reconstruction objective
# ---------------------------------------------------------------------------

def reconstruction_loss(predicted, target, patch_mask, normalize: bool = False):
    """Mean squared error over masked patches only.

    ``predicted`` and ``target`` are (..., N, D) patch matrices; ``patch_mask``
    is (..., N) with 1 marking masked patches. Values at visible patches are
    never read, so perturbing them cannot change the loss. With ``normalize``
    the targets are standardized per patch before the comparison.

    Returns a torch scalar when given tensors (differentiable), else a float.
    """
    was_numpy = not torch.is_tensor(predicted)
    pred = torch.as_tensor(predicted)
    tgt = torch.as_tensor(target)
    mask = torch.as_tensor(np.asarray(patch_mask.patch_mask if isinstance(patch_mask, MaskPattern) else patch_mask))
    if pred.shape != tgt.shape:
        raise MaeError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(tgt.shape)}")
    if mask.shape != pred.shape[:-1]:
        raise MaeError(f"mask shape {tuple(mask.shape)} does not match patches {tuple(pred.shape[:-1])}")
    sel = mask.bool()
    if not bool(sel.any()):
        raise MaeError("all-zero patch mask: loss undefined")
    pred_sel = pred[sel]
    tgt_sel = tgt[sel]
    if normalize:
        mean = tgt_sel.mean(dim=-1, keepdim=True)
        var = tgt_sel.var(dim=-1, keepdim=True, unbiased=False)
        tgt_sel = (tgt_sel - mean) / torch.sqrt(var + 1e-6)
    loss = ((pred_sel - tgt_sel) ** 2).mean()
    return float(loss.item()) if was_numpy else loss


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

def _sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
    omega = 1.0 / 10000**omega
    out = np.einsum("p,d->pd", positions.astype(np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_position_embedding(dim: int, grid_shape: tuple[int, int]) -> np.ndarray:
    """Fixed 2-D sin-cos patch-position encodings, (N, dim)."""
    gh, gw = grid_shape
    ii, jj = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    emb_i = _sincos_1d(dim // 2, ii.reshape(-1))
    emb_j = _sincos_1d(dim // 2, jj.reshape(-1))
    return np.concatenate([emb_i, emb_j], axis=1)


class _Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class _Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = _Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        y = self.norm1(x)
        x = x + self.attn(y, y, y, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class MaskedAutoencoder(nn.Module):
    """Encoder over visible patches; decoder predicts pixels for all patch positions."""

    def __init__(self, config: MaeConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.patch_dim

        self.patch_embed = nn.Linear(d, config.encoder_dim)
        self.register_buffer(
            "pos_embed",
            torch.from_numpy(sincos_position_embedding(config.encoder_dim, config.grid_shape)).float()[None],
        )
        self.encoder_blocks = nn.ModuleList(
            [_Block(config.encoder_dim, config.encoder_heads) for _ in range(config.encoder_depth)]
        )
        self.encoder_norm = nn.LayerNorm(config.encoder_dim)

        self.decoder_embed = nn.Linear(config.encoder_dim, config.decoder_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, config.decoder_dim))
        self.register_buffer(
            "decoder_pos_embed",
            torch.from_numpy(sincos_position_embedding(config.decoder_dim, config.grid_shape)).float()[None],
        )
        self.decoder_blocks = nn.ModuleList(
            [_Block(config.decoder_dim, config.decoder_heads) for _ in range(config.decoder_depth)]
        )
        self.decoder_norm = nn.LayerNorm(config.decoder_dim)
        self.head = nn.Linear(config.decoder_dim, d)

        self.apply(self._init_weights)
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    @staticmethod
    def _init_weights(module):
        if isinstance(module, nn.Linear):
            nn.init.trunc_normal_(module.weight, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)

    @property
    def embed_dim(self) -> int:
        return self.config.encoder_dim

    def patchify_images(self, imgs: torch.Tensor) -> torch.Tensor:
        """(B, H, W, C) -> (B, N, p*p*C), same layout as the numpy patchify."""
        p = self.config.patch_size
        b, h, w, c = imgs.shape
        gh, gw = h // p, w // p
        x = imgs.reshape(b, gh, p, gw, p, c).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(b, gh * gw, p * p * c)

    def unpatchify_patches(self, patches: torch.Tensor) -> torch.Tensor:
        p = self.config.patch_size
        gh, gw = self.config.grid_shape
        b = patches.shape[0]
        c = self.config.channels
        x = patches.reshape(b, gh, gw, p, p, c).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(b, gh * p, gw * p, c)

    def _encode_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        for blk in self.encoder_blocks:
            tokens = blk(tokens)
        return self.encoder_norm(tokens)

    def forward(self, imgs: torch.Tensor, patch_mask: torch.Tensor) -> torch.Tensor:
        """Predict patch pixels for every position.

        ``imgs`` is (B, H, W, C); ``patch_mask`` is (B, N) or (N,) with 1 for
        masked patches (equal count per row). Returns (B, N, p*p*C).
        """
        b = imgs.shape[0]
        n = self.config.n_patches
        if patch_mask.dim() == 1:
            patch_mask = patch_mask[None].expand(b, -1)
        patch_mask = patch_mask.to(torch.long)

        patches = self.patchify_images(imgs)
        tokens = self.patch_embed(patches) + self.pos_embed

        n_visible = int(n - int(patch_mask[0].sum()))
        # stable sort keeps visible patches in row-major order
        order = torch.argsort(patch_mask, dim=1, stable=True)
        idx_keep = order[:, :n_visible]
        visible = torch.gather(tokens, 1, idx_keep[:, :, None].expand(-1, -1, tokens.shape[2]))

        encoded = self._encode_tokens(visible)

        dec_visible = self.decoder_embed(encoded)
        full = self.mask_token.expand(b, n, -1).clone()
        full = full.scatter(1, idx_keep[:, :, None].expand(-1, -1, dec_visible.shape[2]), dec_visible)
        x = full + self.decoder_pos_embed
        for blk in self.decoder_blocks:
            x = blk(x)
        return self.head(self.decoder_norm(x))

    def embed(self, imgs: torch.Tensor) -> torch.Tensor:
        """Mean-pooled encoder embedding over all (unmasked) patches, (B, encoder_dim)."""
        patches = self.patchify_images(imgs)
        tokens = self.patch_embed(patches) + self.pos_embed
        return self._encode_tokens(tokens).mean(dim=1)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: MaskedAutoencoder, path, step: int = 0, epoch: int = 0, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "kind": "mae",
        "config": model.config.to_dict(),
        "step": step,
        "epoch": epoch,
    }
    if extra:
        meta.update(extra)
    (path / "metadata.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    torch.save(model.state_dict(), path / "weights.pt")
    return path


def load_checkpoint(path) -> tuple[MaskedAutoencoder, dict]:
    path = Path(path)
    meta = json.loads((path / "metadata.json").read_text())
    config = MaeConfig.from_dict(meta["config"])
    model = MaskedAutoencoder(config)
    model.load_state_dict(torch.load(path / "weights.pt", weights_only=True))
    model.eval()
    return model, meta


# ---------------------------------------------------------------------------
# Augmentation (random resized crop + horizontal flip, batched via affine grids)
# ---------------------------------------------------------------------------

def _augment_batch(imgs: torch.Tensor, config: MaeConfig, rng: np.random.Generator) -> torch.Tensor:
    b, h, w, c = imgs.shape
    lo, hi = config.crop_area
    area = rng.uniform(lo, hi, size=b)
    log_ratio = rng.uniform(math.log(3 / 4), math.log(4 / 3), size=b)
    ratio = np.exp(log_ratio)
    crop_h = np.sqrt(area / ratio)
    crop_w = np.sqrt(area * ratio)
    crop_h = np.clip(crop_h, 0.05, 1.0)
    crop_w = np.clip(crop_w, 0.05, 1.0)
    # crop center constrained so the window stays inside the image
    cy = rng.uniform(crop_h / 2, 1 - crop_h / 2)
    cx = rng.uniform(crop_w / 2, 1 - crop_w / 2)
    flip = rng.random(b) < 0.5 if config.horizontal_flip else np.zeros(b, dtype=bool)

    theta = np.zeros((b, 2, 3), dtype=np.float32)
    theta[:, 0, 0] = crop_w * np.where(flip, -1.0, 1.0)
    theta[:, 1, 1] = crop_h
    theta[:, 0, 2] = 2 * cx - 1
    theta[:, 1, 2] = 2 * cy - 1

    x = imgs.permute(0, 3, 1, 2)  # (B, C, H, W)
    grid = F.affine_grid(torch.from_numpy(theta), size=x.shape, align_corners=False)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
    return out.permute(0, 2, 3, 1).contiguous()


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------

@dataclass
class PretrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    history: list = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [h["loss"] for h in self.history]


def load_manifest_images(manifest: DatasetManifest, size: int, channels: int, ids=None) -> tuple[torch.Tensor, list[str]]:
    """Load manifest images into one (n, H, W, C) float tensor."""
    wanted = set(ids) if ids is not None else None
    samples = []
    kept = []
    for entry in manifest.entries:
        if wanted is not None and entry.id not in wanted:
            continue
        s = load_sample(manifest, entry, (size, size), channels)
        samples.append(torch.from_numpy(np.ascontiguousarray(s.pixels, dtype=np.float32)))
        kept.append(entry.id)
    if not samples:
        raise MaeError("no images to load")
    return torch.stack(samples), kept


def _cosine_warmup_factor(step: int, total: int, warmup: int) -> float:
    if warmup > 0 and step < warmup:
        return (step + 1) / warmup
    span = max(1, total - warmup)
    progress = (step - warmup) / span
    return 0.5 * (1.0 + math.cos(math.pi * min(1.0, max(0.0, progress))))


def pretrain(
    manifest: DatasetManifest,
    config: MaeConfig,
    out_dir,
    augment: bool = True,
    init_checkpoint=None,
) -> PretrainResult:
    """Train the autoencoder on a manifest; writes per-epoch checkpoints.

    ``init_checkpoint`` warm-starts from an external checkpoint directory;
    otherwise parameters get truncated-normal initialization. Deterministic
    for a fixed config seed (single worker). Keeps the
    best-by-mean-epoch-loss checkpoint alongside the last one. Aborts with a
    diagnostic on non-finite loss.
    """
    if len(manifest) == 0:
        raise MaeError("empty corpus")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True))

    torch.manual_seed(config.seed)
    model = MaskedAutoencoder(config)
    if init_checkpoint is not None:
        warm, _meta = load_checkpoint(init_checkpoint)
        if warm.config.patch_dim != config.patch_dim or warm.config.encoder_dim != config.encoder_dim:
            raise MaeError("init checkpoint incompatible with the requested architecture")
        model.load_state_dict(warm.state_dict())
    data, _ids = load_manifest_images(manifest, config.image_size, config.channels)
    n = data.shape[0]

    opt = torch.optim.AdamW(
        model.parameters(),
        lr=config.base_lr,
        betas=(config.beta1, config.beta2),
        weight_decay=config.weight_decay,
    )
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    warmup_steps = int(round(config.warmup_ratio * total_steps))

    rng = np.random.default_rng(config.seed)
    history: list[dict] = []
    history_path = out_dir / "history.jsonl"
    best_loss = math.inf
    best_dir = out_dir / "best"
    last_dir = out_dir / "last"

    if config.epochs == 0:
        save_checkpoint(model, best_dir, step=0, epoch=0)
        save_checkpoint(model, last_dir, step=0, epoch=0)
        history_path.write_text("")
        return PretrainResult(best_checkpoint=best_dir, last_checkpoint=last_dir, history=history)

    step = 0
    with history_path.open("w") as hist_file:
        for epoch in range(config.epochs):
            model.train()
            order = rng.permutation(n)
            epoch_losses = []
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                imgs = data[torch.from_numpy(idx)]
                if augment:
                    imgs = _augment_batch(imgs, config, rng)
                masks = np.stack(
                    [
                        sample_mask(
                            config.n_patches,
                            config.mask_ratio,
                            seed=int(rng.integers(0, 2**63 - 1)),
                            grid_shape=config.grid_shape,
                            patch_size=config.patch_size,
                        ).patch_mask
                        for _ in range(len(idx))
                    ]
                )
                mask_t = torch.from_numpy(masks)

                lr_factor = _cosine_warmup_factor(step, total_steps, warmup_steps)
                for group in opt.param_groups:
                    group["lr"] = config.base_lr * lr_factor

                pred = model(imgs, mask_t)
                target = model.patchify_images(imgs)
                loss = reconstruction_loss(pred, target, mask_t, normalize=config.normalize_pixel_loss)
                if not torch.isfinite(loss):
                    raise RuntimeError(
                        f"non-finite loss at step {step} (epoch {epoch}): {loss.item()!r}; "
                        f"lr={config.base_lr * lr_factor:.3e}"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()

                rec = {"step": step, "epoch": epoch, "loss": float(loss.item()), "lr": config.base_lr * lr_factor}
                history.append(rec)
                hist_file.write(json.dumps(rec) + "\n")
                epoch_losses.append(rec["loss"])
                step += 1

            epoch_mean = float(np.mean(epoch_losses))
            save_checkpoint(model, last_dir, step=step, epoch=epoch + 1, extra={"epoch_loss": epoch_mean})
            if epoch_mean < best_loss:
                best_loss = epoch_mean
                save_checkpoint(model, best_dir, step=step, epoch=epoch + 1, extra={"epoch_loss": epoch_mean})

    return PretrainResult(best_checkpoint=best_dir, last_checkpoint=last_dir, history=history)


# ---------------------------------------------------------------------------
# Reconstruction
# ---------------------------------------------------------------------------

def reconstruct(image, mask: MaskPattern, model_or_checkpoint) -> np.ndarray:
    """Composite reconstruction: original pixels where visible, model output where masked."""
    if isinstance(model_or_checkpoint, (str, Path)):
        model, _ = load_checkpoint(model_or_checkpoint)
    else:
        model = model_or_checkpoint
    arr = image.pixels if isinstance(image, ImageSample) else np.asarray(image)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    cfg = model.config
    if (h, w, c) != (cfg.image_size, cfg.image_size, cfg.channels):
        raise MaeError(
            f"image shape {(h, w, c)} incompatible with checkpoint "
            f"({cfg.image_size}, {cfg.image_size}, {cfg.channels})"
        )
    if mask.n_patches != cfg.n_patches:
        raise MaeError(f"mask has {mask.n_patches} patches, model expects {cfg.n_patches}")

    if mask.n_masked == 0:
        return arr.copy()

    model.eval()
    with torch.no_grad():
        imgs = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))[None]
        mask_t = torch.from_numpy(mask.patch_mask.astype(np.int64))
        pred = model(imgs, mask_t)
        xhat = model.unpatchify_patches(pred)[0].numpy()

    pixel_mask = MaskPattern(mask.patch_mask, cfg.grid_shape, cfg.patch_size).pixel_mask()
    out = arr.copy()
    sel = pixel_mask.astype(bool)
    out[sel] = xhat.astype(out.dtype)[sel]
    return out
