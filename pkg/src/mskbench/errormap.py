"""Zero-shot abnormality localization from multi-pass masked-reconstruction error.

For each pass p, a fresh random mask hides patches, the autoencoder
reconstructs them, and the masked difference delta = (xhat - x) * M yields a
per-pixel squared error e averaged over channels. The final map divides the
accumulated error by the per-pixel coverage count (how many passes masked
that pixel); pixels never masked are explicitly undefined rather than zero,
since imputing zero would bias image scores downward.

No fine-tuning or labels are involved anywhere in this module: a trained
checkpoint is consumed strictly read-only.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import ImageSample
from .evalstat import TestResult, mann_whitney
from . import mae as mae_mod
from .mae import MaskPattern, sample_mask


class ErrorMapError(ValueError):
    pass


@dataclass(frozen=True)
class ErrorMap:
    """Coverage-normalized error grid. ``values`` is NaN where coverage is zero."""

    values: np.ndarray  # H x W float64
    coverage: np.ndarray  # H x W int
    n_passes: int

    def defined(self) -> np.ndarray:
        return self.coverage > 0


@dataclass(frozen=True)
class PassRecord:
    """One masking pass: its pixel mask, reconstruction, and per-pixel error."""

    pixel_mask: np.ndarray  # H x W {0,1}
    reconstruction: np.ndarray  # H x W x C
    error: np.ndarray  # H x W, zero wherever the mask is zero


def _pixel_mask_of(mask) -> np.ndarray:
    if isinstance(mask, MaskPattern):
        return mask.pixel_mask()
    return np.asarray(mask)


def masked_delta(x: np.ndarray, xhat: np.ndarray, pixel_mask) -> np.ndarray:
    """(xhat - x) elementwise-multiplied by the mask, broadcast over channels."""
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    m = _pixel_mask_of(pixel_mask).astype(np.float64)
    if x.shape != xhat.shape:
        raise ErrorMapError(f"shape mismatch: {x.shape} vs {xhat.shape}")
    if m.shape != x.shape[:2]:
        raise ErrorMapError(f"mask shape {m.shape} does not match image {x.shape[:2]}")
    if not np.isin(m, (0.0, 1.0)).all():
        raise ErrorMapError("pixel mask must be binary")
    return (xhat - x) * m[:, :, None]


def pixel_error(delta: np.ndarray, channels: int | None = None) -> np.ndarray:
    """Channel-mean of the squared masked difference, (H, W)."""
    delta = np.asarray(delta, dtype=np.float64)
    if channels is not None and channels != delta.shape[2]:
        raise ErrorMapError(f"channel count {channels} does not match delta {delta.shape}")
    return (delta**2).mean(axis=2)


def make_pass_record(x: np.ndarray, xhat: np.ndarray, mask) -> PassRecord:
    pm = _pixel_mask_of(mask)
    delta = masked_delta(x, xhat, pm)
    return PassRecord(pixel_mask=pm.astype(np.uint8), reconstruction=np.asarray(xhat), error=pixel_error(delta))


def accumulate(pass_records: list[PassRecord]) -> ErrorMap:
    """Per-pixel sum of errors divided by coverage; zero-coverage pixels NaN.

    Per-pixel contributions are summed in sorted order, so the result is
    bit-identical under any permutation of the passes.
    """
    if not pass_records:
        raise ErrorMapError("no passes to accumulate")
    shape = pass_records[0].error.shape
    for rec in pass_records:
        if rec.error.shape != shape:
            raise ErrorMapError("pass records have mismatched shapes")
    stacked = np.stack([rec.error for rec in pass_records])
    total = np.sort(stacked, axis=0).sum(axis=0)
    coverage = np.sum([rec.pixel_mask.astype(np.int64) for rec in pass_records], axis=0)
    values = np.full(shape, np.nan)
    defined = coverage > 0
    values[defined] = total[defined] / coverage[defined]
    return ErrorMap(values=values, coverage=coverage, n_passes=len(pass_records))


def _param_checksum(model) -> float:
    with_no_grad = [p.detach().double().abs().sum().item() for p in model.parameters()]
    return float(sum(with_no_grad))


def generate_error_map(
    image,
    checkpoint,
    n_passes: int = 10,
    seed: int = 0,
    mask_ratio: float | None = None,
) -> ErrorMap:
    """Run ``n_passes`` independent masking/reconstruction rounds and accumulate.

    The mask ratio defaults to the checkpoint's pretraining ratio. The model
    is used strictly read-only; any parameter drift raises.
    """
    if n_passes < 1:
        raise ErrorMapError("n_passes must be >= 1")
    if isinstance(checkpoint, (str, Path)):
        model, _ = mae_mod.load_checkpoint(checkpoint)
    else:
        model = checkpoint
    cfg = model.config
    ratio = cfg.mask_ratio if mask_ratio is None else mask_ratio

    arr = image.pixels if isinstance(image, ImageSample) else np.asarray(image)
    if arr.ndim == 2:
        arr = arr[:, :, None]

    before = _param_checksum(model)
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n_passes):
        mask = sample_mask(
            cfg.n_patches,
            ratio,
            seed=int(rng.integers(0, 2**63 - 1)),
            grid_shape=cfg.grid_shape,
            patch_size=cfg.patch_size,
        )
        xhat = mae_mod.reconstruct(arr, mask, model)
        records.append(make_pass_record(arr, xhat, mask))
    if _param_checksum(model) != before:
        raise ErrorMapError("checkpoint was modified during error-map generation")
    return accumulate(records)


def score_image(error_map: ErrorMap, region: np.ndarray | None = None) -> float:
    """Mean error over defined pixels, optionally restricted to a region mask."""
    scope = error_map.defined()
    if region is not None:
        region = np.asarray(region).astype(bool)
        if region.shape != scope.shape:
            raise ErrorMapError("region mask shape mismatch")
        scope = scope & region
    if not scope.any():
        raise ErrorMapError("empty scope: no defined pixels to score")
    return float(error_map.values[scope].mean())


def compare_groups(normal_scores, abnormal_scores) -> TestResult:
    """Two-sided Mann-Whitney U comparison of per-image mean-error scores.

    Returns the test result with group medians and a significance-star
    string. Groups smaller than 3 are flagged as underpowered.
    """
    normal_scores = np.asarray(normal_scores, dtype=float)
    abnormal_scores = np.asarray(abnormal_scores, dtype=float)
    if normal_scores.size == 0 or abnormal_scores.size == 0:
        raise ErrorMapError("both groups must be nonempty")
    flags: tuple[str, ...] = ()
    if min(normal_scores.size, abnormal_scores.size) < 3:
        flags = ("underpowered: group size < 3",)
    return mann_whitney(normal_scores, abnormal_scores, flags=flags)


def render_heatmap(error_map: ErrorMap) -> np.ndarray:
    """8-bit display rendering (min-max over defined pixels); undefined pixels 0.

    Display only: statistics always consume the raw values.
    """
    out = np.zeros(error_map.values.shape, dtype=np.uint8)
    defined = error_map.defined()
    if not defined.any():
        return out
    vals = error_map.values[defined]
    lo, hi = float(vals.min()), float(vals.max())
    if hi > lo:
        out[defined] = np.round((error_map.values[defined] - lo) / (hi - lo) * 255).astype(np.uint8)
    else:
        out[defined] = 128
    return out


def save_error_map(error_map: ErrorMap, path) -> Path:
    """Raw float grid plus coverage, as a portable .npz archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, values=error_map.values, coverage=error_map.coverage, n_passes=error_map.n_passes)
    return path


def load_error_map(path) -> ErrorMap:
    data = np.load(path)
    return ErrorMap(values=data["values"], coverage=data["coverage"], n_passes=int(data["n_passes"]))
