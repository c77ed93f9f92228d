"""HTTP inference service for the region-guided five-head classifier.

One model version per process, loaded once and shared read-only across
requests. ``POST /predict`` takes a multipart PNG/JPEG upload and returns raw
per-region probabilities plus image-level labels; the ``threshold`` query
parameter is pure post-processing, so the probability payload is byte-for-
byte independent of it (clients can re-threshold without another request).
"""

from __future__ import annotations

import io
import logging
import uuid
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastapi import FastAPI, File, Query, UploadFile
from fastapi.responses import JSONResponse
from PIL import Image

from . import __version__
from .datamodel import ImageSample, ManifestError, pixels_from_pil
from .heads import DEFAULT_HEAD_LAYOUT
from .multihead import (
    ImagePrediction,
    MultiHeadModel,
    RegionBox,
    aggregate_image,
    detection_json_proposer,
    load_multihead_checkpoint,
    predict_regions,
    propose_regions,
)

logger = logging.getLogger("mskbench.service")

SCHEMA_VERSION = "1"
MAX_UPLOAD_BYTES = 32 * 1024 * 1024
ACCEPTED_FORMATS = ("PNG", "JPEG")
LOCATION_TOP_K = 3


@dataclass
class ServiceBundle:
    """Everything one server process holds: the model, its proposer, and versions."""

    model: MultiHeadModel
    model_version: str
    proposer: object | None = None


def brightness_proposer(sample: ImageSample) -> list[RegionBox]:
    """Heuristic default proposer: the (squared) bounding box of bright pixels."""
    plane = sample.pixels[:, :, 0]
    mask = plane > 0.25
    if mask.sum() < 16:
        return []
    ii, jj = np.nonzero(mask)
    y0, y1 = int(ii.min()), int(ii.max()) + 1
    x0, x1 = int(jj.min()), int(jj.max()) + 1
    side = max(y1 - y0, x1 - x0)
    cy, cx = (y0 + y1) // 2, (x0 + x1) // 2
    return [
        RegionBox(cx - side // 2, cy - side // 2, side, side).clipped(sample.pixels.shape)
    ]


def load_bundle(checkpoint, detector_json=None) -> ServiceBundle:
    model, meta = load_multihead_checkpoint(checkpoint)
    version = f"multihead-{meta.get('fold', 'x')}-{Path(checkpoint).name}"
    proposer = detection_json_proposer(detector_json) if detector_json else brightness_proposer
    return ServiceBundle(model=model, model_version=version, proposer=proposer)


def _decode_upload(data: bytes, channels: int) -> ImageSample:
    try:
        img = Image.open(io.BytesIO(data))
        img_format = img.format
        img.load()
    except Exception as exc:
        raise ManifestError(f"cannot decode image: {exc}") from exc
    if img_format not in ACCEPTED_FORMATS:
        raise ManifestError(f"unsupported format {img_format!r}; accepted: {ACCEPTED_FORMATS}")
    return pixels_from_pil(img, None, channels)


def _region_payload(region_prediction) -> dict:
    g = region_prediction
    subtype = np.asarray(g.probabilities["tumor_subtype"], dtype=float)
    location = np.asarray(g.probabilities["location"], dtype=float)
    fracture = np.asarray(g.probabilities["fracture"], dtype=float)
    names = {grp.name: grp.class_names for grp in DEFAULT_HEAD_LAYOUT.groups}
    top_k = np.argsort(-location)[:LOCATION_TOP_K]
    return {
        "box": {"x": g.box.x, "y": g.box.y, "w": g.box.w, "h": g.box.h},
        "location_top_k": [
            {"name": names["location"][int(i)], "probability": float(location[int(i)])} for i in top_k
        ],
        "probabilities": {
            "abnormality": float(g.probabilities["abnormality"]),
            "tumor_subtype": {n: float(v) for n, v in zip(names["tumor_subtype"], subtype)},
            "location": {n: float(v) for n, v in zip(names["location"], location)},
            "fracture": {n: float(v) for n, v in zip(names["fracture"], fracture)},
            "implant": float(g.probabilities["implant"]),
        },
    }


def predict_payload(bundle: ServiceBundle, sample: ImageSample, threshold: float) -> dict:
    """Full response document for one image at one decision threshold."""
    boxes = propose_regions(sample, bundle.proposer or brightness_proposer)
    preds = predict_regions(bundle.model, sample, boxes)
    agg: ImagePrediction = aggregate_image(preds, tumor_threshold=threshold)
    return {
        "schema_version": SCHEMA_VERSION,
        "image_id": sample.id,
        "model_version": bundle.model_version,
        "regions": [_region_payload(p) for p in preds],
        "image_level": {
            "tumor_positive": agg.tumor_positive,
            "malignancy": agg.malignancy,
            "max_probability_malignant": agg.max_p_malignant,
            "abnormality_positive": agg.abnormality_positive,
            "fracture_positive": agg.fracture_positive,
            "implant_positive": agg.implant_positive,
            "threshold": threshold,
            "trigger": agg.thresholds["trigger"],
        },
    }


def create_app(bundle: ServiceBundle) -> FastAPI:
    app = FastAPI(title="mskbench inference service", version=__version__)

    @app.get("/health")
    def health():
        return {"status": "ok", "model_version": bundle.model_version}

    @app.get("/version")
    def version():
        return {
            "version": __version__,
            "model_version": bundle.model_version,
            "schema_version": SCHEMA_VERSION,
        }

    @app.post("/predict")
    def predict(
        file: UploadFile = File(...),
        threshold: float = Query(0.5, ge=0.0, le=1.0),
    ):
        data = file.file.read(MAX_UPLOAD_BYTES + 1)
        if len(data) > MAX_UPLOAD_BYTES:
            return JSONResponse(status_code=413, content={"detail": "upload exceeds 32 MB"})
        try:
            sample = _decode_upload(data, bundle.model.backbone_config.channels)
            sample.id = Path(file.filename or "upload").stem
        except ManifestError as exc:
            return JSONResponse(status_code=400, content={"detail": str(exc)})
        try:
            return predict_payload(bundle, sample, threshold)
        except Exception:  # noqa: BLE001 - opaque id to the client, details to the log
            error_id = uuid.uuid4().hex
            logger.exception("inference failure %s", error_id)
            return JSONResponse(status_code=500, content={"detail": "inference failure", "error_id": error_id})

    return app


def serve(checkpoint, detector_json=None, host: str = "127.0.0.1", port: int = 8000, log_level: str = "info"):
    """Load one checkpoint and block serving it (restart to swap models)."""
    import uvicorn

    bundle = load_bundle(checkpoint, detector_json)
    app = create_app(bundle)
    uvicorn.run(app, host=host, port=port, log_level=log_level)
