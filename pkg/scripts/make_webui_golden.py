"""Generate the golden PredictResponse fixtures for the web UI parity tests.

Runs the service's prediction pipeline (through its public payload builder)
over a grid of seeded models and synthetic images, and writes each full
response document, including the server-side image_level labels at the
default threshold 0.5, to frontend/tests/fixtures/golden/.

Usage: python scripts/make_webui_golden.py
"""

from __future__ import annotations

import json
from pathlib import Path

import torch

torch.set_num_threads(1)

from mskbench.datamodel import ImageSample  # noqa: E402
from mskbench.mae import MaeConfig  # noqa: E402
from mskbench.multihead import MultiHeadModel  # noqa: E402
from mskbench.service import ServiceBundle, predict_payload  # noqa: E402
from mskbench.synthgen import AnomalySpec, generate_normal, inject_anomaly  # noqa: E402

OUT_DIR = Path(__file__).resolve().parents[1] / "frontend" / "tests" / "fixtures" / "golden"


def sample_for(index: int) -> ImageSample:
    base = generate_normal(1000 + index, (64, 64))
    kind = index % 4
    if kind == 0:
        return base
    spec = {
        1: AnomalySpec("tumor_blob", (32, 32), 6.0, 0.32, variant="benign"),
        2: AnomalySpec("fracture_gap", (32, 32), 5.0, -0.6, variant="simple"),
        3: AnomalySpec("implant_bar", (32, 32), 3.5, 0.55),
    }[kind]
    out, _mask = inject_anomaly(base, spec, seed=index)
    return out


def main():
    OUT_DIR.mkdir(parents=True, exist_ok=True)
    n = 0
    for model_seed in range(5):
        torch.manual_seed(model_seed * 31 + 1)
        model = MultiHeadModel(MaeConfig.toy())
        model.eval()
        bundle = ServiceBundle(model=model, model_version=f"golden-{model_seed}")
        for image_index in range(4):
            sample = sample_for(model_seed * 4 + image_index)
            sample.id = f"golden-{model_seed}-{image_index}"
            payload = predict_payload(bundle, sample, threshold=0.5)
            path = OUT_DIR / f"{sample.id}.json"
            path.write_text(json.dumps(payload, indent=1, sort_keys=True))
            n += 1
    print(f"wrote {n} golden responses to {OUT_DIR}")


if __name__ == "__main__":
    main()
