"""Shared fixtures: synthetic corpora and the two trained desk-scale models.

The expensive fixtures (pretrained autoencoder, cross-validated multi-head
run) are session-scoped so every test and acceptance criterion shares one
training run.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import pytest
import torch

torch.set_num_threads(1)

from mskbench import datamodel as dm
from mskbench import mae
from mskbench import multihead as mh
from mskbench import synthgen as sg

warnings.filterwarnings("ignore", message="macro AUROC")


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory) -> dm.DatasetManifest:
    """60 normal + 60 abnormal 64 x 64 images; cheap enough for most tests."""
    out = tmp_path_factory.mktemp("small_corpus")
    spec = sg.CorpusSpec(n_normal=60, n_abnormal=60, size=(64, 64), seed=11)
    return sg.build_corpus(spec, out)


@dataclass
class ZeroShotSetup:
    manifest: dm.DatasetManifest
    model: mae.MaskedAutoencoder
    checkpoint: Path
    train_ids: list
    test_normal_ids: list
    test_abnormal_ids: list
    train_seconds: float


@pytest.fixture(scope="session")
def zero_shot_setup(tmp_path_factory) -> ZeroShotSetup:
    """Toy autoencoder (patch 8, encoder 2 x 64) trained on ~2,000 synthetic normals."""
    out = tmp_path_factory.mktemp("zero_shot")
    spec = sg.CorpusSpec(n_normal=2100, n_abnormal=100, size=(64, 64), seed=42)
    manifest = sg.build_corpus(spec, out)

    normal_ids = [e.id for e in manifest.entries if e.id.startswith("n")]
    train_ids = normal_ids[:2000]
    test_normal_ids = normal_ids[2000:2100]
    test_abnormal_ids = [e.id for e in manifest.entries if e.id.startswith("a")]

    train_manifest = dm.DatasetManifest(
        tasks=manifest.tasks,
        entries=[e for e in manifest.entries if e.id in set(train_ids)],
        root=manifest.root,
    )
    config = mae.MaeConfig.toy(epochs=30, seed=0)
    t0 = time.time()
    result = mae.pretrain(train_manifest, config, out / "mae")
    train_seconds = time.time() - t0
    model, _ = mae.load_checkpoint(result.best_checkpoint)
    return ZeroShotSetup(
        manifest=manifest,
        model=model,
        checkpoint=result.best_checkpoint,
        train_ids=train_ids,
        test_normal_ids=test_normal_ids,
        test_abnormal_ids=test_abnormal_ids,
        train_seconds=train_seconds,
    )


@dataclass
class MultiheadSetup:
    manifest: dm.DatasetManifest
    plan: dm.SplitPlan
    config: mh.MultiheadConfig
    result: mh.MultiheadCvResult
    run_dir: Path
    train_seconds: float


@pytest.fixture(scope="session")
def multihead_setup(tmp_path_factory) -> MultiheadSetup:
    """5-fold cross-validated five-head training on the synthetic region corpus."""
    out = tmp_path_factory.mktemp("multihead")
    spec = sg.CorpusSpec(
        n_normal=480,
        n_abnormal=480,
        size=(64, 64),
        seed=7,
        anomaly_mix={"tumor_blob": 0.45, "fracture_gap": 0.35, "implant_bar": 0.2},
    )
    manifest = sg.build_corpus(spec, out)
    plan = dm.make_splits(
        manifest, test_frac=0.1, k=5, seed=0, stratify_key="abnormality", group_key="patient_id"
    )
    config = mh.MultiheadConfig.desk(epochs=60, seed=0, base_lr=1.5e-3)
    t0 = time.time()
    result = mh.train_multihead(manifest, plan, config, out_dir=out / "run")
    train_seconds = time.time() - t0
    return MultiheadSetup(
        manifest=manifest,
        plan=plan,
        config=config,
        result=result,
        run_dir=out / "run",
        train_seconds=train_seconds,
    )


@pytest.fixture(scope="session")
def service_client(multihead_setup):
    """TestClient over the bundled best-fold checkpoint of the multi-head run."""
    from fastapi.testclient import TestClient

    from mskbench import service as sv

    bundle = sv.load_bundle(multihead_setup.run_dir / "serve")
    app = sv.create_app(bundle)
    with TestClient(app, raise_server_exceptions=False) as client:
        yield client
