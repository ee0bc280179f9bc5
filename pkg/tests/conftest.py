import os
import tempfile

os.environ.setdefault("GLYPHDIFF_LOG_DIR", tempfile.mkdtemp(prefix="glyphdiff-logs-"))

import numpy as np
import pytest
import torch
from PIL import Image

from backbone import BackboneConfig
from data_ingestion import ImageRecord, stratified_split, write_manifest
from schedule import make_schedule
from toy_glyphs import make_toy_glyph_dataset


def tiny_backbone(class_count=3, image_size=32, timesteps=10, **overrides):
    """Two-level, 8-channel U-Net that runs in well under a second on a CPU."""
    params = dict(
        class_count=class_count,
        image_size=image_size,
        timesteps=timesteps,
        base_channels=8,
        channel_multipliers=(1, 2),
        blocks_per_level=1,
        se_reduction=4,
        attention_heads=2,
        dropout=0.0,
        attention_levels=(1,),
        norm_groups=4,
    )
    params.update(overrides)
    return BackboneConfig(**params)


def half_dark_manifest(out_dir, per_class=20, seed=0):
    """K=2: class 0 dark on the left half, class 1 dark on the right half."""
    records = []
    for label in (0, 1):
        folder = os.path.join(out_dir, f"side_{label}")
        os.makedirs(folder, exist_ok=True)
        rng = np.random.default_rng([seed, label])
        for i in range(per_class):
            arr = np.full((32, 32), 230, dtype=np.uint8)
            cols = slice(0, 16) if label == 0 else slice(16, 32)
            arr[:, cols] = 25
            arr = np.clip(arr.astype(int) + rng.integers(-10, 11, arr.shape), 0, 255).astype(np.uint8)
            path = os.path.abspath(os.path.join(folder, f"img_{i:03d}.png"))
            Image.fromarray(arr).save(path)
            records.append(ImageRecord(path, label, "train"))
    manifest = stratified_split(records, (0.6, 0.2, 0.2), seed, 2, ("left", "right"), 32, out_dir)
    return manifest, write_manifest(manifest, os.path.join(out_dir, "manifest.txt"))


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)
    yield


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    """3 classes × 10 glyphs → 8/1/1 per class."""
    out = tmp_path_factory.mktemp("toy")
    return make_toy_glyph_dataset(str(out), classes=3, per_class=10, seed=0)


@pytest.fixture
def sched10():
    return make_schedule("linear", 10, 1e-4, 0.02)


@pytest.fixture
def backbone_cfg():
    return tiny_backbone()
