"""Shared fixtures: tiny configurations, seeded generators and rendered samples."""

from pathlib import Path
from typing import List

import numpy as np
import pytest
import torch

from vl_reader.models import ModelConfig, RunConfig
from vl_reader.network import VLReader
from vl_reader.synthdata import TextImage, build_dataset, render
from vl_reader.textcodec import Charset

TINY_CHARSET = "abcdef"
TINY_GEOMETRY = dict(image_height=16, image_width=32, patch_h=4, patch_w=8)
TINY_LABELS = ["abc", "fed", "a", "cafe", "bead", "dab", "ace", "fa"]


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def charset() -> Charset:
    return Charset(chars=TINY_CHARSET, max_label_len=6)


@pytest.fixture
def tiny_config() -> ModelConfig:
    """Two decoder layers over a 4 x 4 patch grid."""
    return ModelConfig(
        charset=TINY_CHARSET,
        max_label_len=6,
        d_model=16,
        n_heads=2,
        enc_depth=1,
        dec_depth=2,
        mlp_ratio=2.0,
        **TINY_GEOMETRY,
    )


@pytest.fixture
def tiny_run_config(tiny_config: ModelConfig) -> RunConfig:
    return RunConfig(
        **tiny_config.model_dump(exclude={"permutations"}),
        batch_size=4,
        mvlr_epochs=1,
        finetune_epochs=1,
        mvlr_lr=1e-3,
        finetune_lr=1e-3,
        permutations=3,
        prefetch=0,
        data_max_len=4,
    )


@pytest.fixture
def tiny_model(tiny_config: ModelConfig) -> VLReader:
    torch.manual_seed(0)
    return VLReader(tiny_config).eval()


@pytest.fixture
def double_model(tiny_config: ModelConfig) -> VLReader:
    """Float64 copy for exact-equality and finite-difference checks."""
    torch.manual_seed(0)
    return VLReader(tiny_config).double().eval()


@pytest.fixture
def tiny_images() -> List[TextImage]:
    images = []
    for index, label in enumerate(TINY_LABELS):
        img = render(label, np.random.default_rng(index), height=16, width=32)
        images.append(img.model_copy(update={"name": f"img/{index:06d}.pgm"}))
    return images


@pytest.fixture
def tiny_dataset(tmp_path: Path, charset: Charset) -> Path:
    """Eight samples on disk in the manifest format."""
    out = tmp_path / "data"
    build_dataset(out, 8, charset, (1, 4), None, seed=0, height=16, width=32)
    return out
