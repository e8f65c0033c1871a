import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from teamid.data import generate_synthetic
from teamid.model import AttentionConfig, ModelDescriptor, build_model


@pytest.fixture(scope="session")
def tiny_view():
    """4 brands x 2 ids x 3 views at low resolution; train only."""
    return generate_synthetic(4, 2, 3, seed=11, resolution=32)


@pytest.fixture(scope="session")
def holdout_view():
    """3 brands x 3 ids x 4 views with one held-out identity per brand."""
    return generate_synthetic(3, 3, 4, seed=5, resolution=32,
                              holdout_ids_per_brand=1)


@pytest.fixture()
def fixture_tree(tmp_path):
    """Hand-listable 3-identity, 6-image cars196-style tree."""
    from PIL import Image

    rng = np.random.default_rng(0)
    layout = {
        "train": {"ford_f150": 2, "honda_civic": 2},
        "test": {"tesla_s": 2},
    }
    files = []
    for split, classes in layout.items():
        for cname, count in classes.items():
            d = tmp_path / "cars" / split / cname
            d.mkdir(parents=True)
            for i in range(count):
                arr = rng.integers(0, 255, (32, 32, 3), dtype=np.uint8)
                f = d / f"{cname}_{i}.jpg"
                Image.fromarray(arr).save(f)
                files.append(f)
    return tmp_path / "cars", files


@pytest.fixture(scope="session")
def small_model():
    desc = ModelDescriptor(
        attention=AttentionConfig(cbam_placement="first_block", ga_enabled=True),
        embedding_dim=512, input_resolution=32)
    return build_model(desc, seed=3)
