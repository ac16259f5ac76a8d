import sys
from pathlib import Path

import pytest
import yaml

# Make repo root importable when running from anywhere
ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from hsi_src.dataset import save_cube, synth_scene  # noqa: E402
from hsi_src.tensor_core import SeededRng  # noqa: E402

# Small enough to train in seconds: 5×5 patches, two conv levels, narrow dense block
TINY_RUN = {
    "dataset_name": "tiny",
    "patch_size": 5,
    "num_conv_layers": 2,
    "kernels_per_layer": 2,
    "dense_widths": [8],
    "max_epochs": 3,
    "patience": 2,
    "batch_size": 32,
    "learning_rate": 1.0e-3,
    "folds": 2,
    "block_size": 16,
    "runs": 1,
    "base_seed": 3,
}


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="also run tests marked slow")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size training runs, skipped unless --runslow is given")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow", default=False):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_scene():
    return synth_scene(SeededRng(11), 32, 32, 12, 3, 0.05)


@pytest.fixture
def scene_files(tmp_path, tiny_scene):
    cube, labels = tiny_scene
    cube_hdr, labels_hdr = tmp_path / "scene" / "cube.hdr", tmp_path / "scene" / "labels.hdr"
    save_cube(cube, labels, cube_hdr, labels_hdr)
    return cube_hdr, labels_hdr


@pytest.fixture
def tiny_config_file(tmp_path, scene_files):
    cube_hdr, labels_hdr = scene_files
    raw = dict(TINY_RUN, cube=str(cube_hdr), labels=str(labels_hdr), out_dir=str(tmp_path / "out"))
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(raw), encoding="utf-8")
    return path
