from pathlib import Path

import pytest

from hsi_src.errors import ConfigError
from hsi_src.run_config import RunConfig, THREADS_ENV, build_run_config, load_run_config, worker_count

CONFIG_DIR = Path(__file__).resolve().parents[1] / "hsi_experiments" / "configs"


def test_empty_document_gives_default_settings():
    cfg = build_run_config({})
    assert cfg.patch_size == 7
    assert cfg.kernels_per_layer == 24
    assert cfg.dense_widths == [512, 256, 128]
    assert cfg.learning_rate == 1e-4
    assert cfg.batch_size == 64
    assert cfg.patience == 15
    assert cfg.max_epochs == 200
    assert cfg.runs == 5 and cfg.folds == 5

    net = cfg.network_config(bands=200, num_classes=16)
    assert net.flatten_size == 4656
    tc = cfg.train_config()
    assert (tc.beta1, tc.beta2, tc.epsilon) == (0.9, 0.999, 1e-8)


def test_unknown_and_mistyped_keys_are_rejected():
    with pytest.raises(ConfigError):
        build_run_config({"learning_rat": 0.1})
    with pytest.raises(ConfigError):
        build_run_config({"runs": "five"})
    with pytest.raises(ConfigError):
        build_run_config({"per_channel_kernels": 1})
    with pytest.raises(ConfigError):
        build_run_config({"dense_widths": [64, "x"]})
    with pytest.raises(ConfigError):
        build_run_config({"augmentation": "shear"})
    with pytest.raises(ConfigError):
        build_run_config({"patch_size": 6})
    with pytest.raises(ConfigError):
        build_run_config({"patience": 300})


def test_exponent_strings_are_read_as_floats(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("learning_rate: 1e-3\nepsilon: 1e-8\n", encoding="utf-8")
    cfg = load_run_config(path)
    assert cfg.learning_rate == pytest.approx(1e-3)
    assert cfg.epsilon == pytest.approx(1e-8)


def test_relative_paths_resolve_against_the_config(tmp_path):
    (tmp_path / "sub").mkdir()
    path = tmp_path / "sub" / "c.yaml"
    path.write_text("cube: data/cube.hdr\nlabels: /abs/labels.hdr\n", encoding="utf-8")
    cfg = load_run_config(path, overrides={"runs": 2, "folds": None})
    assert Path(cfg.cube) == tmp_path / "sub" / "data" / "cube.hdr"
    assert cfg.labels == "/abs/labels.hdr"
    assert cfg.runs == 2 and cfg.folds == 5


def test_non_mapping_document_is_rejected(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("- 1\n- 2\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_run_config(path)


def test_method_name_defaults_to_augmentation_variant():
    assert RunConfig(augmentation="rotate").method_name == "ours-rotate"
    assert RunConfig(method="baseline").method_name == "baseline"


@pytest.mark.parametrize("name", ["default.yaml", "desk.yaml"])
def test_shipped_configs_parse(name):
    cfg = load_run_config(CONFIG_DIR / name)
    assert cfg.cube.endswith("cube.hdr")


def test_worker_count(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert worker_count() == 1
    monkeypatch.setenv(THREADS_ENV, "4")
    assert worker_count() == 4
    monkeypatch.setenv(THREADS_ENV, "0")
    assert worker_count() == 1
    monkeypatch.setenv(THREADS_ENV, "many")
    with pytest.raises(ConfigError):
        worker_count()
