import pytest

from erp_forge import config as cfgmod
from erp_forge.augment import ShiftSet
from erp_forge.spatial import DEFAULT_GRID


def test_defaults_round_trip():
    cfg = cfgmod.RunConfig()
    back = cfgmod.from_dict(cfgmod.tomllib.loads(cfg.to_toml()))
    assert back == cfg
    assert back.to_toml() == cfg.to_toml()


def test_custom_round_trip(tmp_path):
    doc = {
        "seed": 7,
        "model": {"pipeline": "3d", "variant": "deep", "loss": "focal", "focal_gamma": 1.5},
        "eval": {"folds": 4, "tta": False},
        "preprocess": {"shifts": [-1, 0, 1], "spatial": "grid"},
        "train": {"max_epochs": 3, "batch_size": 16},
        "synth": {"n_participants": 2, "noise_band_hz": [0.5, 20.0]},
    }
    cfg = cfgmod.from_dict(doc)
    assert cfg.preprocess.shifts == ShiftSet((-1, 0, 1))
    assert cfg.train.max_epochs == 3 and cfg.synth.noise_band_hz == (0.5, 20.0)
    exp = cfg.experiment()
    assert exp.name == "3d-deep" and not exp.use_tta
    path = tmp_path / "c.toml"
    cfg.save(path)
    loaded = cfgmod.load(path)
    assert loaded.preprocess == cfg.preprocess and loaded.train == cfg.train and loaded.synth == cfg.synth
    assert loaded.preprocess.grid == DEFAULT_GRID


def test_relative_paths_resolve_against_config_dir(tmp_path):
    (tmp_path / "d").mkdir()
    for n in ("b.bdf", "a.bdf"):
        (tmp_path / "d" / n).write_bytes(b"")
    path = tmp_path / "c.toml"
    path.write_text('output_dir = "res"\n[data]\nsource = "bdf"\nbdf_paths = ["d/*.bdf"]\n')
    cfg = cfgmod.load(path)
    assert cfg.output_dir == str(tmp_path / "res")
    assert cfg.bdf_paths == [str(tmp_path / "d" / "a.bdf"), str(tmp_path / "d" / "b.bdf")]


@pytest.mark.parametrize("doc", [
    {"nonsense": 1},
    {"model": {"colour": "red"}},
    {"train": {"epochs": 3}},
    {"synth": {"snr": 3}},
    {"data": {"source": "ftp"}},
    {"model": {"pipeline": "4d"}},
    {"model": {"pipeline": "csp2d", "variant": "deep"}},
    {"model": {"loss": "hinge"}},
    {"preprocess": {"shifts": [0, 0]}},
    {"preprocess": {"spatial": "sphere"}},
    {"train": {"max_epochs": 0}},
])
def test_invalid_documents(doc):
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.from_dict(doc)


def test_bad_toml(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("seed = = 1\n")
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.load(path)
