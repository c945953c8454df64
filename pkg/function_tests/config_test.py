import pytest
from src.config import RunConfig, dump_config, load_config, print_config
from src.errors import ConfigurationError


@pytest.fixture
def sample_ini(tmp_path):
    """A config file touching several sections."""
    path = tmp_path / "run.ini"
    path.write_text(
        "[paths]\ncorpus = data/corpus\n\n"
        "[model]\nd_model = 32\nheads = 2\n\n"
        "[training]\ntotal_steps = 10\nlr = 0.001\n\n"
        "[rollout]\nmode = densification\ntype_targets = vehicle: 3, pedestrian: 1\n\n"
        "[quantizer]\nu = -20, 20\n\n"
        "[seeds]\nglobal = 7\n",
        encoding="utf-8")
    return path


def test_defaults():
    config = load_config()
    assert config == RunConfig(), "No file and no flags keep the defaults"
    assert config.quantizer.num_bins == config.model.rs_bins == 81


def test_file_values(sample_ini):
    config = load_config(sample_ini)
    assert config.paths["corpus"] == "data/corpus" and config.paths["outputs"] == "outputs"
    assert config.model.d_model == 32 and config.model.heads == 2
    assert config.training.total_steps == 10 and config.training.lr == pytest.approx(1e-3)
    assert config.rollout.mode == "densification" and config.rollout.type_targets == {0: 3, 1: 1}
    assert config.quantizer.u == (-20.0, 20.0)
    assert config.seed == 7 and config.training.seed == 7 and config.rollout.seed == 7, \
        "The global seed feeds the component seeds"


def test_flags_override_file(sample_ini):
    config = load_config(sample_ini, {"training.total_steps": 3, "seeds.global": 11, "rollout.horizon": None})
    assert config.training.total_steps == 3 and config.seed == 11
    assert config.rollout.horizon is None, "Absent flags leave the value alone"


def test_unknown_entries(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[model]\nwidth = 3\n", encoding="utf-8")
    with pytest.raises(ConfigurationError, match="model.width"):
        load_config(path)
    path.write_text("[optimizer]\nlr = 3\n", encoding="utf-8")
    with pytest.raises(ConfigurationError):
        load_config(path)
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "absent.ini")


def test_cross_checks():
    with pytest.raises(ConfigurationError):
        load_config(overrides={"quantizer.num_bins": 41})
    with pytest.raises(ConfigurationError):
        load_config(overrides={"tokenizer.max_agents": 500})
    with pytest.raises(ConfigurationError):
        load_config(overrides={"tokenizer.points_per_segment": 20})
    with pytest.raises(ConfigurationError):
        load_config(overrides={"training.lr": "fast"})


def test_dump_and_reload(sample_ini, tmp_path):
    config = load_config(sample_ini)
    print_config(config)
    reloaded = load_config(dump_config(config, tmp_path / "dump.ini"))
    assert reloaded == config, "A dumped configuration should load back unchanged"
