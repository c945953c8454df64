import json

import numpy as np
import pytest
from src.errors import ScenarioFormatError, ScenarioValidationError
from src.scenario_model import ScenarioDescription, load_scenario, save_scenario
from src.scenario_synth import synth_scenario


@pytest.fixture
def sample_scenario():
    """A small straight-road scenario."""
    return synth_scenario("straight", 4, seed=0)


def test_save_load_roundtrip(sample_scenario, tmp_path):
    path = save_scenario(sample_scenario, tmp_path / "scenario.json")
    loaded = load_scenario(path)
    assert loaded == sample_scenario, "A saved scenario should load back unchanged"
    assert loaded.sdc.agent_id == sample_scenario.sdc.agent_id


def test_dict_roundtrip_is_stable(sample_scenario):
    document = sample_scenario.to_dict()
    assert ScenarioDescription.from_dict(document).to_dict() == document


def test_malformed_json_names_line(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{\n  "scenario_id": "x",\n  "agents": [\n', encoding="utf-8")
    with pytest.raises(ScenarioFormatError) as info:
        load_scenario(path)
    assert info.value.line is not None, "Parse errors should carry the line number"


def test_missing_key_names_field(sample_scenario):
    document = sample_scenario.to_dict()
    del document["agents"][0]["shape"]
    with pytest.raises(ScenarioFormatError) as info:
        ScenarioDescription.from_dict(document)
    assert info.value.field == "agents[0].shape"


def test_validation_names_offending_field(sample_scenario, tmp_path):
    document = sample_scenario.to_dict()
    document["agents"][1]["shape"] = [-1.0, 2.0, 1.5]
    path = tmp_path / "bad_shape.json"
    path.write_text(json.dumps(document), encoding="utf-8")
    with pytest.raises(ScenarioValidationError) as info:
        load_scenario(path)
    assert info.value.field == "agents[1].shape"


def test_validation_rejects_wrong_length(sample_scenario):
    sample_scenario.traffic_lights = []
    sample_scenario.num_steps += 1
    with pytest.raises(ScenarioValidationError):
        sample_scenario.validate()


def test_agent_lookup(sample_scenario):
    assert sample_scenario.agent_by_id(2).agent_id == 2
    with pytest.raises(KeyError):
        sample_scenario.agent_by_id(99)


def test_speed_is_projection_on_heading(sample_scenario):
    agent = sample_scenario.agents[0]
    expected = np.linalg.norm(agent.velocities[3])
    assert agent.speed(3) == pytest.approx(expected), "Synthetic agents move along their heading"


def test_light_segment_must_exist(tmp_path):
    document = synth_scenario("intersection", 2, seed=0, num_steps=3).to_dict()
    document["traffic_lights"][0]["segment"] = 10_000
    path = tmp_path / "bad_light.json"
    path.write_text(json.dumps(document), encoding="utf-8")
    with pytest.raises(ScenarioValidationError) as info:
        load_scenario(path)
    assert info.value.field == "traffic_lights[0].segment", "Lights must attach to an existing segment"
