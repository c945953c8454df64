import numpy as np
import pytest
import torch
from src.errors import ConfigurationError
from src.map_codec import segment_polylines
from src.metrics import boxes_overlap
from src.model import ModelConfig, SceneStreamerModel
from src.rollout_engine import RolloutConfig, RolloutEngine, read_log, replay_from_log, rollout
from src.scenario_synth import synth_scenario
from src.sequence_builder import count_tokens
from src.state_codec import FieldRanges


@pytest.fixture
def sample_model():
    """Untrained tiny model; rollouts only need valid distributions."""
    torch.manual_seed(0)
    return SceneStreamerModel(ModelConfig(d_model=16, heads=2, encoder_layers=1, decoder_layers=1, rs_head_layers=1,
                                          relative_dim=4, max_segments=512, max_agents=16))


@pytest.fixture
def sample_scenario():
    return synth_scenario("straight", 3, seed=0, num_steps=5)


@pytest.fixture
def sample_segments(sample_scenario):
    return segment_polylines(sample_scenario)


def _active_at(records, agent_id, t):
    """Whether the log shows the agent in the scene at step t."""
    retired = [r["step"] for r in records if r["event"] == "retire" and r["agent_id"] == agent_id]
    return not retired or retired[0] > t


def test_motion_prediction_keeps_population(sample_model, sample_scenario, sample_segments):
    config = RolloutConfig(mode="motion_prediction", seed=1)
    exported, engine = rollout(sample_model, sample_scenario, sample_segments, config)
    assert exported.num_steps == 5 and len(exported.agents) == 3, "No agent enters or leaves"
    assert all(agent.valid.all() for agent in exported.agents)
    assert engine.sim.injected == 0 and not engine.sim.retired
    for agent in exported.agents:
        logged = sample_scenario.agent_by_id(agent.agent_id)
        assert np.allclose(agent.poses[:3], logged.poses[:3], atol=1e-6), "The first two motions follow the log"
    motion = [r for r in engine.sim.log if r["event"] == "motion"]
    assert [r["data"]["forced"] for r in motion] == [True] * 6 + [False] * 6


def test_motion_prediction_token_count(sample_model, sample_scenario, sample_segments):
    _, engine = rollout(sample_model, sample_scenario, sample_segments, RolloutConfig(mode="motion_prediction"))
    assert len(engine.sim.sequence) == count_tokens(0, [3] * 4, "full")


def test_pretrained_motion_prediction(sample_model, sample_scenario, sample_segments):
    _, engine = rollout(sample_model, sample_scenario, sample_segments, RolloutConfig(mode="motion_prediction"),
                        stage="pretrain")
    assert engine.sim.sequence.group_counts()["AS_START"] == 0, "Pretrained models run without agent states"
    assert len(engine.sim.sequence) == count_tokens(0, [3] * 4, "pretrain")


def test_seeded_rollouts_repeat(sample_model, sample_scenario, sample_segments):
    config = RolloutConfig(mode="densification", seed=7, max_agents=6, force_end_logit_off=True)
    first, first_engine = rollout(sample_model, sample_scenario, sample_segments, config)
    second, second_engine = rollout(sample_model, sample_scenario, sample_segments, config)
    assert first == second, "Equal seeds should give identical rollouts"
    assert first_engine.sim.log == second_engine.sim.log


def test_replay_rebuilds_trajectories(sample_model, sample_scenario, sample_segments, tmp_path):
    config = RolloutConfig(mode="densification", seed=3, max_agents=6, force_end_logit_off=True)
    exported, engine = rollout(sample_model, sample_scenario, sample_segments, config)
    records = read_log(engine.write_log(tmp_path / "rollout.log.jsonl"))
    assert records[0]["event"] == "header"
    for source, tolerance in ((engine.sim.log, 1e-12), (records, 1e-6)):
        tracks = replay_from_log(source)
        assert set(tracks) == {agent.agent_id for agent in exported.agents}
        for agent in exported.agents:
            first, poses = tracks[agent.agent_id]
            valid = np.flatnonzero(agent.valid)
            assert first == valid[0]
            assert np.allclose(poses, agent.poses[valid], atol=tolerance), "Replay should reproduce the poses"


def test_injected_agents_do_not_overlap(sample_model, sample_scenario, sample_segments):
    config = RolloutConfig(mode="densification", seed=5, max_agents=6, force_end_logit_off=True)
    exported, engine = rollout(sample_model, sample_scenario, sample_segments, config)
    log = engine.sim.log
    tracks = replay_from_log(log)
    injections = [r for r in log if r["event"] == "inject"]
    assert engine.sim.injected == len(injections)
    assert all(r["agent_id"] >= 3 for r in injections), "Fresh ids start after the logged ones"
    for record in injections:
        t = record["step"]
        for agent in exported.agents:
            first, poses = tracks[agent.agent_id]
            if agent.agent_id == record["agent_id"] or not first <= t < first + len(poses):
                continue
            if agent.agent_id > record["agent_id"] or not _active_at(log, agent.agent_id, t):
                continue
            assert not boxes_overlap(record["data"]["pose"], record["data"]["shape"], poses[t - first],
                                     agent.shape), "An injected box overlaps an agent already in the scene"


def test_token_count_follows_population(sample_model, sample_scenario, sample_segments):
    config = RolloutConfig(mode="densification", seed=2, max_agents=6, force_end_logit_off=True)
    _, engine = rollout(sample_model, sample_scenario, sample_segments, config)
    per_step = [sum(1 for tok in engine.sim.sequence.tokens if tok.group == "MO" and tok.step == t)
                for t in range(4)]
    assert len(engine.sim.sequence) == count_tokens(0, per_step, "full")
    assert max(per_step) <= 6, "The population never exceeds max_agents"


def test_far_agent_is_retired(sample_model, sample_scenario, sample_segments):
    sample_scenario.agents[2].poses[0, :2] = (500.0, 500.0)
    config = RolloutConfig(mode="densification", target_agents=0)
    exported, engine = rollout(sample_model, sample_scenario, sample_segments, config)
    assert 2 in engine.sim.retired and 2 not in engine.sim.active
    assert [r["step"] for r in engine.sim.log if r["event"] == "retire" and r["agent_id"] == 2] == [1]
    assert exported.agent_by_id(2).valid.tolist() == [True, True, False, False, False]
    assert 0 in engine.sim.active, "The ego is never retired"


def test_oversized_placements_fail(sample_model, sample_scenario, sample_segments):
    ranges = FieldRanges(length=(500.0, 501.0), width=(500.0, 501.0))
    config = RolloutConfig(mode="densification", max_agents=6, retries=3, force_end_logit_off=True,
                           retire_margin=1000.0)
    exported, engine = rollout(sample_model, sample_scenario, sample_segments, config, ranges)
    failures = [r for r in engine.sim.log if r["event"] == "injection_failed"]
    assert engine.sim.injected == 0 and len(failures) == 4, "Every step gives up after its retries"
    assert all(r["data"]["attempts"] == 3 for r in failures)
    assert len(exported.agents) == 3
    assert engine.sim.sequence.group_counts()["AS_SOA"] == 3 * 4, "Failed placements leave no tokens behind"


def test_closed_loop_follows_external_ego(sample_model, sample_scenario, sample_segments):
    config = RolloutConfig(mode="closed_loop", seed=4, max_agents=5)
    exported, engine = rollout(sample_model, sample_scenario, sample_segments, config)
    ego = exported.sdc
    assert ego.agent_id == sample_scenario.sdc.agent_id
    assert np.allclose(ego.poses, sample_scenario.sdc.poses, atol=1e-6), "The ego follows its external trajectory"
    assert sum(1 for r in engine.sim.log if r["event"] == "override") == 4


def test_invalid_setups(sample_model, sample_segments):
    with pytest.raises(ConfigurationError):
        RolloutEngine(sample_model, sample_segments, RolloutConfig(mode="densification"), stage="pretrain")
    with pytest.raises(ConfigurationError):
        RolloutEngine(sample_model, sample_segments, RolloutConfig(), FieldRanges(num_bins=41))
    with pytest.raises(ConfigurationError):
        RolloutEngine(sample_model, [], RolloutConfig())
    with pytest.raises(ConfigurationError):
        RolloutConfig(mode="replay")
    with pytest.raises(ConfigurationError):
        RolloutConfig(strategies={"motion": "beam"})
    assert RolloutConfig(type_targets={"pedestrian": "2"}).type_targets == {1: 2}
