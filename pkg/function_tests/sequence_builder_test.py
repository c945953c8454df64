import numpy as np
import pytest
from src.errors import ConsistencyError
from src.kinematics import MOTION_START
from src.map_codec import segment_polylines
from src.scenario_synth import synth_scenario
from src.sequence_builder import (
    AS_GROUPS, PHASE, Token, TokenSequence, build_sequence, count_tokens, group_causal_mask, knn_mask,
    mask_summary, relative_deltas, token_anchors, tokenize_scenario,
)


@pytest.fixture
def sample_scenario():
    """Intersection scenario with lights, five agents and a short horizon."""
    return synth_scenario("intersection", 5, seed=1, num_steps=4)


@pytest.fixture
def sample_segments(sample_scenario):
    return segment_polylines(sample_scenario)


@pytest.fixture
def full_sequence(sample_scenario, sample_segments):
    return build_sequence(sample_scenario, sample_segments, mode="full")


def _oracle_allows(query, key, q_pos, k_pos):
    """Visibility rules written out token by token."""
    if key.step == query.step and key.group == query.group and query.group in ("TL", "MO"):
        return True
    if query.owner is not None and key.owner == query.owner and key.step < query.step:
        return True
    if key.step == query.step and PHASE[key.group] < PHASE[query.group]:
        return True
    if key.step == query.step - 1:
        return True
    return (key.step == query.step and query.group in AS_GROUPS and key.group in AS_GROUPS
            and k_pos <= q_pos)


def test_token_count_formula(sample_scenario, full_sequence):
    per_step = [len(sample_scenario.agents)] * sample_scenario.num_steps
    expected = count_tokens(len(sample_scenario.traffic_lights), per_step, "full")
    assert len(full_sequence) == expected == 4 * (4 + 2 + 4 * 5 + 5), "Stream length should follow the closed form"


def test_pretrain_has_no_agent_state_tokens(sample_scenario, sample_segments):
    sequence = build_sequence(sample_scenario, sample_segments, mode="pretrain")
    counts = sequence.group_counts()
    assert all(counts[g] == 0 for g in AS_GROUPS), "Pretraining streams carry no agent-state tokens"
    assert len(sequence) == count_tokens(4, [5] * 4, "pretrain")


def test_step_layout(full_sequence):
    step0 = [tok.group for tok in full_sequence.tokens if tok.step == 0]
    assert step0[:4] == ["TL"] * 4 and step0[4] == "AS_START"
    assert step0[5:9] == ["AS_SOA", "AS_TYPE", "AS_MS", "AS_RS"]
    assert step0[25] == "AS_END" and step0[26:] == ["MO"] * 5
    assert [tok.intra for tok in full_sequence.tokens if tok.step == 0 and tok.group == "AS_END"] == [21]


def test_motion_inputs_chain_labels(full_sequence):
    motion = [tok for tok in full_sequence.tokens if tok.group == "MO"]
    for tok in motion:
        if tok.step == 0:
            assert tok.payload["label"] == MOTION_START, "First appearance should use the start label"
        else:
            previous = next(m for m in motion if m.owner_id == tok.owner_id and m.step == tok.step - 1)
            assert tok.payload["label"] == previous.target["motion"], "Input label is the previous target"
    assert all(tok.target is None for tok in motion if tok.step == 3), "The last step has no motion target"


def test_next_targets(full_sequence):
    rs_last = [tok.target["next"] for tok in full_sequence.tokens if tok.group == "AS_RS" and tok.step == 0]
    assert rs_last == [0, 0, 0, 0, 1], "Only the last agent of a step predicts the end of the region"


def random_small_scene(seed):
    """Up to five agents (some with gaps), up to three lights and up to four steps."""
    rng = np.random.default_rng(seed)
    template = ("straight", "curve", "intersection")[int(rng.integers(0, 3))]
    scenario = synth_scenario(template, int(rng.integers(1, 6)), seed=seed, num_steps=int(rng.integers(2, 5)))
    scenario.traffic_lights = scenario.traffic_lights[:int(rng.integers(0, 4))]
    for agent in scenario.agents[1:]:
        agent.valid = rng.random(scenario.num_steps) < 0.8
    return scenario


@pytest.mark.parametrize("seed", range(100))
def test_mask_matches_oracle(seed):
    scenario = random_small_scene(seed)
    sequence = build_sequence(scenario, segment_polylines(scenario), mode="full")
    mask = group_causal_mask(sequence)
    tokens = sequence.tokens
    for q, query in enumerate(tokens):
        for k, key in enumerate(tokens):
            assert mask[q, k] == _oracle_allows(query, key, q, k), f"Mask mismatch at ({q}, {k})"


def test_no_future_step_visible(full_sequence):
    mask = group_causal_mask(full_sequence)
    steps = np.array([tok.step for tok in full_sequence.tokens])
    rows, cols = np.nonzero(mask)
    assert np.all(steps[cols] <= steps[rows]), "Keys from later steps should never be visible"


def test_knn_limits_anchored_keys(full_sequence):
    base = group_causal_mask(full_sequence)
    mask = knn_mask(full_sequence, k=3, base_mask=base)
    anchors, present = token_anchors(full_sequence.tokens)
    assert np.all(mask <= base), "KNN should only remove entries"
    for q in np.flatnonzero(present):
        assert (mask[q] & present).sum() <= 3
    assert np.array_equal(mask[~present], base[~present]), "Unanchored queries keep their entries"


def test_knn_keeps_own_key_among_ties():
    """Stationary tokens sharing one position still see themselves."""
    tokens = [Token("MO", 0, anchor=(2.0, 2.0, 0.0, 0.0)) for _ in range(5)]
    mask = knn_mask(tokens, k=2)
    assert np.all(np.diag(mask)), "Every anchored query keeps its own key"
    assert np.all(mask.sum(axis=1) == 2), "Ties still respect k"


def test_relative_deltas_example():
    query = Token("MO", 0, anchor=(1.0, 1.0, np.pi / 2, 0.0))
    key = Token("MO", 2, anchor=(1.0, 3.0, np.pi, 2.0))
    deltas, anchored = relative_deltas(query, key)
    assert anchored
    assert np.allclose(deltas, (2.0, 0.0, np.pi / 2, 2.0)), "A key straight ahead lies on the local x axis"
    assert relative_deltas(query, Token("AS_START", 0)) == ((0.0, 0.0, 0.0, 0.0), False)


def test_jsonl_roundtrip(full_sequence, tmp_path):
    path = full_sequence.to_jsonl(tmp_path / "tokens.jsonl")
    loaded = TokenSequence.read_jsonl(path)
    assert (loaded.scenario_id, loaded.mode, loaded.num_steps, loaded.num_map_tokens) == \
           (full_sequence.scenario_id, "full", 4, full_sequence.num_map_tokens)
    assert len(loaded) == len(full_sequence)
    for original, restored in zip(full_sequence.tokens, loaded.tokens):
        assert (restored.group, restored.step, restored.owner, restored.intra) == \
               (original.group, original.step, original.owner, original.intra)
        if original.target is None:
            assert restored.target is None
        else:
            assert {k: v for k, v in restored.target.items() if k != "ace"} == \
                   {k: v for k, v in original.target.items() if k != "ace"}
            assert restored.target.get("ace", 0.0) == pytest.approx(original.target.get("ace", 0.0), abs=1e-8)
        if original.anchor is not None:
            assert np.allclose(restored.anchor, original.anchor, atol=1e-6)
    assert np.array_equal(group_causal_mask(loaded), group_causal_mask(full_sequence))


def test_foreign_segments_rejected(sample_scenario):
    foreign = segment_polylines(synth_scenario("curve", 2, seed=0))
    with pytest.raises(ConsistencyError):
        build_sequence(sample_scenario, foreign)


def test_agent_cap_keeps_sdc(sample_scenario, sample_segments):
    sample_scenario.agents[0].poses[:, :2] = sample_scenario.agents[0].poses[0, :2]
    sequence = build_sequence(sample_scenario, sample_segments, n_max=2)
    owners = {tok.owner_id for tok in sequence.tokens if tok.group == "MO"}
    assert len(owners) == 2 and 0 in owners, "The SDC survives the cap even when it does not move"


def test_mask_summary_counts(sample_scenario, sample_segments):
    sequence, mask = tokenize_scenario(sample_scenario, sample_segments, "full", k=32)
    summary = mask_summary(sequence, mask)
    assert summary.values.sum() == mask.sum()
    assert list(summary.index) == ["TL", "AS_START", "AS_SOA", "AS_TYPE", "AS_MS", "AS_RS", "AS_END", "MO"]
