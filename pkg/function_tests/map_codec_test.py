import numpy as np
import pytest
from src.errors import MapError, NoAnchorError
from src.map_codec import (
    FEATURE_SEMANTICS, FEATURE_VALID, MAX_POINTS_PER_SEGMENT, NUM_POINT_FEATURES, MapSegment,
    count_segments, nearest_valid_segment, segment_polylines,
)
from src.scenario_model import MapPolyline, ScenarioDescription, SEMANTIC_TYPES
from src.scenario_synth import synth_scenario


@pytest.fixture
def sample_scenario():
    """Straight two-way road with three agents."""
    return synth_scenario("straight", 3, seed=0)


@pytest.fixture
def sample_segments(sample_scenario):
    return segment_polylines(sample_scenario)


def test_segments_are_short_and_numbered(sample_segments):
    assert [s.segment_id for s in sample_segments] == list(range(len(sample_segments))), \
        "Segment ids should be contiguous from 0"
    assert max(s.length for s in sample_segments) <= 10.0 + 1e-9, "Segments should not exceed 10 m"
    assert all(len(s.points) - 1 <= MAX_POINTS_PER_SEGMENT for s in sample_segments)


def test_straight_map_segment_count(sample_segments):
    # seven 120 m polylines with 2 m spacing, five 2 m chords per segment
    assert len(sample_segments) == 7 * 12


def test_feature_matrix_layout(sample_segments):
    features = sample_segments[0].features
    assert features.shape == (MAX_POINTS_PER_SEGMENT, NUM_POINT_FEATURES)
    valid = features[:, FEATURE_VALID] > 0.5
    assert valid.sum() == len(sample_segments[0].points) - 1, "One valid row per point record"
    assert np.all(features[~valid] == 0.0), "Padding rows should be zero"
    lane = SEMANTIC_TYPES.index("lane")
    assert np.all(features[valid, FEATURE_SEMANTICS][:, lane] == 1.0)


def test_empty_map_raises():
    with pytest.raises(MapError):
        segment_polylines(ScenarioDescription(scenario_id="empty", num_steps=1))


def test_segment_cap_keeps_nearest(sample_scenario):
    segments = segment_polylines(sample_scenario, reference_pose=(0.0, 0.0), max_segments=10)
    assert len(segments) == 10
    assert [s.segment_id for s in segments] == list(range(10))
    assert max(np.hypot(*s.center) for s in segments) < 20.0, "Kept segments should be near the reference"


def test_heading_filter():
    segments = [
        MapSegment(0, "west", "lane", np.array([[10.0, 0.0, 0.0], [0.0, 0.0, 0.0]])),
        MapSegment(1, "east", "lane", np.array([[0.0, 5.0, 0.0], [10.0, 5.0, 0.0]])),
    ]
    assert nearest_valid_segment((5.0, 0.0, 0.0), segments) == 1, "Opposing segments should be skipped"
    assert nearest_valid_segment((5.0, 5.0, np.pi), segments) == 0


def test_anchor_without_matching_heading():
    segments = [MapSegment(0, "east", "lane", np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]]))]
    assert nearest_valid_segment((5.0, 0.0, np.pi), segments) == 0, "Relaxed lookup falls back to distance"
    with pytest.raises(NoAnchorError):
        nearest_valid_segment((5.0, 0.0, np.pi), segments, relax=False)
    with pytest.raises(NoAnchorError):
        nearest_valid_segment((5.0, 0.0, 0.0), [])


def test_polyline_order_is_kept():
    scenario = ScenarioDescription(scenario_id="two", num_steps=1, polylines=[
        MapPolyline("a", [[0, 0, 0], [25, 0, 0]], "lane"),
        MapPolyline("b", [[0, 9, 0], [4, 9, 0]], "crosswalk"),
    ])
    segments = segment_polylines(scenario)
    assert [s.source_polyline for s in segments] == ["a", "b"]


@pytest.mark.parametrize("template", ["straight", "curve", "intersection"])
def test_count_segments_matches_segmentation(template):
    scenario = synth_scenario(template, 2, seed=0, num_steps=3)
    assert count_segments(scenario) == len(segment_polylines(scenario))
    assert count_segments(scenario, max_segments=5) == len(segment_polylines(scenario, max_segments=5)) == 5
