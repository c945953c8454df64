import numpy as np
import pytest
from src.geo_utils import GeoUtils, MapIndex
from src.map_codec import MapSegment


@pytest.fixture
def sample_segments():
    """Two straight segments: one along the x axis, one parallel to it 20 m north."""
    return [
        MapSegment(0, "south", "lane", np.array([[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [10.0, 0.0, 0.0]])),
        MapSegment(1, "north", "lane", np.array([[0.0, 20.0, 0.0], [10.0, 20.0, 0.0]])),
    ]


def test_wrap_angle_range_and_idempotence():
    """Wrapped angles land in [-pi, pi) and wrapping twice changes nothing."""
    angles = np.linspace(-10.0, 10.0, 101)
    wrapped = GeoUtils.wrap_angle(angles)
    assert np.all(wrapped >= -np.pi) and np.all(wrapped < np.pi), "Wrapped angles should lie in [-pi, pi)"
    assert np.array_equal(GeoUtils.wrap_angle(wrapped), wrapped), "Wrapping should be idempotent"
    assert np.allclose(np.sin(wrapped), np.sin(angles)) and np.allclose(np.cos(wrapped), np.cos(angles))


def test_wrap_angle_boundaries():
    assert GeoUtils.wrap_angle(np.pi) == pytest.approx(-np.pi), "pi should wrap to -pi"
    assert GeoUtils.wrap_angle(1.5 * np.pi) == pytest.approx(-0.5 * np.pi)
    assert isinstance(GeoUtils.wrap_angle(0.3), float), "Scalars should come back as floats"


def test_local_global_roundtrip():
    """Rotating into a frame and back returns the original offset."""
    u, v = GeoUtils.to_local(1.0, 0.0, np.pi / 2)
    assert u == pytest.approx(0.0, abs=1e-12) and v == pytest.approx(-1.0), "East is to the right of north"
    rng = np.random.default_rng(0)
    dx, dy, heading = rng.normal(size=(3, 50))
    back = GeoUtils.to_global(*GeoUtils.to_local(dx, dy, heading), heading)
    assert np.allclose(back[0], dx) and np.allclose(back[1], dy), "to_global should invert to_local"


def test_map_index_distance(sample_segments):
    index = MapIndex(sample_segments)
    assert index.distance_to_map(5.0, 3.0) == pytest.approx(3.0), "Distance should be to the nearest segment"
    assert index.distance_to_map(5.0, 17.0) == pytest.approx(3.0)
    assert index.distance_to_map(-4.0, 0.0) == pytest.approx(4.0), "Distance past an end point is to that point"


def test_beyond_margin(sample_segments):
    index = MapIndex(sample_segments)
    flags = index.beyond_margin(np.array([[5.0, 3.0], [5.0, 60.0], [40.0, 0.0]]), margin=20.0)
    assert flags.tolist() == [False, True, True], "Only positions farther than the margin should be flagged"


def test_empty_map_index():
    assert MapIndex([]).distance_to_map(0.0, 0.0) == float("inf"), "An empty map is infinitely far"


def test_segments_to_geodataframe(sample_segments):
    frame = GeoUtils.segments_to_geodataframe(sample_segments)
    assert len(frame) == 2, "One row per segment"
    assert {"segment_id", "source_polyline", "semantic_type", "heading", "length", "centroid"} <= set(frame.columns)
    assert all(frame.geometry.geom_type == "LineString"), "Segments should be LineStrings"
    assert frame["length"].tolist() == pytest.approx([10.0, 10.0])
