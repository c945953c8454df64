import numpy as np
import pytest
from src.errors import ConfigurationError
from src.map_codec import MapSegment
from src.state_codec import (
    FieldRanges, decode_bins, decode_global, dequantize, encode_relative, encode_state_tokens, quantize,
    relative_from_bins,
)


@pytest.fixture
def sample_segment():
    """A 10 m segment centred at (5, 5) heading north-east."""
    return MapSegment(0, "lane", "lane", np.array([[1.464, 1.464, 0.0], [8.536, 8.536, 0.0]]))


def test_quantize_edges_and_midpoints():
    assert quantize(-10.0, -10.0, 10.0) == 0
    assert quantize(10.0, -10.0, 10.0) == 80
    assert quantize(0.0, -10.0, 10.0) == 40
    assert quantize(-10.0 + 0.125, -10.0, 10.0) == 0, "Exact midpoints go to the lower bin"
    assert quantize(-10.0 + 0.126, -10.0, 10.0) == 1
    assert quantize(55.0, -10.0, 10.0) == 80, "Out-of-range values clamp to the edge bin"
    assert dequantize(40, -10.0, 10.0) == pytest.approx(0.0)


def test_quantize_rejects_bad_range():
    with pytest.raises(ConfigurationError):
        quantize(0.0, 1.0, 1.0)
    with pytest.raises(ConfigurationError):
        quantize(0.0, 0.0, 1.0, n=1)


def test_continuous_roundtrip(sample_segment):
    pose, velocity = (7.0, 3.0, 0.9), (4.0, 3.5)
    relative = encode_relative(pose, velocity, (4.5, 1.9, 1.6), sample_segment, quantize_bins=False)
    x, y, psi, vx, vy = decode_global(relative, sample_segment)
    assert np.allclose([x, y, psi, vx, vy], [*pose, *velocity], atol=1e-9), "Unquantized states should decode exactly"


def test_quantized_roundtrip_error_bounds(sample_segment):
    """Position error stays within half a bin diagonal and heading error within half a heading bin."""
    rng = np.random.default_rng(0)
    for _ in range(200):
        pose = (5.0 + rng.uniform(-6.5, 6.5), 5.0 + rng.uniform(-6.5, 6.5), np.pi / 4 + rng.uniform(-1.5, 1.5))
        bins, clamped = encode_state_tokens(pose, (1.0, 1.0), (4.5, 1.9, 1.6), sample_segment)
        assert not clamped
        x, y, psi, _, _ = decode_bins(bins, sample_segment)
        assert np.hypot(x - pose[0], y - pose[1]) <= np.sqrt(2) * 0.125 + 1e-9
        assert abs(np.angle(np.exp(1j * (psi - pose[2])))) <= np.pi / 160 + 1e-9


def test_clamp_flags(sample_segment):
    far = encode_relative((40.0, 5.0, 0.0), (0.0, 0.0), (4.5, 1.9, 1.6), sample_segment)
    assert far.clamped, "A position outside the range should be flagged"
    assert encode_relative((5.0, 5.0, np.pi / 4), (0.0, 0.0), (4.5, 1.9, 1.6), sample_segment).clamped is False
    edge = np.full(8, 40)
    edge[3] = 0
    assert relative_from_bins(edge).clamped, "Edge bins of u or v mark a clamped placement"
    edge[3], edge[6] = 40, 0
    assert not relative_from_bins(edge).clamped, "Edge bins of other fields are ordinary values"


def test_field_ranges_validation():
    with pytest.raises(ConfigurationError):
        FieldRanges(u=(5.0, -5.0))
    with pytest.raises(ConfigurationError):
        FieldRanges.from_mapping({"speed": "0, 1"})
    ranges = FieldRanges.from_mapping({"u": "-20, 20", "num_bins": "41"})
    assert ranges.u == (-20.0, 20.0) and ranges.num_bins == 41
