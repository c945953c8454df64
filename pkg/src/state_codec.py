"""
State codec: expresses agent global states relative to a map segment, quantizes the eight relative
fields into uniform bins and converts them back to global pose and velocity.
"""
from dataclasses import dataclass, field

import numpy as np

from src.errors import ConfigurationError
from src.geo_utils import GeoUtils

NUM_STATE_BINS = 81
RS_FIELDS = ("length", "width", "height", "u", "v", "dpsi", "vx", "vy")


@dataclass
class FieldRanges:
    """Per-field (lo, hi) bounds for the relative-state quantizer."""
    length: tuple = (0.5, 10.0)
    width: tuple = (0.5, 3.0)
    height: tuple = (0.5, 4.0)
    u: tuple = (-10.0, 10.0)
    v: tuple = (-10.0, 10.0)
    dpsi: tuple = (-np.pi / 2, np.pi / 2)
    vx: tuple = (0.0, 30.0)
    vy: tuple = (-10.0, 10.0)
    num_bins: int = NUM_STATE_BINS

    def __post_init__(self):
        for name in RS_FIELDS:
            lo, hi = (float(x) for x in getattr(self, name))
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo >= hi:
                raise ConfigurationError(f"quantizer.{name}: need lo < hi, got ({lo}, {hi})")
            setattr(self, name, (lo, hi))
        if int(self.num_bins) < 2:
            raise ConfigurationError(f"quantizer.num_bins: need >= 2, got {self.num_bins}")
        self.num_bins = int(self.num_bins)

    def bounds(self):
        """(8, 2) array of bounds in field order."""
        return np.array([getattr(self, name) for name in RS_FIELDS], dtype=np.float64)

    @classmethod
    def from_mapping(cls, mapping):
        """
        Build from a {field: "lo, hi"} mapping as found in the config file.
        """
        kwargs = {}
        for key, value in mapping.items():
            if key == "num_bins":
                kwargs[key] = int(value)
            elif key in RS_FIELDS:
                parts = [p for p in str(value).replace("(", "").replace(")", "").split(",") if p.strip()]
                if len(parts) != 2:
                    raise ConfigurationError(f"quantizer.{key}: expected 'lo, hi', got '{value}'")
                kwargs[key] = (float(parts[0]), float(parts[1]))
            else:
                raise ConfigurationError(f"quantizer.{key}: unknown field")
        return cls(**kwargs)


@dataclass
class RelativeState:
    length: float
    width: float
    height: float
    u: float
    v: float
    dpsi: float
    vx: float
    vy: float
    bins: np.ndarray = field(default=None)
    clamped: bool = False

    def values(self):
        return np.array([getattr(self, name) for name in RS_FIELDS], dtype=np.float64)


def quantize(value, lo, hi, n=NUM_STATE_BINS):
    """
    Map a value to the nearest of n bin centers spaced evenly on [lo, hi] inclusive.
    Values outside the range are clamped; exact midpoints go to the lower bin.

    Parameters:
    - value (float or ndarray): Value(s) to quantize.
    - lo, hi (float or ndarray): Range bounds.
    - n (int): Number of bins.

    Returns:
    - int or ndarray: Bin index in [0, n-1].
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(lo >= hi):
        raise ConfigurationError(f"quantizer range needs lo < hi, got ({lo}, {hi})")
    if n < 2:
        raise ConfigurationError(f"quantizer needs n >= 2, got {n}")
    clipped = np.clip(np.asarray(value, dtype=np.float64), lo, hi)
    position = (clipped - lo) / (hi - lo) * (n - 1)
    index = np.clip(np.ceil(position - 0.5), 0, n - 1).astype(np.int64)
    if index.ndim == 0:
        return int(index)
    return index


def dequantize(index, lo, hi, n=NUM_STATE_BINS):
    """Bin center for a bin index."""
    if np.any(np.asarray(lo) >= np.asarray(hi)):
        raise ConfigurationError(f"quantizer range needs lo < hi, got ({lo}, {hi})")
    center = np.asarray(lo, dtype=np.float64) + np.asarray(index, dtype=np.float64) * (
        (np.asarray(hi, dtype=np.float64) - np.asarray(lo, dtype=np.float64)) / (n - 1))
    if np.ndim(center) == 0:
        return float(center)
    return center


def quantize_fields(values, ranges):
    """Quantize the 8 relative fields (field order) with their own ranges."""
    bounds = ranges.bounds()
    return quantize(np.asarray(values, dtype=np.float64), bounds[:, 0], bounds[:, 1], ranges.num_bins)


def dequantize_fields(bins, ranges):
    bounds = ranges.bounds()
    return dequantize(np.asarray(bins), bounds[:, 0], bounds[:, 1], ranges.num_bins)


def encode_relative(pose, velocity, shape, segment, ranges=None, quantize_bins=True):
    """
    Express an agent's global state in the frame of a map segment.

    Parameters:
    - pose (tuple): Global (x, y, psi).
    - velocity (tuple): Global (vx, vy).
    - shape (tuple): (length, width, height).
    - segment (MapSegment): Anchor segment (center and heading).
    - ranges (FieldRanges): Quantizer table; defaults to the standard table.
    - quantize_bins (bool): When False, the continuous fields are returned unclamped and bins stay None.

    Returns:
    - RelativeState: Relative fields, bins, and whether any field was clamped.
    """
    ranges = ranges or FieldRanges()
    phi = segment.heading
    cx, cy = segment.center
    u, v = GeoUtils.to_local(pose[0] - cx, pose[1] - cy, phi)
    dpsi = GeoUtils.wrap_angle(pose[2] - phi)
    vx, vy = GeoUtils.to_local(velocity[0], velocity[1], phi)
    values = np.array([shape[0], shape[1], shape[2], u, v, dpsi, vx, vy], dtype=np.float64)
    if not quantize_bins:
        return RelativeState(*values.tolist())
    bounds = ranges.bounds()
    clipped = np.clip(values, bounds[:, 0], bounds[:, 1])
    clamped = bool(np.any(clipped != values))
    bins = quantize_fields(clipped, ranges)
    return RelativeState(*clipped.tolist(), bins=bins, clamped=clamped)


def encode_state_tokens(pose, velocity, shape, segment, ranges=None):
    """Encode and quantize in one call; returns (bins, clamped)."""
    relative = encode_relative(pose, velocity, shape, segment, ranges)
    return relative.bins, relative.clamped


def decode_global(relative, segment):
    """
    Convert a relative state back into a global pose and velocity using the segment's center and heading.

    Returns:
    - tuple: (x, y, psi, vx_global, vy_global)
    """
    phi = segment.heading
    cx, cy = segment.center
    dx, dy = GeoUtils.to_global(relative.u, relative.v, phi)
    gvx, gvy = GeoUtils.to_global(relative.vx, relative.vy, phi)
    psi = GeoUtils.wrap_angle(phi + relative.dpsi)
    return float(cx + dx), float(cy + dy), psi, float(gvx), float(gvy)


def relative_from_bins(bins, ranges=None):
    """Dequantized RelativeState for a vector of 8 bin indices."""
    ranges = ranges or FieldRanges()
    bins = np.asarray(bins, dtype=np.int64)
    values = dequantize_fields(bins, ranges)
    # a placement sampled on the edge bin of u or v lies at the clamp boundary
    position_bins = bins[3:5]
    at_edge = bool(np.any((position_bins == 0) | (position_bins == ranges.num_bins - 1)))
    return RelativeState(*values.tolist(), bins=bins, clamped=at_edge)


def decode_bins(bins, segment, ranges=None):
    """Dequantize 8 bins and decode them to a global state."""
    return decode_global(relative_from_bins(bins, ranges), segment)

