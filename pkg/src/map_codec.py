"""
Map codec: slices scenario polylines into short map segments, computes the per-point feature matrix
and answers nearest-segment queries used to anchor agent states.
"""
from dataclasses import dataclass, field

import numpy as np
from rich.table import Table

from src.console import console
from src.errors import MapError, NoAnchorError
from src.geo_utils import GeoUtils
from src.scenario_model import SEMANTIC_TYPES

MAX_SEGMENT_LENGTH = 10.0
MAX_POINTS_PER_SEGMENT = 30
MAX_SEGMENTS = 3000
NUM_POINT_FEATURES = 27

# column layout of the per-point feature matrix
FEATURE_START = slice(0, 3)
FEATURE_END = slice(3, 6)
FEATURE_DIRECTION = slice(6, 9)
FEATURE_HEADING = 9
FEATURE_SIN = 10
FEATURE_COS = 11
FEATURE_POINT_LENGTH = 12
FEATURE_SEMANTICS = slice(13, 25)
FEATURE_SEGMENT_LENGTH = 25
FEATURE_VALID = 26

_LENGTH_TOLERANCE = 1e-9


@dataclass(eq=False)
class MapSegment:
    """
    A short slice of one polyline. `points` holds the polyline vertices it covers (shared with the
    neighbouring slice at the boundary); each consecutive pair is one point record.
    """
    segment_id: int
    source_polyline: str
    semantic_type: str
    points: np.ndarray
    center: np.ndarray = None
    heading: float = 0.0
    length: float = 0.0
    flags: np.ndarray = None
    features: np.ndarray = None
    point_valid: np.ndarray = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        chords = np.diff(self.points, axis=0)
        if self.center is None:
            self.center = self.points[:, :2].mean(axis=0)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(2)
        if len(chords):
            headings = np.arctan2(chords[:, 1], chords[:, 0])
            self.heading = GeoUtils.wrap_angle(float(np.arctan2(np.sin(headings).mean(), np.cos(headings).mean())))
            self.length = float(np.linalg.norm(chords, axis=1).sum())
        else:
            self.heading = GeoUtils.wrap_angle(float(self.heading))
        if self.flags is None:
            self.flags = np.array([name == self.semantic_type for name in SEMANTIC_TYPES], dtype=bool)
        if self.features is None:
            self.features = point_features(self)
        self.point_valid = self.features[:, FEATURE_VALID] > 0.5

    @property
    def anchor(self):
        """Segment pose (x, y, psi) used as the local frame and as the attention anchor."""
        return float(self.center[0]), float(self.center[1]), float(self.heading)


def point_features(segment):
    """
    Build the 30 x 27 per-point feature matrix of a segment.

    Columns, in order: start xyz, end xyz, unit direction xyz, heading, sin, cos, point length,
    12 semantic one-hots, total segment length, valid mask. Padding rows are all zero.

    Parameters:
    - segment (MapSegment): The segment.

    Returns:
    - ndarray: (30, 27) float matrix.
    """
    features = np.zeros((MAX_POINTS_PER_SEGMENT, NUM_POINT_FEATURES), dtype=np.float64)
    starts = segment.points[:-1][:MAX_POINTS_PER_SEGMENT]
    ends = segment.points[1:][:MAX_POINTS_PER_SEGMENT]
    count = len(starts)
    if count == 0:
        return features
    chords = ends - starts
    lengths = np.linalg.norm(chords, axis=1)
    safe = np.where(lengths > 0, lengths, 1.0)
    direction = chords / safe[:, None]
    # heading of a point is the direction of its chord
    heading = np.arctan2(chords[:, 1], chords[:, 0])
    one_hot = np.array([name == segment.semantic_type for name in SEMANTIC_TYPES], dtype=np.float64)

    features[:count, FEATURE_START] = starts
    features[:count, FEATURE_END] = ends
    features[:count, FEATURE_DIRECTION] = direction
    features[:count, FEATURE_HEADING] = heading
    features[:count, FEATURE_SIN] = np.sin(heading)
    features[:count, FEATURE_COS] = np.cos(heading)
    features[:count, FEATURE_POINT_LENGTH] = lengths
    features[:count, FEATURE_SEMANTICS] = one_hot
    features[:count, FEATURE_SEGMENT_LENGTH] = lengths.sum()
    features[:count, FEATURE_VALID] = 1.0
    return features


def _slice_polyline(points, max_length, max_records):
    """
    Greedy slicing: accumulate point records while the arc length stays within max_length and the
    record count within max_records. Returns lists of vertex index ranges (inclusive end).
    """
    chord_lengths = np.linalg.norm(np.diff(points, axis=0), axis=1)
    pieces = []
    start = 0
    while start < len(chord_lengths):
        end = start
        accumulated = chord_lengths[start]
        end += 1
        while (end < len(chord_lengths)
               and end - start < max_records
               and accumulated + chord_lengths[end] <= max_length + _LENGTH_TOLERANCE):
            accumulated += chord_lengths[end]
            end += 1
        pieces.append((start, end))
        start = end
    return pieces


def segment_reference_pose(scenario, step=0):
    """
    Reference position for the segment cap: the SDC position at `step` when valid, otherwise the
    centroid of the map bounding box.
    """
    if scenario.agents and scenario.sdc.valid[min(step, scenario.num_steps - 1)]:
        x, y, _ = scenario.sdc.poses[min(step, scenario.num_steps - 1)]
        return float(x), float(y)
    points = np.concatenate([p.points[:, :2] for p in scenario.polylines], axis=0)
    lo, hi = points.min(axis=0), points.max(axis=0)
    return float((lo[0] + hi[0]) / 2), float((lo[1] + hi[1]) / 2)


def segment_polylines(scenario, reference_pose=None, max_length=MAX_SEGMENT_LENGTH,
                      max_records=MAX_POINTS_PER_SEGMENT, max_segments=MAX_SEGMENTS):
    """
    Split every polyline into short segments and cap the total count by distance to a reference position.

    Parameters:
    - scenario (ScenarioDescription): Scenario with at least one polyline.
    - reference_pose (tuple): (x, y[, psi]) used when the cap applies; defaults to the SDC rule.
    - max_length (float): Maximum arc length per segment in meters.
    - max_records (int): Point records per segment.
    - max_segments (int): Cap on the number of segments.

    Returns:
    - list of MapSegment: Segments with ids 0..M-1 in polyline order.
    """
    if not scenario.polylines:
        console.print("[error]Error segmenting map: the scenario has no polylines.[/error]", style="error")
        raise MapError(f"scenario '{scenario.scenario_id}' has an empty map")
    if reference_pose is None:
        reference_pose = segment_reference_pose(scenario)

    candidates = []
    for polyline in scenario.polylines:
        for start, end in _slice_polyline(polyline.points, max_length, max_records):
            candidates.append((polyline.id, polyline.semantic_type, polyline.points[start:end + 1]))

    if len(candidates) > max_segments:
        centers = np.array([points[:, :2].mean(axis=0) for _, _, points in candidates])
        distance = np.hypot(centers[:, 0] - reference_pose[0], centers[:, 1] - reference_pose[1])
        keep = np.sort(np.lexsort((np.arange(len(candidates)), distance))[:max_segments])
        console.print(f"[info]{len(candidates) - max_segments} segments dropped beyond the cap of "
                      f"{max_segments}.[/info]", style="info")
        candidates = [candidates[i] for i in keep]

    return [
        MapSegment(segment_id=i, source_polyline=polyline_id, semantic_type=semantic_type, points=points)
        for i, (polyline_id, semantic_type, points) in enumerate(candidates)
    ]


def count_segments(scenario, max_length=MAX_SEGMENT_LENGTH, max_records=MAX_POINTS_PER_SEGMENT,
                   max_segments=MAX_SEGMENTS):
    """Number of segments segment_polylines produces for the scenario."""
    total = sum(len(_slice_polyline(p.points, max_length, max_records)) for p in scenario.polylines)
    return min(total, max_segments)


def segment_arrays(segments):
    """Stacked (M, 2) centers and (M,) headings."""
    centers = np.array([s.center for s in segments], dtype=np.float64).reshape(-1, 2)
    headings = np.array([s.heading for s in segments], dtype=np.float64)
    return centers, headings


def nearest_valid_segment(pose, segments, relax=True, arrays=None):
    """
    Nearest segment center among segments whose heading is within 90 degrees of the pose heading.
    Ties go to the lowest segment id.

    Parameters:
    - pose (tuple): (x, y, psi).
    - segments (list of MapSegment): Candidate segments.
    - relax (bool): Fall back to pure nearest distance when no segment passes the heading filter.
    - arrays (tuple): Precomputed segment_arrays(segments).

    Returns:
    - int: Segment id.
    """
    if not segments:
        raise NoAnchorError("no map segments to anchor to")
    centers, headings = arrays if arrays is not None else segment_arrays(segments)
    distance = np.hypot(centers[:, 0] - pose[0], centers[:, 1] - pose[1])
    passes = np.abs(GeoUtils.wrap_angle(pose[2] - headings)) < np.pi / 2
    if not np.any(passes):
        if not relax:
            raise NoAnchorError(f"no segment within 90 degrees of heading {pose[2]:.3f}")
        passes = np.ones_like(passes)
    distance = np.where(passes, distance, np.inf)
    return int(segments[int(np.argmin(distance))].segment_id)


def summarize_segments(segments, limit=20):
    """
    Display a summary table of segments in the console.
    """
    table = Table(title=f"Map segments ({len(segments)} total)", show_lines=True)
    table.add_column("Segment ID", justify="left", style="info")
    table.add_column("Polyline", justify="left")
    table.add_column("Type", justify="left", style="highlight")
    table.add_column("Center", justify="center")
    table.add_column("Heading", justify="center")
    table.add_column("Length", justify="center")
    for segment in segments[:limit]:
        table.add_row(str(segment.segment_id), segment.source_polyline, segment.semantic_type,
                      f"({segment.center[0]:.1f}, {segment.center[1]:.1f})",
                      f"{segment.heading:.3f}", f"{segment.length:.2f}")
    console.print(table)
