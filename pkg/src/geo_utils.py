"""
GeoUtils: planar geometry helpers shared by the codecs, the rollout engine and the map inspection tools.
"""

import numpy as np
import geopandas as gpd
from shapely import STRtree
from shapely.geometry import LineString, Point

from src.console import console

TWO_PI = 2.0 * np.pi


class GeoUtils:
    @staticmethod
    def wrap_angle(angle):
        """
        Wrap angles to [-pi, pi).

        Parameters:
        - angle (float or ndarray): Angle(s) in radians.

        Returns:
        - float or ndarray: Wrapped angle(s), same shape as the input.
        """
        angle = np.asarray(angle, dtype=np.float64)
        wrapped = np.mod(angle + np.pi, TWO_PI) - np.pi
        # np.mod can round a tiny negative input up to 2*pi
        wrapped = np.where(wrapped >= np.pi, wrapped - TWO_PI, wrapped)
        # in-range values pass through untouched so wrapping is idempotent
        wrapped = np.where((angle >= -np.pi) & (angle < np.pi), angle, wrapped)
        if np.ndim(wrapped) == 0:
            return float(wrapped)
        return wrapped

    @staticmethod
    def to_local(dx, dy, heading):
        """
        Rotate a global offset into the frame of a pose with the given heading.

        Parameters:
        - dx, dy (float or ndarray): Offset in the global frame.
        - heading (float or ndarray): Frame heading in radians.

        Returns:
        - tuple: (longitudinal, lateral) components.
        """
        c, s = np.cos(heading), np.sin(heading)
        return c * dx + s * dy, -s * dx + c * dy

    @staticmethod
    def to_global(u, v, heading):
        """
        Rotate a local offset back into the global frame.
        """
        c, s = np.cos(heading), np.sin(heading)
        return u * c - v * s, u * s + v * c

    @staticmethod
    def segments_to_geodataframe(segments):
        """
        Build a GeoDataFrame with one LineString per map segment and a centroid column.

        Parameters:
        - segments (list of MapSegment): Segments produced by the map codec.

        Returns:
        - GeoDataFrame: Columns segment_id, source_polyline, semantic_type, heading, length, centroid, geometry.
        """
        try:
            records = []
            for segment in segments:
                points = segment.points[:, :2]
                geometry = LineString(points) if len(points) > 1 else Point(points[0])
                records.append({
                    "segment_id": segment.segment_id,
                    "source_polyline": segment.source_polyline,
                    "semantic_type": segment.semantic_type,
                    "heading": segment.heading,
                    "length": segment.length,
                    "geometry": geometry,
                })
            frame = gpd.GeoDataFrame(records, geometry="geometry")
            frame["centroid"] = gpd.GeoSeries(
                [Point(segment.center[0], segment.center[1]) for segment in segments], index=frame.index
            )
            console.print(f"[success]{len(frame)} segments converted to a GeoDataFrame.[/success]", style="success")
            return frame
        except Exception as e:
            console.print(f"[error]Error converting segments: {e}[/error]", style="error")
            raise RuntimeError(f"Error converting segments: {e}") from e


class MapIndex:
    """
    Spatial index over map segment geometry, answering point-to-map distance queries.
    """

    def __init__(self, segments):
        self.geometries = [
            LineString(segment.points[:, :2]) if len(segment.points) > 1 else Point(segment.points[0, :2])
            for segment in segments
        ]
        self.tree = STRtree(self.geometries)

    def distance_to_map(self, x, y):
        """
        Euclidean distance from (x, y) to the nearest segment geometry; infinite for an empty index.
        """
        if not self.geometries:
            return float("inf")
        point = Point(float(x), float(y))
        nearest = self.tree.nearest(point)
        return float(self.geometries[int(nearest)].distance(point))

    def beyond_margin(self, positions, margin):
        """
        Flag positions lying farther than `margin` from every segment.

        Parameters:
        - positions (ndarray): (N, 2) array of x, y coordinates.
        - margin (float): Distance threshold in meters.

        Returns:
        - ndarray: Boolean array, True where the position is off the map.
        """
        return np.array([self.distance_to_map(x, y) > margin for x, y in np.asarray(positions).reshape(-1, 2)],
                        dtype=bool)
