"""
This module defines the scenario container and handles loading, validating and saving scenario JSON files.
A scenario holds map polylines, agent tracks with validity masks and traffic-light tracks over a fixed time base.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from src.console import console
from src.errors import ScenarioFormatError, ScenarioValidationError
from src.geo_utils import GeoUtils

DEFAULT_DT = 0.5
DEFAULT_NUM_STEPS = 19

AGENT_TYPES = ("vehicle", "pedestrian", "cyclist")
VEHICLE, PEDESTRIAN, CYCLIST = 0, 1, 2

TL_STATES = ("unknown", "green", "yellow", "red")
TL_UNKNOWN, TL_GREEN, TL_YELLOW, TL_RED = 0, 1, 2, 3

SEMANTIC_TYPES = (
    "lane", "sidewalk", "road_boundary_line", "road_line", "broken_line", "solid_line",
    "yellow_line", "white_line", "driveway", "crosswalk", "speed_bump", "stop_sign",
)


@dataclass(eq=False)
class MapPolyline:
    id: str
    points: np.ndarray
    semantic_type: str

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)


@dataclass(eq=False)
class AgentRecord:
    agent_id: int
    agent_type: int
    shape: np.ndarray
    poses: np.ndarray
    velocities: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.shape = np.asarray(self.shape, dtype=np.float64).reshape(3)
        self.poses = np.asarray(self.poses, dtype=np.float64).reshape(-1, 3)
        self.velocities = np.asarray(self.velocities, dtype=np.float64).reshape(-1, 2)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
        if len(self.valid) == len(self.poses) == len(self.velocities):
            # invalid steps carry no state; keep them finite so the file stays plain JSON
            self.poses[~self.valid] = np.nan_to_num(self.poses[~self.valid], nan=0.0, posinf=0.0, neginf=0.0)
            self.velocities[~self.valid] = np.nan_to_num(self.velocities[~self.valid], nan=0.0, posinf=0.0, neginf=0.0)
        self.poses[:, 2] = GeoUtils.wrap_angle(self.poses[:, 2])

    @property
    def num_steps(self):
        return len(self.valid)

    def speed(self, t):
        """Signed speed along the heading at step t (projection of the global velocity)."""
        psi = self.poses[t, 2]
        return float(self.velocities[t, 0] * np.cos(psi) + self.velocities[t, 1] * np.sin(psi))


@dataclass(eq=False)
class TrafficLightRecord:
    tl_id: int
    attached_segment: int
    stop_point: np.ndarray
    heading: float
    states: np.ndarray

    def __post_init__(self):
        self.stop_point = np.asarray(self.stop_point, dtype=np.float64).reshape(2)
        self.heading = GeoUtils.wrap_angle(float(self.heading))
        self.states = np.asarray(self.states, dtype=np.int64).reshape(-1)


@dataclass(eq=False)
class ScenarioDescription:
    scenario_id: str
    dt: float = DEFAULT_DT
    num_steps: int = DEFAULT_NUM_STEPS
    polylines: list = field(default_factory=list)
    agents: list = field(default_factory=list)
    traffic_lights: list = field(default_factory=list)
    sdc_index: int = 0

    @property
    def sdc(self):
        return self.agents[self.sdc_index]

    def agent_by_id(self, agent_id):
        for agent in self.agents:
            if agent.agent_id == agent_id:
                return agent
        raise KeyError(f"no agent with id {agent_id}")

    def validate(self):
        """
        Check every scenario invariant, raising ScenarioValidationError naming the first offending field.
        """
        if not np.isfinite(self.dt) or self.dt <= 0:
            raise ScenarioValidationError("dt", f"must be > 0, got {self.dt}")
        if self.num_steps < 1:
            raise ScenarioValidationError("num_steps", f"must be >= 1, got {self.num_steps}")
        for i, polyline in enumerate(self.polylines):
            if len(polyline.points) < 2:
                raise ScenarioValidationError(f"polylines[{i}].points", "needs at least 2 points")
            if not np.all(np.isfinite(polyline.points)):
                raise ScenarioValidationError(f"polylines[{i}].points", "non-finite coordinate")
            if polyline.semantic_type not in SEMANTIC_TYPES:
                raise ScenarioValidationError(f"polylines[{i}].type", f"unknown type '{polyline.semantic_type}'")
        seen_ids = set()
        for i, agent in enumerate(self.agents):
            name = f"agents[{i}]"
            if agent.agent_id in seen_ids or agent.agent_id < 0:
                raise ScenarioValidationError(f"{name}.id", f"duplicate or negative id {agent.agent_id}")
            seen_ids.add(agent.agent_id)
            if agent.agent_type not in (VEHICLE, PEDESTRIAN, CYCLIST):
                raise ScenarioValidationError(f"{name}.type", f"unknown agent type {agent.agent_type}")
            if not np.all(np.isfinite(agent.shape)) or np.any(agent.shape <= 0):
                raise ScenarioValidationError(f"{name}.shape", "components must be finite and > 0")
            if len(agent.valid) != self.num_steps or len(agent.poses) != self.num_steps:
                raise ScenarioValidationError(
                    f"{name}.states", f"expected {self.num_steps} entries, got {len(agent.valid)}")
            finite = np.all(np.isfinite(agent.poses), axis=1) & np.all(np.isfinite(agent.velocities), axis=1)
            if np.any(agent.valid & ~finite):
                raise ScenarioValidationError(f"{name}.states", "valid step with non-finite state")
        if self.traffic_lights:
            # map_codec imports this module
            from src.map_codec import count_segments
            num_segments = count_segments(self)
        for i, light in enumerate(self.traffic_lights):
            name = f"traffic_lights[{i}]"
            if len(light.states) != self.num_steps:
                raise ScenarioValidationError(
                    f"{name}.states", f"expected {self.num_steps} entries, got {len(light.states)}")
            if np.any((light.states < 0) | (light.states > 3)):
                raise ScenarioValidationError(f"{name}.states", "state values must be in {0,1,2,3}")
            if not 0 <= light.attached_segment < num_segments:
                raise ScenarioValidationError(
                    f"{name}.segment", f"segment index must be in [0, {num_segments}), got {light.attached_segment}")
            if not np.all(np.isfinite(light.stop_point)):
                raise ScenarioValidationError(f"{name}.stop_point", "non-finite coordinate")
        if self.agents and not 0 <= self.sdc_index < len(self.agents):
            raise ScenarioValidationError("sdc_index", f"{self.sdc_index} does not refer to an agent")
        return self

    def to_dict(self):
        """
        Serialize to the JSON document layout (only schema keys are emitted).
        """
        return {
            "scenario_id": self.scenario_id,
            "dt": float(self.dt),
            "num_steps": int(self.num_steps),
            "polylines": [
                {"id": p.id, "type": p.semantic_type, "points": p.points.tolist()} for p in self.polylines
            ],
            "agents": [
                {
                    "id": int(a.agent_id),
                    "type": int(a.agent_type),
                    "shape": a.shape.tolist(),
                    "states": [
                        [*a.poses[t].tolist(), *a.velocities[t].tolist(), bool(a.valid[t])]
                        for t in range(a.num_steps)
                    ],
                }
                for a in self.agents
            ],
            "traffic_lights": [
                {
                    "id": int(l.tl_id),
                    "segment": int(l.attached_segment),
                    "stop_point": l.stop_point.tolist(),
                    "heading": float(l.heading),
                    "states": l.states.tolist(),
                }
                for l in self.traffic_lights
            ],
            "sdc_index": int(self.sdc_index),
        }

    @classmethod
    def from_dict(cls, document):
        """
        Build a scenario from a parsed JSON document. Unknown keys are ignored.
        """
        if not isinstance(document, dict):
            raise ScenarioFormatError("top level must be a JSON object")

        def require(container, key, where):
            if key not in container:
                raise ScenarioFormatError("missing key", field=f"{where}{key}")
            return container[key]

        try:
            polylines = [
                MapPolyline(
                    id=str(require(p, "id", f"polylines[{i}].")),
                    points=np.asarray(require(p, "points", f"polylines[{i}]."), dtype=np.float64),
                    semantic_type=str(require(p, "type", f"polylines[{i}].")),
                )
                for i, p in enumerate(require(document, "polylines", ""))
            ]
        except (TypeError, ValueError) as e:
            if isinstance(e, ScenarioFormatError):
                raise
            raise ScenarioFormatError(f"malformed polyline: {e}", field="polylines") from e

        agents = []
        for i, a in enumerate(require(document, "agents", "")):
            where = f"agents[{i}]."
            try:
                states = np.asarray(require(a, "states", where), dtype=np.float64)
                if states.size == 0:
                    states = states.reshape(0, 6)
                if states.ndim != 2 or states.shape[1] != 6:
                    raise ScenarioFormatError("each state must be [x, y, psi, vx, vy, valid]",
                                              field=f"{where}states")
                agents.append(AgentRecord(
                    agent_id=int(require(a, "id", where)),
                    agent_type=int(require(a, "type", where)),
                    shape=np.asarray(require(a, "shape", where), dtype=np.float64),
                    poses=states[:, 0:3],
                    velocities=states[:, 3:5],
                    valid=states[:, 5] > 0.5,
                ))
            except ScenarioFormatError:
                raise
            except (TypeError, ValueError) as e:
                raise ScenarioFormatError(f"malformed agent: {e}", field=f"agents[{i}]") from e

        lights = []
        for i, l in enumerate(document.get("traffic_lights", [])):
            where = f"traffic_lights[{i}]."
            try:
                lights.append(TrafficLightRecord(
                    tl_id=int(require(l, "id", where)),
                    attached_segment=int(require(l, "segment", where)),
                    stop_point=np.asarray(require(l, "stop_point", where), dtype=np.float64),
                    heading=float(require(l, "heading", where)),
                    states=np.asarray(require(l, "states", where), dtype=np.int64),
                ))
            except ScenarioFormatError:
                raise
            except (TypeError, ValueError) as e:
                raise ScenarioFormatError(f"malformed traffic light: {e}", field=f"traffic_lights[{i}]") from e

        try:
            return cls(
                scenario_id=str(require(document, "scenario_id", "")),
                dt=float(document.get("dt", DEFAULT_DT)),
                num_steps=int(document.get("num_steps", DEFAULT_NUM_STEPS)),
                polylines=polylines,
                agents=agents,
                traffic_lights=lights,
                sdc_index=int(document.get("sdc_index", 0)),
            )
        except (TypeError, ValueError) as e:
            if isinstance(e, ScenarioFormatError):
                raise
            raise ScenarioFormatError(f"malformed header: {e}") from e

    def __eq__(self, other):
        if not isinstance(other, ScenarioDescription):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def load_scenario(path):
    """
    Load and validate a scenario JSON file.

    Parameters:
    - path (str or Path): Path to the scenario document.

    Returns:
    - ScenarioDescription: The validated scenario.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        console.print(f"[error]Error reading scenario {path}: {e}[/error]", style="error")
        raise
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        console.print(f"[error]Error parsing scenario {path}: {e.msg}[/error]", style="error")
        raise ScenarioFormatError(e.msg, line=e.lineno) from e
    try:
        scenario = ScenarioDescription.from_dict(document).validate()
    except (ScenarioFormatError, ScenarioValidationError) as e:
        console.print(f"[error]Error loading scenario {path}: {e}[/error]", style="error")
        raise
    console.print(f"[success]Scenario '{scenario.scenario_id}' loaded from {path}![/success]", style="success")
    return scenario


def save_scenario(scenario, path):
    """
    Validate and write a scenario as a JSON document.

    Parameters:
    - scenario (ScenarioDescription): Scenario to save.
    - path (str or Path): Destination file.
    """
    scenario.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(scenario.to_dict(), indent=1), encoding="utf-8")
    console.print(f"[success]Scenario '{scenario.scenario_id}' saved at {path}.[/success]", style="success")
    return path
