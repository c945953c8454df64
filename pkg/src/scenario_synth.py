"""
This module generates small synthetic scenarios (straight road, curve, four-way intersection) used as a
desk-scale training corpus. Agents follow constant controls taken from the motion vocabulary grid, so their
ground-truth motion labels are exact.
"""
import numpy as np

from src.console import console
from src.errors import PlacementError, ScenarioValidationError
from src.kinematics import ACCELERATIONS, YAW_RATES, KinState, step_bicycle
from src.map_codec import nearest_valid_segment, segment_polylines
from src.scenario_model import (
    CYCLIST, DEFAULT_DT, DEFAULT_NUM_STEPS, PEDESTRIAN, TL_GREEN, TL_RED, TL_YELLOW, VEHICLE,
    AgentRecord, MapPolyline, ScenarioDescription, TrafficLightRecord,
)

TEMPLATES = ("straight", "curve", "intersection")

LANE_OFFSET = 1.75
ROAD_HALF_WIDTH = 3.5
SIDEWALK_OFFSET = 5.5
ARM_LENGTH = 60.0
JUNCTION_HALF_SIZE = 8.0
CURVE_RADIUS = 40.0
POINT_SPACING = 2.0
VEHICLE_GAP = 12.0

# signal cycle: 8 green, 2 yellow, 10 red
SIGNAL_CYCLE = np.array([TL_GREEN] * 8 + [TL_YELLOW] * 2 + [TL_RED] * 10)

_ZERO_ACCEL = int(np.argmin(np.abs(ACCELERATIONS)))
_ZERO_YAW = int(np.argmin(np.abs(YAW_RATES)))


def _line(start, heading, length, lateral=0.0, spacing=POINT_SPACING):
    """Straight (x, y, 0) points from `start` along `heading`, shifted left by `lateral`."""
    s = np.linspace(0.0, length, int(round(length / spacing)) + 1)
    c, si = np.cos(heading), np.sin(heading)
    x = start[0] + s * c - lateral * si
    y = start[1] + s * si + lateral * c
    return np.stack([x, y, np.zeros_like(x)], axis=-1)


def _arc(radius, spacing=POINT_SPACING):
    """Counter-clockwise full circle of `radius` around the origin, starting at (0, -radius)."""
    count = int(np.ceil(2 * np.pi * radius / spacing))
    theta = -np.pi / 2 + np.linspace(0.0, 2 * np.pi, count + 1)
    return np.stack([radius * np.cos(theta), radius * np.sin(theta), np.zeros_like(theta)], axis=-1)


def _vehicle_shape(rng):
    return np.array([rng.uniform(4.2, 5.2), rng.uniform(1.8, 2.1), rng.uniform(1.4, 1.8)])


def _vru_shape(agent_type, rng):
    if agent_type == PEDESTRIAN:
        return np.array([rng.uniform(0.5, 0.8), rng.uniform(0.5, 0.8), rng.uniform(1.5, 1.9)])
    return np.array([rng.uniform(1.6, 1.9), rng.uniform(0.6, 0.8), rng.uniform(1.5, 1.9)])


def _straight_layout():
    polylines = [
        MapPolyline("lane_east", _line((-ARM_LENGTH, 0.0), 0.0, 2 * ARM_LENGTH, -LANE_OFFSET), "lane"),
        MapPolyline("lane_west", _line((ARM_LENGTH, 0.0), np.pi, 2 * ARM_LENGTH, -LANE_OFFSET), "lane"),
        MapPolyline("center_line", _line((-ARM_LENGTH, 0.0), 0.0, 2 * ARM_LENGTH), "broken_line"),
        MapPolyline("boundary_south", _line((-ARM_LENGTH, 0.0), 0.0, 2 * ARM_LENGTH, -ROAD_HALF_WIDTH),
                    "road_boundary_line"),
        MapPolyline("boundary_north", _line((-ARM_LENGTH, 0.0), 0.0, 2 * ARM_LENGTH, ROAD_HALF_WIDTH),
                    "road_boundary_line"),
        MapPolyline("sidewalk_south", _line((-ARM_LENGTH, 0.0), 0.0, 2 * ARM_LENGTH, -SIDEWALK_OFFSET), "sidewalk"),
        MapPolyline("sidewalk_north", _line((ARM_LENGTH, 0.0), np.pi, 2 * ARM_LENGTH, -SIDEWALK_OFFSET), "sidewalk"),
    ]
    vehicle_slots = []
    for heading, origin in ((0.0, (-ARM_LENGTH, 0.0)), (np.pi, (ARM_LENGTH, 0.0))):
        for s in np.arange(5.0, 65.0, VEHICLE_GAP):
            x, y, _ = _line(origin, heading, s, -LANE_OFFSET, spacing=s)[-1]
            vehicle_slots.append((x, y, heading, 0.0))
    vru_slots = []
    for heading, origin in ((0.0, (-ARM_LENGTH, 0.0)), (np.pi, (ARM_LENGTH, 0.0))):
        for s in np.arange(10.0, 70.0, 8.0):
            x, y, _ = _line(origin, heading, s, -SIDEWALK_OFFSET, spacing=s)[-1]
            vru_slots.append((x, y, heading))
    return polylines, vehicle_slots, vru_slots


def _curve_layout():
    polylines = [
        MapPolyline("lane_ring", _arc(CURVE_RADIUS), "lane"),
        MapPolyline("boundary_inner", _arc(CURVE_RADIUS - 2.0), "road_boundary_line"),
        MapPolyline("boundary_outer", _arc(CURVE_RADIUS + 2.0), "road_boundary_line"),
        MapPolyline("sidewalk_outer", _arc(CURVE_RADIUS + 4.0), "sidewalk"),
    ]
    vehicle_slots = []
    circumference = 2 * np.pi * CURVE_RADIUS
    for s in np.arange(0.0, circumference - VEHICLE_GAP, 15.0):
        theta = -np.pi / 2 + s / CURVE_RADIUS
        vehicle_slots.append((CURVE_RADIUS * np.cos(theta), CURVE_RADIUS * np.sin(theta), theta + np.pi / 2,
                              1.0 / CURVE_RADIUS))
    return polylines, vehicle_slots, []


def _intersection_layout():
    polylines = []
    vehicle_slots = []
    vru_slots = []
    arm_start = ARM_LENGTH
    for k, name in enumerate(("east", "north", "west", "south")):
        heading = k * np.pi / 2
        c, s = np.cos(heading), np.sin(heading)
        start = (-arm_start * c, -arm_start * s)
        polylines.append(MapPolyline(f"lane_{name}", _line(start, heading, 2 * arm_start, -LANE_OFFSET), "lane"))
        # approach arm only, stopping at the junction box
        approach = arm_start - JUNCTION_HALF_SIZE
        polylines.append(MapPolyline(f"center_{name}", _line(start, heading, approach), "yellow_line"))
        polylines.append(MapPolyline(f"boundary_{name}", _line(start, heading, approach, -ROAD_HALF_WIDTH),
                                     "road_boundary_line"))
        polylines.append(MapPolyline(f"sidewalk_{name}", _line(start, heading, approach, -SIDEWALK_OFFSET),
                                     "sidewalk"))
        crossing = JUNCTION_HALF_SIZE + 2.0
        # across the approach arm, from its right edge to its left edge
        crosswalk_start = (-crossing * c + ROAD_HALF_WIDTH * s, -crossing * s - ROAD_HALF_WIDTH * c)
        polylines.append(MapPolyline(
            f"crosswalk_{name}",
            _line(crosswalk_start, heading + np.pi / 2, 2 * ROAD_HALF_WIDTH, spacing=1.0),
            "crosswalk"))
        stop = _line(start, heading, approach, -LANE_OFFSET, spacing=approach)[-1]
        polylines.append(MapPolyline(
            f"stop_sign_{name}", _line((stop[0], stop[1]), heading + np.pi / 2, 1.0, 0.0, spacing=1.0), "stop_sign"))
        for dist in np.arange(5.0, approach - 6.0, VEHICLE_GAP):
            x, y, _ = _line(start, heading, dist, -LANE_OFFSET, spacing=dist)[-1]
            vehicle_slots.append((x, y, heading, 0.0))
        for dist in np.arange(6.0, approach - 4.0, 8.0):
            x, y, _ = _line(start, heading, dist, -SIDEWALK_OFFSET, spacing=dist)[-1]
            vru_slots.append((x, y, heading))
    return polylines, vehicle_slots, vru_slots


_LAYOUTS = {"straight": _straight_layout, "curve": _curve_layout, "intersection": _intersection_layout}


def _simulate(initial, accel, yaw_rate, num_steps, dt):
    """Constant-control bicycle rollout; returns (T, 3) poses and (T, 2) global velocities."""
    poses = np.zeros((num_steps, 3))
    velocities = np.zeros((num_steps, 2))
    state = initial
    for t in range(num_steps):
        poses[t] = (state.x, state.y, state.psi)
        velocities[t] = (state.v * np.cos(state.psi), state.v * np.sin(state.psi))
        state = step_bicycle(state, accel, yaw_rate, dt)
    return poses, velocities


def _signal_tracks(scenario, rng):
    """Four signal heads at the stop lines; east/west and north/south run opposite phases."""
    segments = segment_polylines(scenario)
    shift = int(rng.integers(0, len(SIGNAL_CYCLE)))
    lights = []
    for k in range(4):
        heading = k * np.pi / 2
        c, s = np.cos(heading), np.sin(heading)
        distance = ARM_LENGTH - JUNCTION_HALF_SIZE
        stop = np.array([(-ARM_LENGTH + distance) * c + LANE_OFFSET * s,
                         (-ARM_LENGTH + distance) * s - LANE_OFFSET * c])
        offset = 0 if k % 2 == 0 else len(SIGNAL_CYCLE) // 2
        steps = (np.arange(scenario.num_steps) + shift + offset) % len(SIGNAL_CYCLE)
        lights.append(TrafficLightRecord(
            tl_id=k,
            attached_segment=nearest_valid_segment((stop[0], stop[1], heading), segments),
            stop_point=stop,
            heading=heading,
            states=SIGNAL_CYCLE[steps],
        ))
    return lights


def synth_scenario(template, num_agents, seed, num_steps=DEFAULT_NUM_STEPS, dt=DEFAULT_DT):
    """
    Generate a synthetic scenario.

    Parameters:
    - template (str): One of "straight", "curve", "intersection".
    - num_agents (int): Number of agents (>= 1); agent 0 is the SDC and always a vehicle.
    - seed (int): Seed for numpy's default_rng; equal seeds give identical scenarios.
    - num_steps (int): Horizon in steps.
    - dt (float): Step length in seconds.

    Returns:
    - ScenarioDescription: A validated scenario with vehicles ordered first.
    """
    if template not in _LAYOUTS:
        raise ValueError(f"unknown template '{template}', expected one of {TEMPLATES}")
    if num_agents < 1:
        raise ScenarioValidationError("num_agents", f"must be >= 1, got {num_agents}")

    rng = np.random.default_rng(seed)
    polylines, vehicle_slots, vru_slots = _LAYOUTS[template]()

    num_vru = 0
    if vru_slots and num_agents > 1:
        num_vru = min(int(rng.binomial(num_agents - 1, 0.2)), len(vru_slots))
    num_vehicles = num_agents - num_vru
    if num_vehicles > len(vehicle_slots):
        # spill onto the sidewalks before giving up
        spill = min(num_vehicles - len(vehicle_slots), len(vru_slots) - num_vru)
        num_vru += spill
        num_vehicles -= spill
    if num_vehicles > len(vehicle_slots) or num_vru > len(vru_slots):
        console.print(f"[error]Cannot place {num_agents} agents on template '{template}'.[/error]", style="error")
        raise PlacementError(
            f"{num_agents} agents exceed the capacity of template '{template}' "
            f"({len(vehicle_slots)} vehicle + {len(vru_slots)} sidewalk slots)")

    agents = []
    for slot_index in rng.permutation(len(vehicle_slots))[:num_vehicles]:
        x, y, heading, curvature = vehicle_slots[slot_index]
        if curvature > 0:
            # speed chosen so that v / R is a yaw-rate grid value
            j = _ZERO_YAW + int(rng.integers(1, 4))
            yaw_rate = float(YAW_RATES[j])
            speed = yaw_rate / curvature
            accel = float(ACCELERATIONS[_ZERO_ACCEL])
        else:
            speed = float(rng.uniform(3.0, 10.0))
            yaw_rate = float(YAW_RATES[_ZERO_YAW])
            accel = float(ACCELERATIONS[_ZERO_ACCEL + int(rng.integers(0, 2))])
        poses, velocities = _simulate(KinState(x, y, heading, speed), accel, yaw_rate, num_steps, dt)
        agents.append(AgentRecord(len(agents), VEHICLE, _vehicle_shape(rng), poses, velocities,
                                  np.ones(num_steps, dtype=bool)))

    vru_types = sorted(PEDESTRIAN if rng.random() < 0.6 else CYCLIST for _ in range(num_vru))
    for agent_type, slot_index in zip(vru_types, rng.permutation(len(vru_slots))[:num_vru]):
        x, y, heading = vru_slots[slot_index]
        speed = float(rng.uniform(1.0, 1.6) if agent_type == PEDESTRIAN else rng.uniform(3.0, 4.5))
        poses, velocities = _simulate(KinState(x, y, heading, speed), float(ACCELERATIONS[_ZERO_ACCEL]),
                                      float(YAW_RATES[_ZERO_YAW]), num_steps, dt)
        agents.append(AgentRecord(len(agents), agent_type, _vru_shape(agent_type, rng), poses, velocities,
                                  np.ones(num_steps, dtype=bool)))

    scenario = ScenarioDescription(
        scenario_id=f"{template}_{num_agents}_{seed}",
        dt=dt,
        num_steps=num_steps,
        polylines=polylines,
        agents=agents,
        sdc_index=0,
    )
    if template == "intersection":
        scenario.traffic_lights = _signal_tracks(scenario, rng)
    return scenario.validate()


def synth_corpus(template, count, num_agents, seed):
    """
    Generate `count` scenarios with consecutive seeds starting at `seed`.
    """
    scenarios = [synth_scenario(template, num_agents, seed + i) for i in range(count)]
    console.print(f"[success]{count} '{template}' scenarios synthesized.[/success]", style="success")
    return scenarios
