"""
Kinematics: first-order bicycle propagation, the discrete (acceleration, yaw-rate) motion vocabulary,
oriented box corners and the Average-Corner-Error search that labels ground-truth motion.
"""
from dataclasses import dataclass

import numpy as np

from src.geo_utils import GeoUtils

ACCEL_RANGE = (-10.0, 10.0)
YAW_RATE_RANGE = (-np.pi / 2, np.pi / 2)
NUM_MOTION_BINS = 33
NUM_MOTION_CONTROLS = NUM_MOTION_BINS * NUM_MOTION_BINS
MOTION_START = NUM_MOTION_CONTROLS
MOTION_VOCAB_SIZE = NUM_MOTION_CONTROLS + 1
DEFAULT_DT = 0.5

ACCELERATIONS = np.linspace(ACCEL_RANGE[0], ACCEL_RANGE[1], NUM_MOTION_BINS)
YAW_RATES = np.linspace(YAW_RATE_RANGE[0], YAW_RATE_RANGE[1], NUM_MOTION_BINS)
# flattened index = i * 33 + j, acceleration outer
_GRID_A = np.repeat(ACCELERATIONS, NUM_MOTION_BINS)
_GRID_W = np.tile(YAW_RATES, NUM_MOTION_BINS)


@dataclass(frozen=True)
class KinState:
    x: float
    y: float
    psi: float
    v: float

    @property
    def pose(self):
        return (self.x, self.y, self.psi)


def step_bicycle(state, a, omega, dt=DEFAULT_DT):
    """
    Advance a kinematic state by one step. Heading and speed update first, then the position
    moves with the new speed along the new heading. Speed is not clamped.

    Parameters:
    - state (KinState): Current state.
    - a (float or ndarray): Acceleration in m/s^2.
    - omega (float or ndarray): Yaw rate in rad/s.
    - dt (float): Step length in seconds.

    Returns:
    - KinState: Next state (fields are arrays when a/omega are arrays).
    """
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    psi = GeoUtils.wrap_angle(state.psi + omega * dt)
    v = state.v + a * dt
    x = state.x + v * np.cos(psi) * dt
    y = state.y + v * np.sin(psi) * dt
    return KinState(x, y, psi, v)


def motion_vocab():
    """
    The 1089 regular (acceleration, yaw-rate) pairs in flattened order followed by None for the start label.
    """
    return [(float(a), float(w)) for a, w in zip(_GRID_A, _GRID_W)] + [None]


def label_to_control(index):
    """
    Map a motion label to its (acceleration, yaw-rate) pair; the start label has no control.
    """
    index = int(index)
    if index == MOTION_START:
        return None
    if not 0 <= index < NUM_MOTION_CONTROLS:
        raise ValueError(f"motion label {index} outside [0, {MOTION_START}]")
    return float(_GRID_A[index]), float(_GRID_W[index])


def control_to_label(a, omega):
    """Nearest grid label for a continuous control pair."""
    i = int(np.argmin(np.abs(ACCELERATIONS - a)))
    j = int(np.argmin(np.abs(YAW_RATES - omega)))
    return i * NUM_MOTION_BINS + j


def is_start_label(index):
    return int(index) == MOTION_START


def box_corners(pose, shape):
    """
    Corners of an oriented length x width box centered at the pose, ordered
    front-left, front-right, rear-right, rear-left.

    Parameters:
    - pose (tuple or ndarray): (x, y, psi); trailing dimension 3 for batches.
    - shape (tuple or ndarray): (length, width[, height]).

    Returns:
    - ndarray: (..., 4, 2) corner coordinates.
    """
    pose = np.asarray(pose, dtype=np.float64)
    length, width = float(shape[0]), float(shape[1])
    half = np.array([[length / 2, width / 2],
                     [length / 2, -width / 2],
                     [-length / 2, -width / 2],
                     [-length / 2, width / 2]])
    c = np.cos(pose[..., 2])[..., None]
    s = np.sin(pose[..., 2])[..., None]
    xs = pose[..., 0][..., None] + c * half[:, 0] - s * half[:, 1]
    ys = pose[..., 1][..., None] + s * half[:, 0] + c * half[:, 1]
    return np.stack([xs, ys], axis=-1)


def ace(cand_corners, gt_corners):
    """
    Average Corner Error: mean Euclidean distance between corresponding corners.
    Batched over any leading dimensions of cand_corners.
    """
    diff = np.asarray(cand_corners) - np.asarray(gt_corners)
    return np.sqrt(np.sum(diff * diff, axis=-1)).mean(axis=-1)


def candidate_poses(state, dt=DEFAULT_DT):
    """Next poses for every regular motion label, shape (1089, 3)."""
    nxt = step_bicycle(state, _GRID_A, _GRID_W, dt)
    return np.stack([nxt.x, nxt.y, nxt.psi], axis=-1)


def best_motion_label(state, shape, gt_next_pose, dt=DEFAULT_DT, return_error=False):
    """
    Enumerate all regular motion labels and return the one whose propagated box has the least
    Average Corner Error against the ground-truth box. Ties resolve to the lowest index.

    Parameters:
    - state (KinState): State at the current step.
    - shape (tuple): (length, width[, height]) of the agent.
    - gt_next_pose (tuple): Ground-truth (x, y, psi) at the next step.
    - dt (float): Step length in seconds.
    - return_error (bool): Also return the minimum ACE.

    Returns:
    - int or (int, float): Motion label index (and its ACE).
    """
    errors = ace(box_corners(candidate_poses(state, dt), shape), box_corners(gt_next_pose, shape))
    index = int(np.argmin(errors))
    if return_error:
        return index, float(errors[index])
    return index


def kin_state_from_agent(agent, t):
    """Kinematic state of a scenario agent at step t; speed is the velocity projected on the heading."""
    x, y, psi = agent.poses[t]
    return KinState(float(x), float(y), float(psi), agent.speed(t))


def rollout_labels(state, labels, dt=DEFAULT_DT):
    """
    Replay a motion-label log from an initial state.

    Parameters:
    - state (KinState): Initial state.
    - labels (iterable of int): Regular motion labels, one per step.

    Returns:
    - list of KinState: The initial state followed by one state per label.
    """
    states = [state]
    for label in labels:
        a, omega = label_to_control(label)
        state = step_bicycle(state, a, omega, dt)
        states.append(state)
    return states
