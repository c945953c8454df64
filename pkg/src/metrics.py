"""
This module computes the evaluation metrics of generated scenarios: MMD over initial-state attributes,
displacement errors and diversity across rollouts, and oriented-box collision checks.
"""
from collections import defaultdict
from itertools import combinations

import numpy as np
from rich.table import Table
from scipy.spatial.distance import cdist, pdist
from shapely import STRtree
from shapely.geometry import Polygon

from src.console import console
from src.errors import MetricError, PairingError
from src.kinematics import box_corners
from src.scenario_model import VEHICLE

ATTRIBUTES = ("position", "heading", "size", "velocity")
DISPLACEMENT_KEYS = ("ADE_avg", "ADE_min", "FDE_avg", "FDE_min", "ADD", "FDD")
PROTOCOLS = ("strict", "relaxed")
STRICT_RADIUS = 50.0


def mmd(a, b, bandwidth="auto"):
    """
    Squared Maximum Mean Discrepancy (V-statistic) with a Gaussian kernel exp(-|x-y|^2 / (2 sigma^2)).

    Parameters:
    - a, b (array-like): (n, d) and (m, d) samples.
    - bandwidth (float or "auto"): Kernel width; "auto" uses the median pairwise distance of the pooled
      samples (1.0 when that median is 0).

    Returns:
    - float: The discrepancy, clipped at 0.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise MetricError("MMD needs two non-empty sample sets")
    if a.shape[1] != b.shape[1]:
        raise MetricError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if bandwidth == "auto":
        pooled = np.concatenate([a, b], axis=0)
        sigma = float(np.median(pdist(pooled))) if len(pooled) > 1 else 0.0
        sigma = sigma if sigma > 0 else 1.0
    else:
        sigma = float(bandwidth)
        if sigma <= 0:
            raise MetricError(f"bandwidth must be > 0, got {sigma}")

    def kernel(x, y):
        return np.exp(-cdist(x, y, "sqeuclidean") / (2.0 * sigma ** 2)).mean()

    return max(kernel(a, a) + kernel(b, b) - 2.0 * kernel(a, b), 0.0)


def initial_state_samples(scenario, protocol="relaxed", ego_position=None):
    """
    Collect the four attribute sample sets from each agent's first valid state.

    Parameters:
    - scenario (ScenarioDescription): Scenario to sample.
    - protocol (str): "strict" keeps vehicles within 50 m of the ego; "relaxed" keeps all agents.
    - ego_position (tuple): Reference for the strict radius; defaults to the scenario's SDC at step 0.

    Returns:
    - dict: attribute -> (n, d) array; position (x, y), heading (sin, cos), size (l, w, h), velocity (vx, vy).
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol '{protocol}', expected one of {PROTOCOLS}")
    if ego_position is None and scenario.agents:
        ego_position = scenario.sdc.poses[0, :2]
    samples = {name: [] for name in ATTRIBUTES}
    for agent in scenario.agents:
        valid = np.flatnonzero(agent.valid)
        if not len(valid):
            continue
        t = valid[0]
        x, y, psi = agent.poses[t]
        if protocol == "strict":
            if agent.agent_type != VEHICLE or ego_position is None:
                continue
            if np.hypot(x - ego_position[0], y - ego_position[1]) > STRICT_RADIUS:
                continue
        samples["position"].append([x, y])
        samples["heading"].append([np.sin(psi), np.cos(psi)])
        samples["size"].append(agent.shape.tolist())
        samples["velocity"].append(agent.velocities[t].tolist())
    dims = {"position": 2, "heading": 2, "size": 3, "velocity": 2}
    return {name: np.asarray(values, dtype=np.float64).reshape(-1, dims[name]) for name, values in samples.items()}


def _track(agent, num_steps):
    positions = np.full((num_steps, 2), np.nan)
    valid = np.zeros(num_steps, dtype=bool)
    steps = min(num_steps, agent.num_steps)
    positions[:steps] = agent.poses[:steps, :2]
    valid[:steps] = agent.valid[:steps]
    return positions, valid


def displacement_metrics(rollouts, gt):
    """
    Displacement errors against ground truth and diversity across rollouts, averaged over agents present in
    both. Errors use jointly valid steps; the final error uses the last jointly valid step.

    Parameters:
    - rollouts (list of ScenarioDescription): K rollouts of the same scenario.
    - gt (ScenarioDescription): Ground truth.

    Returns:
    - dict: ADE_avg, ADE_min, FDE_avg, FDE_min, ADD, FDD and diversity_defined (False when K = 1).
    """
    if not rollouts:
        raise MetricError("displacement metrics need at least one rollout")
    for rollout in rollouts:
        if rollout.scenario_id != gt.scenario_id:
            raise PairingError(f"rollout '{rollout.scenario_id}' does not belong to '{gt.scenario_id}'")
    num_steps = gt.num_steps
    ade, fde, add, fdd = [], [], [], []
    for agent in gt.agents:
        tracks = []
        for rollout in rollouts:
            try:
                tracks.append(_track(rollout.agent_by_id(agent.agent_id), num_steps))
            except KeyError:
                tracks.append(None)
        if any(track is None for track in tracks):
            continue
        gt_positions, gt_valid = _track(agent, num_steps)
        per_rollout_ade, per_rollout_fde = [], []
        for positions, valid in tracks:
            joint = np.flatnonzero(valid & gt_valid)
            if not len(joint):
                break
            error = np.linalg.norm(positions[joint] - gt_positions[joint], axis=1)
            per_rollout_ade.append(error.mean())
            per_rollout_fde.append(error[-1])
        else:
            ade.append(per_rollout_ade)
            fde.append(per_rollout_fde)
            pair_avg, pair_final = [], []
            for (p, vp), (q, vq) in combinations(tracks, 2):
                joint = np.flatnonzero(vp & vq)
                if not len(joint):
                    continue
                gap = np.linalg.norm(p[joint] - q[joint], axis=1)
                pair_avg.append(gap.mean())
                pair_final.append(gap[-1])
            if pair_avg:
                add.append(np.mean(pair_avg))
                fdd.append(np.mean(pair_final))
    if not ade:
        raise MetricError(f"no agent of '{gt.scenario_id}' is jointly valid in every rollout")
    ade, fde = np.asarray(ade), np.asarray(fde)
    return {
        "ADE_avg": float(ade.mean()),
        "ADE_min": float(ade.min(axis=1).mean()),
        "FDE_avg": float(fde.mean()),
        "FDE_min": float(fde.min(axis=1).mean()),
        "ADD": float(np.mean(add)) if add else 0.0,
        "FDD": float(np.mean(fdd)) if fdd else 0.0,
        "diversity_defined": len(rollouts) > 1,
    }


def _separated(a, b):
    """Separating-axis test for two (4, 2) corner arrays; touching boxes count as separated."""
    for corners in (a, b):
        edges = np.roll(corners, -1, axis=0) - corners
        axes = np.stack([-edges[:, 1], edges[:, 0]], axis=-1)
        for axis in axes:
            pa, pb = a @ axis, b @ axis
            if pa.max() <= pb.min() or pb.max() <= pa.min():
                return True
    return False


def boxes_overlap(pose_a, shape_a, pose_b, shape_b):
    return not _separated(box_corners(pose_a, shape_a), box_corners(pose_b, shape_b))


def collision_check(boxes):
    """
    All overlapping pairs among oriented boxes.

    Parameters:
    - boxes (list of tuple): (pose (x, y, psi), shape (l, w[, h])) per box.

    Returns:
    - list of tuple: (i, j) index pairs with i < j, in ascending order.
    """
    if len(boxes) < 2:
        return []
    corners = [box_corners(pose, shape) for pose, shape in boxes]
    tree = STRtree([Polygon(c) for c in corners])
    pairs = set()
    for i, c in enumerate(corners):
        for j in tree.query(Polygon(c)):
            j = int(j)
            if j > i and not _separated(c, corners[j]):
                pairs.add((i, j))
    return sorted(pairs)


def scenario_collisions(scenario, t):
    """Overlapping agent-id pairs at step t among agents valid at t."""
    present = [a for a in scenario.agents if a.valid[t]]
    pairs = collision_check([(a.poses[t], a.shape) for a in present])
    return [(present[i].agent_id, present[j].agent_id) for i, j in pairs]


def pair_rollouts(predictions, ground_truth):
    """
    Group predicted scenarios by scenario id and match them with ground truth.

    Returns:
    - list of tuple: (gt scenario, list of predicted rollouts), in ground-truth order.
    """
    grouped = defaultdict(list)
    for scenario in predictions:
        grouped[scenario.scenario_id].append(scenario)
    known = {scenario.scenario_id for scenario in ground_truth}
    stray = sorted(set(grouped) - known)
    if stray:
        raise PairingError(f"predictions without ground truth: {stray}")
    missing = sorted(known - set(grouped))
    if missing:
        raise PairingError(f"ground truth without predictions: {missing}")
    return [(scenario, grouped[scenario.scenario_id]) for scenario in ground_truth]


def evaluate(predictions, ground_truth, protocol="relaxed"):
    """
    Full evaluation report: the six displacement metrics averaged over scenarios and the MMD of the four
    initial-state attributes between pooled predictions and pooled ground truth.

    Returns:
    - dict: Exactly the six displacement keys and mmd_<attribute> for the four attributes.
    """
    pairs = pair_rollouts(predictions, ground_truth)
    per_scenario = []
    pooled_pred = {name: [] for name in ATTRIBUTES}
    pooled_gt = {name: [] for name in ATTRIBUTES}
    diversity_defined = True
    for gt, rollouts in pairs:
        try:
            metrics = displacement_metrics(rollouts, gt)
            diversity_defined &= metrics["diversity_defined"]
            per_scenario.append(metrics)
        except MetricError as e:
            # generated scenes share no agent ids with the log
            console.print(f"[warning]{e}; displacement metrics skipped for this scenario.[/warning]",
                          style="warning")
        ego = gt.sdc.poses[0, :2] if gt.agents else None
        for name, values in initial_state_samples(gt, protocol, ego).items():
            pooled_gt[name].append(values)
        for rollout in rollouts:
            for name, values in initial_state_samples(rollout, protocol, ego).items():
                pooled_pred[name].append(values)
    if not diversity_defined:
        console.print("[warning]Single rollout per scenario: ADD and FDD are reported as 0.[/warning]",
                      style="warning")
    report = {key: float(np.mean([m[key] for m in per_scenario])) if per_scenario else float("nan")
              for key in DISPLACEMENT_KEYS}
    for name in ATTRIBUTES:
        report[f"mmd_{name}"] = mmd(np.concatenate(pooled_pred[name]), np.concatenate(pooled_gt[name]))
    console.print(f"[success]Evaluation finished over {len(pairs)} scenarios ({protocol} protocol).[/success]",
                  style="success")
    return report


def display_results(report, title="Evaluation report"):
    """
    Display the evaluation report as a table in the console.
    """
    table = Table(title=title, show_lines=True)
    table.add_column("Metric", justify="left", style="info")
    table.add_column("Value", justify="center", style="highlight")
    for key, value in report.items():
        table.add_row(key, f"{value:.4f}")
    console.print(table)
