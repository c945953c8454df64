"""
This module assembles the autoregressive token stream of a scenario and derives the attention structure the
model consumes: the group-causal mask, the spatial KNN mask and the relative geometric deltas between anchors.

Per step the stream is: TL block, AS_START, one 4-token block per agent (SOA, TYPE, MS, RS) in id order,
AS_END, MO block. Map tokens are not part of the stream; the model reaches them through cross-attention.
"""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from src.console import console
from src.errors import ConsistencyError
from src.geo_utils import GeoUtils
from src.kinematics import MOTION_START, best_motion_label, kin_state_from_agent
from src.map_codec import nearest_valid_segment, segment_arrays
from src.state_codec import FieldRanges, encode_relative

MODES = ("pretrain", "full")

GROUPS = ("MAP", "TL", "AS_START", "AS_SOA", "AS_TYPE", "AS_MS", "AS_RS", "AS_END", "MO")
GROUP_INDEX = {name: i for i, name in enumerate(GROUPS)}
AS_GROUPS = ("AS_START", "AS_SOA", "AS_TYPE", "AS_MS", "AS_RS", "AS_END")
AGENT_BLOCK = ("AS_SOA", "AS_TYPE", "AS_MS", "AS_RS")

# TL precedes AS precedes MO inside a step
PHASE = {"MAP": -1, "TL": 0, "MO": 2, **{g: 1 for g in AS_GROUPS}}

OWNER_NONE, OWNER_AGENT, OWNER_LIGHT = 0, 1, 2

DEFAULT_KNN = 32


@dataclass
class Token:
    group: str
    step: int
    owner_kind: int = OWNER_NONE
    owner_id: int = -1
    intra: int = 0
    anchor: tuple = None
    payload: dict = field(default_factory=dict)
    target: dict = None

    @property
    def owner(self):
        if self.owner_kind == OWNER_AGENT:
            return f"agent:{self.owner_id}"
        if self.owner_kind == OWNER_LIGHT:
            return f"light:{self.owner_id}"
        return None

    def to_record(self):
        return {
            "group": self.group,
            "step": int(self.step),
            "owner": self.owner,
            "intra": int(self.intra),
            "anchor": None if self.anchor is None else [float(a) for a in self.anchor],
            "payload": self.payload,
            "target": self.target,
        }

    @classmethod
    def from_record(cls, record):
        owner_kind, owner_id = OWNER_NONE, -1
        if isinstance(record.get("owner"), str):
            kind, _, ident = record["owner"].partition(":")
            owner_kind = OWNER_AGENT if kind == "agent" else OWNER_LIGHT
            owner_id = int(ident)
        anchor = record.get("anchor")
        target = record.get("target")
        return cls(
            group=str(record["group"]),
            step=int(record["step"]),
            owner_kind=owner_kind,
            owner_id=owner_id,
            intra=int(record.get("intra", 0)),
            anchor=tuple(float(a) for a in anchor) if isinstance(anchor, (list, tuple)) else None,
            payload=dict(record.get("payload") or {}),
            target=dict(target) if isinstance(target, dict) else None,
        )


@dataclass
class TokenSequence:
    """
    Flattened token stream of one scenario plus the bookkeeping needed to rebuild its masks.
    """
    scenario_id: str
    mode: str
    num_steps: int
    num_map_tokens: int
    tokens: list = field(default_factory=list)

    def __len__(self):
        return len(self.tokens)

    def append(self, token):
        self.tokens.append(token)

    def extend(self, tokens):
        self.tokens.extend(tokens)

    def group_counts(self):
        counts = {name: 0 for name in GROUPS}
        for token in self.tokens:
            counts[token.group] += 1
        return counts

    def to_frame(self):
        return pd.DataFrame([token.to_record() for token in self.tokens],
                            columns=["group", "step", "owner", "intra", "anchor", "payload", "target"])

    def to_jsonl(self, path):
        """
        Write one token per line. The first line is a header record describing the sequence.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = pd.DataFrame([{
            "group": "HEADER", "step": -1, "owner": None, "intra": 0, "anchor": None,
            "payload": {"scenario_id": self.scenario_id, "mode": self.mode, "num_steps": self.num_steps,
                        "num_map_tokens": self.num_map_tokens},
            "target": None,
        }])
        frame = pd.concat([header, self.to_frame()], ignore_index=True)
        frame.to_json(path, orient="records", lines=True)
        return path

    @classmethod
    def read_jsonl(cls, path):
        frame = pd.read_json(path, lines=True, dtype=False, convert_dates=False)
        records = frame.to_dict(orient="records")
        header = records[0]["payload"]
        return cls(
            scenario_id=str(header["scenario_id"]),
            mode=str(header["mode"]),
            num_steps=int(header["num_steps"]),
            num_map_tokens=int(header["num_map_tokens"]),
            tokens=[Token.from_record(record) for record in records[1:]],
        )


def tl_token(light, t, state, target=None):
    """Traffic-light token carrying the signal state at step t."""
    x, y = light.stop_point
    return Token(
        group="TL", step=t, owner_kind=OWNER_LIGHT, owner_id=int(light.tl_id),
        anchor=(float(x), float(y), float(light.heading), float(t)),
        payload={"state": int(state), "tl_id": int(light.tl_id), "segment": int(light.attached_segment)},
        target=None if target is None else {"tl": int(target)},
    )


def sentinel_token(group, t, intra, next_target=None):
    return Token(group=group, step=t, intra=intra,
                 target=None if next_target is None else {"next": int(next_target)})


def agent_state_tokens(agent_id, agent_type, segment, relative, pose, t, slot, is_last=None):
    """
    The 4-token block of one agent. Targets follow the generation order: SOA predicts the type, TYPE the map
    segment, MS the relative-state bins and RS whether another agent follows.

    Parameters:
    - agent_id (int), agent_type (int): Identity and category.
    - segment (MapSegment): Anchor segment.
    - relative (RelativeState): Encoded state with bins.
    - pose (tuple): Agent global (x, y, psi).
    - t (int): Step.
    - slot (int): Position of the agent block inside the step.
    - is_last (bool): Whether this is the last agent of the step; None leaves the RS target absent.

    Returns:
    - list of Token: SOA, TYPE, MS, RS.
    """
    bins = [int(b) for b in relative.bins]
    base = 1 + 4 * slot
    common = {"agent_id": int(agent_id)}
    sx, sy, spsi = segment.anchor
    return [
        Token("AS_SOA", t, OWNER_AGENT, int(agent_id), base, None, dict(common),
              {"type": int(agent_type)}),
        Token("AS_TYPE", t, OWNER_AGENT, int(agent_id), base + 1, None,
              {**common, "type": int(agent_type)}, {"map_id": int(segment.segment_id)}),
        Token("AS_MS", t, OWNER_AGENT, int(agent_id), base + 2, (sx, sy, spsi, float(t)),
              {**common, "type": int(agent_type), "map_id": int(segment.segment_id)}, {"rs": bins}),
        Token("AS_RS", t, OWNER_AGENT, int(agent_id), base + 3,
              (float(pose[0]), float(pose[1]), float(pose[2]), float(t)),
              {**common, "type": int(agent_type), "map_id": int(segment.segment_id), "rs": bins},
              None if is_last is None else {"next": int(bool(is_last))}),
    ]


def motion_token(agent_id, agent_type, pose, velocity, shape, t, input_label, target_label=None, target_ace=None):
    """
    Motion token at step t. The payload carries the label that led to the current pose (the start label
    on first appearance), the velocity in the agent frame and the box shape.
    """
    local_v = GeoUtils.to_local(velocity[0], velocity[1], pose[2])
    target = None
    if target_label is not None:
        target = {"motion": int(target_label)}
        if target_ace is not None:
            target["ace"] = float(target_ace)
    return Token(
        group="MO", step=t, owner_kind=OWNER_AGENT, owner_id=int(agent_id),
        anchor=(float(pose[0]), float(pose[1]), float(pose[2]), float(t)),
        payload={"agent_id": int(agent_id), "type": int(agent_type), "label": int(input_label),
                 "velocity": [float(local_v[0]), float(local_v[1])],
                 "shape": [float(s) for s in shape]},
        target=target,
    )


def rank_agents_by_motion(scenario, n_max):
    """
    Indices of the `n_max` most dynamic agents by cumulative displacement over jointly valid steps, in
    agent order. The SDC is always kept.
    """
    if n_max is None or len(scenario.agents) <= n_max:
        return list(range(len(scenario.agents)))
    movement = np.zeros(len(scenario.agents))
    for i, agent in enumerate(scenario.agents):
        both = agent.valid[1:] & agent.valid[:-1]
        steps = np.linalg.norm(np.diff(agent.poses[:, :2], axis=0), axis=1)
        movement[i] = steps[both].sum()
    movement[scenario.sdc_index] = np.inf
    order = np.lexsort((np.arange(len(movement)), -movement))
    return sorted(int(i) for i in order[:n_max])


def count_tokens(num_lights, valid_agents_per_step, mode):
    """
    Closed-form stream length: per step, the lights, the agent-state region in full mode
    (2 sentinels + 4 per agent) and one motion token per agent.
    """
    total = 0
    for n in valid_agents_per_step:
        total += num_lights + n
        if mode == "full":
            total += 2 + 4 * n
    return total


def build_sequence(scenario, segments, mode="full", n_max=None, ranges=None):
    """
    Build the token stream of a scenario with ground-truth targets.

    Parameters:
    - scenario (ScenarioDescription): The scenario.
    - segments (list of MapSegment): Segments produced from the same scenario.
    - mode (str): "pretrain" (no agent-state tokens) or "full".
    - n_max (int): Cap on the number of agents kept, by cumulative movement.
    - ranges (FieldRanges): Relative-state quantizer table.

    Returns:
    - TokenSequence: The ordered stream.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode '{mode}', expected one of {MODES}")
    if not segments:
        raise ConsistencyError(f"scenario '{scenario.scenario_id}' has no segments")
    polyline_ids = {p.id for p in scenario.polylines}
    stray = [s.segment_id for s in segments if s.source_polyline not in polyline_ids]
    if stray:
        raise ConsistencyError(
            f"segments {stray[:5]} do not come from scenario '{scenario.scenario_id}'")
    for light in scenario.traffic_lights:
        if light.attached_segment >= len(segments):
            raise ConsistencyError(
                f"traffic light {light.tl_id} refers to segment {light.attached_segment}, "
                f"only {len(segments)} segments exist")

    ranges = ranges or FieldRanges()
    arrays = segment_arrays(segments)
    kept = [scenario.agents[i] for i in rank_agents_by_motion(scenario, n_max)]
    kept.sort(key=lambda agent: agent.agent_id)
    dt = scenario.dt
    last = scenario.num_steps - 1

    labels = {}
    for agent in kept:
        for t in range(last):
            if agent.valid[t] and agent.valid[t + 1]:
                labels[(agent.agent_id, t)] = best_motion_label(
                    kin_state_from_agent(agent, t), agent.shape, agent.poses[t + 1], dt, return_error=True)

    sequence = TokenSequence(scenario.scenario_id, mode, scenario.num_steps, len(segments))
    for t in range(scenario.num_steps):
        for light in scenario.traffic_lights:
            target = light.states[t + 1] if t < last else None
            sequence.append(tl_token(light, t, light.states[t], target))

        present = [agent for agent in kept if agent.valid[t]]
        if mode == "full":
            sequence.append(sentinel_token("AS_START", t, 0, next_target=0 if present else 1))
            for slot, agent in enumerate(present):
                pose = agent.poses[t]
                segment = segments[nearest_valid_segment(pose, segments, relax=True, arrays=arrays)]
                relative = encode_relative(pose, agent.velocities[t], agent.shape, segment, ranges)
                sequence.extend(agent_state_tokens(agent.agent_id, agent.agent_type, segment, relative, pose, t,
                                                   slot, is_last=slot == len(present) - 1))
            sequence.append(sentinel_token("AS_END", t, 1 + 4 * len(present)))

        for agent in present:
            previous = labels.get((agent.agent_id, t - 1))
            input_label = previous[0] if previous is not None else MOTION_START
            target = labels.get((agent.agent_id, t))
            sequence.append(motion_token(
                agent.agent_id, agent.agent_type, agent.poses[t], agent.velocities[t], agent.shape, t,
                input_label,
                None if target is None else target[0],
                None if target is None else target[1],
            ))
    return sequence


def _token_arrays(tokens):
    step = np.array([tok.step for tok in tokens], dtype=np.int64)
    phase = np.array([PHASE[tok.group] for tok in tokens], dtype=np.int64)
    group = np.array([GROUP_INDEX[tok.group] for tok in tokens], dtype=np.int64)
    owner_kind = np.array([tok.owner_kind for tok in tokens], dtype=np.int64)
    owner_id = np.array([tok.owner_id for tok in tokens], dtype=np.int64)
    return step, phase, group, owner_kind, owner_id


def group_causal_mask(sequence):
    """
    Boolean (query, key) matrix; True where attention is allowed. A key is visible when it is in the same
    TL or MO block of the step, belongs to the same owner at an earlier step, belongs to an earlier group of
    the step or to the previous step, or precedes the query inside the step's agent-state region.
    """
    tokens = sequence.tokens if isinstance(sequence, TokenSequence) else sequence
    step, phase, group, owner_kind, owner_id = _token_arrays(tokens)
    position = np.arange(len(tokens))

    same_step = step[:, None] == step[None, :]
    block_group = (group == GROUP_INDEX["TL"]) | (group == GROUP_INDEX["MO"])
    same_block = same_step & (group[:, None] == group[None, :]) & block_group[:, None]

    owned = owner_kind != OWNER_NONE
    same_owner = ((owner_kind[:, None] == owner_kind[None, :]) & (owner_id[:, None] == owner_id[None, :])
                  & owned[:, None] & owned[None, :])
    owner_history = same_owner & (step[None, :] < step[:, None])

    earlier_group = same_step & (phase[None, :] < phase[:, None])
    previous_step = step[None, :] == step[:, None] - 1

    is_as = phase == 1
    as_causal = same_step & is_as[:, None] & is_as[None, :] & (position[None, :] <= position[:, None])

    return same_block | owner_history | earlier_group | previous_step | as_causal


def token_anchors(tokens):
    """(T, 4) anchors and (T,) presence flags; absent anchors are zero rows."""
    anchors = np.zeros((len(tokens), 4), dtype=np.float64)
    present = np.zeros(len(tokens), dtype=bool)
    for i, tok in enumerate(tokens):
        if tok.anchor is not None:
            anchors[i] = tok.anchor
            present[i] = True
    return anchors, present


def nearest_keys_mask(anchors_q, present_q, anchors_k, present_k, k, base_mask, keep_self=False):
    """
    Keep, for every anchored query, only the k nearest anchored keys among those `base_mask` allows
    (planar distance, ties to the earlier key). Unanchored queries and keys keep their entries.
    With `keep_self` (queries and keys are the same tokens) a query always keeps its own key.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    mask = np.array(base_mask, dtype=bool, copy=True)
    for q in np.flatnonzero(present_q):
        keys = np.flatnonzero(mask[q] & present_k)
        if len(keys) <= k:
            continue
        distance = np.hypot(anchors_k[keys, 0] - anchors_q[q, 0], anchors_k[keys, 1] - anchors_q[q, 1])
        if keep_self:
            distance[keys == q] = -1.0
        mask[q, keys[np.argsort(distance, kind="stable")[k:]]] = False
    return mask


def knn_mask(sequence, k=DEFAULT_KNN, base_mask=None):
    """
    Restrict attention between anchored tokens to the k nearest allowed keys. Rows or columns without an
    anchor are left as they are.
    """
    tokens = sequence.tokens if isinstance(sequence, TokenSequence) else sequence
    mask = group_causal_mask(tokens) if base_mask is None else base_mask
    anchors, present = token_anchors(tokens)
    return nearest_keys_mask(anchors, present, anchors, present, k, mask, keep_self=True)


def relative_deltas(query, key):
    """
    Key anchor relative to the query anchor, in the query frame.

    Returns:
    - tuple: ((dx, dy, dpsi, dt), anchored). Deltas are zeros when either token lacks an anchor.
    """
    if query.anchor is None or key.anchor is None:
        return (0.0, 0.0, 0.0, 0.0), False
    xq, yq, pq, tq = query.anchor
    xk, yk, pk, tk = key.anchor
    dx, dy = GeoUtils.to_local(xk - xq, yk - yq, pq)
    return (float(dx), float(dy), GeoUtils.wrap_angle(pk - pq), float(tk - tq)), True


def relative_delta_matrix(anchors_q, present_q, anchors_k, present_k, same_time=False):
    """
    Vectorized relative_deltas over all (query, key) pairs.

    Parameters:
    - anchors_q, anchors_k (ndarray): (Tq, 4) and (Tk, 4) anchors (x, y, psi, t).
    - present_q, present_k (ndarray): Anchor presence flags.
    - same_time (bool): Treat keys as living at the query's time (static map keys).

    Returns:
    - tuple: (Tq, Tk, 4) deltas and (Tq, Tk) both-anchored flags.
    """
    anchors_q = np.asarray(anchors_q, dtype=np.float64)
    anchors_k = np.asarray(anchors_k, dtype=np.float64)
    gx = anchors_k[None, :, 0] - anchors_q[:, None, 0]
    gy = anchors_k[None, :, 1] - anchors_q[:, None, 1]
    dx, dy = GeoUtils.to_local(gx, gy, anchors_q[:, None, 2])
    dpsi = GeoUtils.wrap_angle(anchors_k[None, :, 2] - anchors_q[:, None, 2])
    if same_time:
        dt = np.zeros_like(gx)
    else:
        dt = anchors_k[None, :, 3] - anchors_q[:, None, 3]
    deltas = np.stack([dx, dy, np.broadcast_to(dpsi, gx.shape), dt], axis=-1)
    both = np.asarray(present_q)[:, None] & np.asarray(present_k)[None, :]
    deltas = np.where(both[..., None], deltas, 0.0)
    return deltas, both


def mask_summary(sequence, mask):
    """
    Allowed-pair counts per (query group, key group), as a DataFrame indexed by query group.
    """
    tokens = sequence.tokens if isinstance(sequence, TokenSequence) else sequence
    names = [tok.group for tok in tokens]
    rows, cols = np.nonzero(mask)
    frame = pd.DataFrame({"query": [names[i] for i in rows], "key": [names[j] for j in cols]})
    present = [g for g in GROUPS if g in set(names)]
    table = pd.crosstab(frame["query"], frame["key"]).reindex(index=present, columns=present, fill_value=0)
    return table


def tokenize_scenario(scenario, segments, mode="full", n_max=None, ranges=None, k=DEFAULT_KNN):
    """
    Build the stream and its masks for one scenario and report the token counts.
    """
    sequence = build_sequence(scenario, segments, mode, n_max, ranges)
    mask = knn_mask(sequence, k)
    console.print(f"[success]Scenario '{scenario.scenario_id}' tokenized: {len(sequence)} tokens "
                  f"({mode} mode, {len(segments)} map tokens).[/success]", style="success")
    return sequence, mask
