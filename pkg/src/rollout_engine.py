"""
Closed-loop scenario generation. Every step emits the traffic-light block, the agent-state region (state-forced
survivors first, then injected agents) and the motion block, then advances all agents with the bicycle model
and retires the ones that left the map.
"""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from src.console import console
from src.errors import ConfigurationError, InjectionFailed
from src.geo_utils import MapIndex
from src.kinematics import MOTION_START, KinState, best_motion_label, kin_state_from_agent, label_to_control, \
    step_bicycle
from src.map_codec import nearest_valid_segment, segment_arrays
from src.metrics import boxes_overlap
from src.model import SequenceBatch
from src.sampling import DEFAULT_TOP_P, STRATEGIES, sample
from src.scenario_model import AGENT_TYPES, CYCLIST, PEDESTRIAN, VEHICLE, AgentRecord, ScenarioDescription, \
    TrafficLightRecord
from src.sequence_builder import OWNER_AGENT, Token, TokenSequence, agent_state_tokens, motion_token, \
    sentinel_token, tl_token
from src.state_codec import FieldRanges, decode_global, encode_relative, relative_from_bins

ROLLOUT_MODES = ("motion_prediction", "full_generation", "densification", "closed_loop")
INJECTING_MODES = ("full_generation", "densification", "closed_loop")
SAMPLED_HEADS = ("tl", "type", "map_id", "rs", "motion", "next")
DEFAULT_STRATEGIES = {"tl": "softmax", "type": "softmax", "map_id": "softmax", "rs": "softmax",
                      "motion": "nucleus", "next": "softmax"}
TYPE_ORDER = (VEHICLE, PEDESTRIAN, CYCLIST)
END_OF_AGENTS = 1


@dataclass
class RolloutConfig:
    mode: str = "motion_prediction"
    horizon: int = None
    max_agents: int = 128
    retries: int = 5
    target_agents: int = None
    force_end_logit_off: bool = False
    seed: int = 0
    forced_motion_steps: int = 2
    retire_margin: float = 20.0
    type_targets: dict = None
    strategies: dict = field(default_factory=dict)
    top_p: float = DEFAULT_TOP_P

    def __post_init__(self):
        if self.mode not in ROLLOUT_MODES:
            raise ConfigurationError(f"rollout.mode: unknown mode '{self.mode}', expected one of {ROLLOUT_MODES}")
        if self.horizon is not None and int(self.horizon) < 1:
            raise ConfigurationError(f"rollout.horizon: must be >= 1, got {self.horizon}")
        if self.max_agents < 1:
            raise ConfigurationError(f"rollout.max_agents: must be >= 1, got {self.max_agents}")
        if self.retries < 1:
            raise ConfigurationError(f"rollout.retries: must be >= 1, got {self.retries}")
        if self.target_agents is not None and self.target_agents < 0:
            raise ConfigurationError(f"rollout.target_agents: must be >= 0, got {self.target_agents}")
        if self.forced_motion_steps < 0:
            raise ConfigurationError(f"rollout.forced_motion_steps: must be >= 0, got {self.forced_motion_steps}")
        if self.retire_margin <= 0:
            raise ConfigurationError(f"rollout.retire_margin: must be > 0, got {self.retire_margin}")
        if not 0 < self.top_p <= 1:
            raise ConfigurationError(f"rollout.top_p: must be in (0, 1], got {self.top_p}")
        strategies = {**DEFAULT_STRATEGIES, **(self.strategies or {})}
        for head, strategy in strategies.items():
            if head not in SAMPLED_HEADS:
                raise ConfigurationError(f"rollout.strategies: unknown head '{head}'")
            if strategy not in STRATEGIES:
                raise ConfigurationError(f"rollout.strategies: unknown strategy '{strategy}' for head '{head}'")
        self.strategies = strategies
        if self.type_targets:
            targets = {}
            for key, count in self.type_targets.items():
                agent_type = AGENT_TYPES.index(key) if key in AGENT_TYPES else int(key)
                if agent_type not in TYPE_ORDER or int(count) < 0:
                    raise ConfigurationError(f"rollout.type_targets: invalid entry {key}={count}")
                targets[agent_type] = int(count)
            self.type_targets = targets


@dataclass
class SimAgent:
    """One simulated participant and its trajectory since it entered the scene."""
    agent_id: int
    agent_type: int
    shape: np.ndarray
    state: KinState
    first_step: int
    poses: list = field(default_factory=list)
    speeds: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    input_label: int = MOTION_START

    def __post_init__(self):
        self.shape = np.asarray(self.shape, dtype=np.float64).reshape(3)
        if not self.poses:
            self.poses.append(self.state.pose)
            self.speeds.append(self.state.v)

    @property
    def velocity(self):
        return self.state.v * np.cos(self.state.psi), self.state.v * np.sin(self.state.psi)


@dataclass
class SimState:
    step: int
    sequence: TokenSequence
    next_id: int
    active: dict = field(default_factory=dict)
    retired: dict = field(default_factory=dict)
    tl_states: dict = field(default_factory=dict)
    log: list = field(default_factory=list)
    injected: int = 0
    failed: int = 0
    clamped: int = 0

    def agents(self):
        """Active and retired agents in id order."""
        merged = {**self.retired, **self.active}
        return [merged[agent_id] for agent_id in sorted(merged)]


class RolloutEngine:
    """
    Drives a trained model through a scenario.

    Parameters:
    - model (SceneStreamerModel): Trained model.
    - segments (list of MapSegment): Segments of the scenario map.
    - config (RolloutConfig): Mode and sampling options.
    - ranges (FieldRanges): Quantizer table the checkpoint was trained with.
    - stage (str): Training stage of the checkpoint; a pretrained model has no agent-state heads.
    """

    def __init__(self, model, segments, config=None, ranges=None, stage="finetune"):
        self.model = model.eval()
        self.model_config = model.config
        self.segments = segments
        self.config = config or RolloutConfig()
        self.ranges = ranges or FieldRanges()
        self.agent_states = stage != "pretrain"
        if self.ranges.num_bins != self.model_config.rs_bins:
            raise ConfigurationError(f"quantizer.num_bins={self.ranges.num_bins} does not match the checkpoint "
                                     f"(model.rs_bins={self.model_config.rs_bins})")
        if not self.agent_states and self.config.mode in INJECTING_MODES:
            raise ConfigurationError(f"mode '{self.config.mode}' needs a finetuned checkpoint, got a pretrained one")
        if not segments:
            raise ConfigurationError("rollout needs at least one map segment")
        if len(segments) > self.model_config.max_segments:
            raise ConfigurationError(f"{len(segments)} segments exceed model.max_segments="
                                     f"{self.model_config.max_segments}")
        self.arrays = segment_arrays(segments)
        self.map_index = MapIndex(segments)
        self.map_tensors = SequenceBatch.map_tensors(segments, self.model_config)
        map_batch = SequenceBatch({k: v for k, v in self.map_tensors.items() if k != "map_anchors"}, {}, {},
                                  len(segments))
        with torch.no_grad():
            self.map_tokens = self.model.encode_map(map_batch)
        self.sim = None
        self.scenario = None
        self.rng = None
        self.horizon = None
        self.ego_id = None
        self.external_ego = None

    # model queries

    @torch.no_grad()
    def _hidden(self):
        batch = SequenceBatch.from_sequence(self.sim.sequence, self.segments, self.model_config, self.map_tensors)
        return self.model.decode(batch, self.map_tokens)

    @staticmethod
    def _probs(logits):
        return torch.softmax(logits.detach().double(), dim=-1).cpu().numpy()

    def _draw(self, head, probs):
        return sample(probs, self.config.strategies[head], self.rng, self.config.top_p)

    def _record(self, t, event, agent_id=-1, **data):
        self.sim.log.append({"step": int(t), "event": event, "agent_id": int(agent_id), "data": data})

    # lifecycle

    def run(self, scenario, external_ego=None):
        """
        Roll the scenario out for the configured horizon.

        Parameters:
        - scenario (ScenarioDescription): Source of the map, traffic lights and initial agents.
        - external_ego (AgentRecord): Ego trajectory imposed in closed_loop mode; defaults to the logged SDC.

        Returns:
        - SimState: The finished simulation.
        """
        config = self.config
        self.scenario = scenario
        self.horizon = int(config.horizon or max(scenario.num_steps - 1, 1))
        self.rng = np.random.default_rng(config.seed)
        self.ego_id = scenario.sdc.agent_id if scenario.agents else None
        self.external_ego = None
        if config.mode == "closed_loop":
            self.external_ego = external_ego if external_ego is not None else \
                (scenario.sdc if scenario.agents else None)
            if self.external_ego is None:
                raise ConfigurationError("closed_loop mode needs an ego trajectory")
            self.ego_id = self.external_ego.agent_id
        known_ids = [a.agent_id for a in scenario.agents] + ([self.ego_id] if self.ego_id is not None else [])
        self.sim = SimState(step=0, sequence=TokenSequence(scenario.scenario_id, "full" if self.agent_states
                                                           else "pretrain", self.horizon, len(self.segments)),
                            next_id=max(known_ids) + 1 if known_ids else 0)
        self._record(-1, "header", scenario_id=scenario.scenario_id, mode=config.mode, seed=int(config.seed),
                     horizon=self.horizon, dt=float(scenario.dt))
        for light in scenario.traffic_lights:
            self.sim.tl_states[light.tl_id] = [int(light.states[0])]
        self._spawn_initial(scenario)

        for t in range(self.horizon):
            self.step(t)
        sim = self.sim
        console.print(f"[success]Rollout of '{scenario.scenario_id}' finished ({config.mode}, {self.horizon} steps): "
                      f"{len(sim.active)} active, {sim.injected} injected, {len(sim.retired)} retired, "
                      f"{sim.failed} failed injections.[/success]", style="success")
        if sim.clamped:
            console.print(f"[warning]{sim.clamped} forced states fell outside the quantizer ranges and were "
                          f"clamped.[/warning]", style="warning")
        return sim

    def _spawn_initial(self, scenario):
        if self.config.mode == "full_generation":
            return
        present = [agent for agent in scenario.agents if agent.valid[0]]
        if len(present) > self.config.max_agents:
            ego = scenario.sdc.poses[0, :2]
            distance = [np.hypot(*(agent.poses[0, :2] - ego)) for agent in present]
            order = np.argsort(distance, kind="stable")[:self.config.max_agents]
            console.print(f"[info]{len(present) - self.config.max_agents} agents beyond max_agents dropped."
                          f"[/info]", style="info")
            present = [present[i] for i in sorted(order)]
        for agent in present:
            sim_agent = SimAgent(agent.agent_id, agent.agent_type, agent.shape, kin_state_from_agent(agent, 0), 0)
            self.sim.active[agent.agent_id] = sim_agent
            self._record(0, "spawn", agent.agent_id, type=int(agent.agent_type),
                         pose=[float(p) for p in sim_agent.state.pose], speed=float(sim_agent.state.v),
                         shape=sim_agent.shape.tolist())

    def step(self, t):
        """One TL, AS and MO round at step t, followed by retirement."""
        sim = self.sim
        sim.step = t
        self._advance_lights(t)

        external = self._external_state(t)
        if external is not None and self.ego_id not in sim.active:
            pose, speed, agent_type, shape = external
            sim.active[self.ego_id] = SimAgent(self.ego_id, agent_type, shape, KinState(*pose, speed), t)
            self._record(t, "spawn", self.ego_id, type=int(agent_type), pose=list(pose), speed=speed,
                         shape=list(shape))

        if self.agent_states:
            sim.sequence.append(sentinel_token("AS_START", t, 0))
        for slot, agent_id in enumerate(sorted(sim.active)):
            self.state_force(agent_id, t, slot, external if agent_id == self.ego_id else None)
        if self.agent_states:
            if self.config.mode in INJECTING_MODES:
                self._inject_all(t)
            sim.sequence.append(sentinel_token("AS_END", t, 1 + 4 * len(sim.active)))

        self._move(t)
        self.retire_agents(t)
        return sim

    def _advance_lights(self, t):
        lights = self.scenario.traffic_lights
        if not lights:
            return
        sim = self.sim
        start = len(sim.sequence)
        for light in lights:
            sim.sequence.append(tl_token(light, t, sim.tl_states[light.tl_id][-1]))
        if self.config.mode == "motion_prediction" and t + 1 < self.scenario.num_steps:
            states = [int(light.states[t + 1]) for light in lights]
        else:
            probs = self._probs(self.model.tl_logits(self._hidden()[start:start + len(lights)]))
            states = [self._draw("tl", row) for row in probs]
        for light, state in zip(lights, states):
            sim.tl_states[light.tl_id].append(state)
            self._record(t + 1, "tl", tl_id=int(light.tl_id), state=state)

    def _external_state(self, t):
        ego = self.external_ego
        if ego is None or t >= ego.num_steps or not ego.valid[t]:
            return None
        pose = tuple(float(p) for p in ego.poses[t])
        return pose, ego.speed(t), int(ego.agent_type), tuple(float(s) for s in ego.shape)

    def state_force(self, agent_id, t, slot, external=None):
        """
        Emit the agent-state tokens of an existing agent from its current state instead of sampling them.

        Parameters:
        - agent_id (int): Agent to force.
        - t (int): Current step.
        - slot (int): Position of the agent block inside the step.
        - external (tuple): (pose, speed, type, shape) replacing the simulated state first (ego override).

        Returns:
        - SimAgent: The forced agent.
        """
        agent = self.sim.active[agent_id]
        if external is not None:
            pose, speed = external[0], float(external[1])
            agent.state = KinState(*pose, speed)
            if agent.first_step + len(agent.poses) - 1 == t:
                agent.poses[-1], agent.speeds[-1] = agent.state.pose, speed
            self._record(t, "override", agent_id, pose=list(pose), speed=speed)
        if not self.agent_states:
            return agent
        pose = agent.state.pose
        segment = self.segments[nearest_valid_segment(pose, self.segments, relax=True, arrays=self.arrays)]
        relative = encode_relative(pose, agent.velocity, agent.shape, segment, self.ranges)
        self.sim.clamped += int(relative.clamped)
        self.sim.sequence.extend(agent_state_tokens(agent_id, agent.agent_type, segment, relative, pose, t, slot))
        self._record(t, "force", agent_id, map_id=int(segment.segment_id), bins=[int(b) for b in relative.bins],
                     clamped=bool(relative.clamped))
        return agent

    def _missing_types(self):
        if not self.config.type_targets:
            return None
        counts = {agent_type: 0 for agent_type in TYPE_ORDER}
        for agent in self.sim.active.values():
            counts[agent.agent_type] += 1
        return [agent_type for agent_type in TYPE_ORDER
                if counts[agent_type] < self.config.type_targets.get(agent_type, 0)]

    def _wants_agents(self):
        cap = self.config.max_agents
        if self.config.target_agents is not None:
            cap = min(cap, self.config.target_agents)
        missing = self._missing_types()
        if missing is not None and not missing:
            return False
        return len(self.sim.active) < cap

    def _inject_all(self, t):
        while self._wants_agents():
            # with the end logit at -inf the stop head always continues
            if not self.config.force_end_logit_off:
                probs = self._probs(self.model.next_logits(self._hidden()[-1:]))[0]
                if self._draw("next", probs) == END_OF_AGENTS:
                    break
            try:
                self.inject_agent(t, len(self.sim.active))
            except InjectionFailed as e:
                self.sim.failed += 1
                self._record(t, "injection_failed", attempts=e.attempts)
                break

    def inject_agent(self, t, slot):
        """
        Sample a new agent: type, then anchor segment, then the relative-state bins. A decoded box that
        overlaps an active agent or lands on a position edge bin is rejected and the segment and bins are
        resampled.

        Returns:
        - SimAgent: The injected agent, registered under the next fresh id.

        Raises:
        - InjectionFailed: No acceptable placement within `retries` attempts; the partial tokens are removed.
        """
        sim = self.sim
        tokens = sim.sequence.tokens
        agent_id = sim.next_id
        base = 1 + 4 * slot
        tokens.append(Token("AS_SOA", t, OWNER_AGENT, agent_id, base, None, {"agent_id": agent_id}))
        type_probs = self._probs(self.model.type_logits(self._hidden()[-1:]))[0]
        missing = self._missing_types()
        if missing:
            # fill the first missing type in vehicle, pedestrian, cyclist order
            type_probs[[k for k in TYPE_ORDER if k != missing[0]]] = 0.0
        agent_type = self._draw("type", type_probs)
        payload = {"agent_id": agent_id, "type": agent_type}
        tokens.append(Token("AS_TYPE", t, OWNER_AGENT, agent_id, base + 1, None, dict(payload)))
        map_probs = self._probs(self.model.map_logits(self._hidden()[-1:], self.map_tokens))[0][:len(self.segments)]
        obstacles = [(other.state.pose, other.shape) for other in sim.active.values()]

        for attempt in range(1, self.config.retries + 1):
            segment = self.segments[self._draw("map_id", map_probs)]
            tokens.append(Token("AS_MS", t, OWNER_AGENT, agent_id, base + 2, (*segment.anchor, float(t)),
                                {**payload, "map_id": int(segment.segment_id)}))
            condition = self._hidden()[-1:]
            bins = self.model.head_rs.generate(condition, lambda probs, k: self._draw("rs", probs))
            relative = relative_from_bins(bins, self.ranges)
            x, y, psi, vx, vy = decode_global(relative, segment)
            shape = np.array([relative.length, relative.width, relative.height])
            collides = any(boxes_overlap((x, y, psi), shape, pose, other) for pose, other in obstacles)
            if not relative.clamped and not collides:
                break
            tokens.pop()
        else:
            del tokens[-2:]
            raise InjectionFailed(self.config.retries)

        tokens.append(Token("AS_RS", t, OWNER_AGENT, agent_id, base + 3, (x, y, psi, float(t)),
                            {**payload, "map_id": int(segment.segment_id), "rs": [int(b) for b in bins]}))
        speed = float(vx * np.cos(psi) + vy * np.sin(psi))
        agent = SimAgent(agent_id, agent_type, shape, KinState(float(x), float(y), float(psi), speed), t)
        sim.active[agent_id] = agent
        sim.next_id += 1
        sim.injected += 1
        self._record(t, "inject", agent_id, type=int(agent_type), map_id=int(segment.segment_id),
                     bins=[int(b) for b in bins], attempts=attempt, pose=[float(p) for p in agent.state.pose],
                     speed=speed, shape=shape.tolist())
        return agent

    def _forced_label(self, agent, t):
        dt = self.scenario.dt
        if self.config.mode == "motion_prediction" and t < self.config.forced_motion_steps:
            try:
                logged = self.scenario.agent_by_id(agent.agent_id)
            except KeyError:
                return None
            if t + 1 < logged.num_steps and logged.valid[t + 1]:
                return best_motion_label(agent.state, agent.shape, logged.poses[t + 1], dt)
        if self.external_ego is not None and agent.agent_id == self.ego_id:
            if self._external_state(t + 1) is not None:
                return best_motion_label(agent.state, agent.shape, self.external_ego.poses[t + 1], dt)
        return None

    def _move(self, t):
        sim = self.sim
        order = sorted(sim.active)
        if not order:
            return
        start = len(sim.sequence)
        for agent_id in order:
            agent = sim.active[agent_id]
            sim.sequence.append(motion_token(agent_id, agent.agent_type, agent.state.pose, agent.velocity,
                                             agent.shape, t, agent.input_label))
        hidden = None
        for i, agent_id in enumerate(order):
            agent = sim.active[agent_id]
            label = self._forced_label(agent, t)
            forced = label is not None
            if not forced:
                if hidden is None:
                    hidden = self._hidden()[start:]
                probs = self._probs(self.model.motion_logits(hidden[i:i + 1]))[0]
                label = self._draw("motion", probs)
            a, omega = label_to_control(label)
            nxt = step_bicycle(agent.state, a, omega, self.scenario.dt)
            agent.state = KinState(float(nxt.x), float(nxt.y), float(nxt.psi), float(nxt.v))
            agent.poses.append(agent.state.pose)
            agent.speeds.append(agent.state.v)
            agent.labels.append(int(label))
            agent.input_label = int(label)
            self._record(t, "motion", agent_id, label=int(label), forced=forced)

    def retire_agents(self, t):
        """
        Remove agents farther than the retire margin from every segment. The ego and every agent in
        motion_prediction mode stay. Retired ids are never reused.

        Returns:
        - list of int: Retired ids.
        """
        sim = self.sim
        if self.config.mode == "motion_prediction":
            return []
        candidates = [agent_id for agent_id in sorted(sim.active) if agent_id != self.ego_id]
        if not candidates:
            return []
        positions = np.array([sim.active[agent_id].state.pose[:2] for agent_id in candidates])
        off_map = self.map_index.beyond_margin(positions, self.config.retire_margin)
        retired = [agent_id for agent_id, off in zip(candidates, off_map) if off]
        for agent_id in retired:
            sim.retired[agent_id] = sim.active.pop(agent_id)
            self._record(t + 1, "retire", agent_id)
        return retired

    # outputs

    def export(self):
        """
        The rollout as a scenario over horizon + 1 steps, keeping the source scenario id, map and light
        geometry. Validity masks cover the steps each agent existed.
        """
        scenario = self.scenario
        num_steps = self.horizon + 1
        agents = []
        for agent in self.sim.agents():
            poses = np.zeros((num_steps, 3))
            velocities = np.zeros((num_steps, 2))
            valid = np.zeros(num_steps, dtype=bool)
            span = slice(agent.first_step, agent.first_step + len(agent.poses))
            poses[span] = agent.poses
            speeds = np.asarray(agent.speeds)
            velocities[span] = np.stack([speeds * np.cos(poses[span, 2]), speeds * np.sin(poses[span, 2])], axis=-1)
            valid[span] = True
            agents.append(AgentRecord(agent.agent_id, agent.agent_type, agent.shape, poses, velocities, valid))
        ids = [agent.agent_id for agent in agents]
        lights = [TrafficLightRecord(light.tl_id, light.attached_segment, light.stop_point, light.heading,
                                     self.sim.tl_states[light.tl_id]) for light in scenario.traffic_lights]
        return ScenarioDescription(
            scenario_id=scenario.scenario_id, dt=scenario.dt, num_steps=num_steps, polylines=list(scenario.polylines),
            agents=agents, traffic_lights=lights,
            sdc_index=ids.index(self.ego_id) if self.ego_id in ids else 0,
        ).validate()

    def log_frame(self):
        return pd.DataFrame(self.sim.log, columns=["step", "event", "agent_id", "data"])

    def write_log(self, path):
        """Write the event log as JSON lines, the header event first."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.log_frame().to_json(path, orient="records", lines=True, double_precision=15)
        console.print(f"[success]Rollout log written to {path}.[/success]", style="success")
        return path


def read_log(path):
    frame = pd.read_json(path, lines=True, dtype=False, convert_dates=False)
    return frame.to_dict(orient="records")


def replay_from_log(records):
    """
    Rebuild every trajectory from the initial states and motion labels of a rollout log.

    Parameters:
    - records (list of dict): Log events, as kept by the engine or returned by read_log.

    Returns:
    - dict: agent id -> (first step, (n, 3) poses).
    """
    dt = next(record["data"]["dt"] for record in records if record["event"] == "header")
    states, tracks = {}, {}
    for record in records:
        event, data, step = record["event"], record["data"], int(record["step"])
        agent_id = int(record["agent_id"])
        if event in ("spawn", "inject", "override"):
            state = KinState(*(float(p) for p in data["pose"]), float(data["speed"]))
            states[agent_id] = state
            first, poses = tracks.get(agent_id, (step, []))
            if poses and first + len(poses) - 1 == step:
                poses[-1] = state.pose
            else:
                poses.append(state.pose)
            tracks[agent_id] = (first, poses)
        elif event == "motion":
            a, omega = label_to_control(int(data["label"]))
            nxt = step_bicycle(states[agent_id], a, omega, dt)
            states[agent_id] = KinState(float(nxt.x), float(nxt.y), float(nxt.psi), float(nxt.v))
            tracks[agent_id][1].append(states[agent_id].pose)
    return {agent_id: (first, np.array(poses)) for agent_id, (first, poses) in tracks.items()}


def rollout(model, scenario, segments, config=None, ranges=None, stage="finetune", external_ego=None):
    """Run one rollout and return (exported scenario, engine)."""
    engine = RolloutEngine(model, segments, config, ranges, stage)
    engine.run(scenario, external_ego)
    return engine.export(), engine
