"""
Neural core: a pre-norm encoder-decoder transformer over the token stream.

The map encoder pools per-point features of every segment and mixes segments with relative self-attention.
The decoder runs masked relative self-attention over the stream, relative cross-attention to the map tokens
and a feedforward block per layer. Prediction heads read the hidden states of specific token groups.
"""
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.errors import ConfigurationError
from src.geo_utils import GeoUtils
from src.kinematics import MOTION_START, MOTION_VOCAB_SIZE
from src.map_codec import (
    FEATURE_COS, FEATURE_DIRECTION, FEATURE_END, FEATURE_HEADING, FEATURE_SIN, FEATURE_START, FEATURE_VALID,
    MAX_POINTS_PER_SEGMENT, MAX_SEGMENTS, NUM_POINT_FEATURES,
)
from src.scenario_model import AGENT_TYPES, TL_STATES
from src.sequence_builder import (
    DEFAULT_KNN, GROUP_INDEX, GROUPS, TokenSequence, group_causal_mask, nearest_keys_mask, relative_delta_matrix,
    token_anchors,
)
from src.state_codec import NUM_STATE_BINS, RS_FIELDS

HEADS = ("tl", "type", "map_id", "rs", "motion", "next")
RELATIVE_FEATURES = 5
IGNORE = -100


@dataclass
class ModelConfig:
    d_model: int = 128
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 4
    rs_head_layers: int = 2
    ff_mult: int = 4
    relative_dim: int = 16
    relative_scale: float = 10.0
    dropout: float = 0.0
    num_tl_states: int = len(TL_STATES)
    num_types: int = len(AGENT_TYPES)
    max_segments: int = MAX_SEGMENTS
    rs_bins: int = NUM_STATE_BINS
    motion_vocab: int = MOTION_VOCAB_SIZE
    tl_id_table: int = 64
    agent_id_table: int = 256
    max_agents: int = 128
    knn_k: int = DEFAULT_KNN
    top_p: float = 0.95

    def __post_init__(self):
        positive = ("d_model", "heads", "encoder_layers", "decoder_layers", "rs_head_layers", "ff_mult",
                    "relative_dim", "max_segments", "tl_id_table", "agent_id_table", "max_agents", "knn_k")
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"model.{name}: must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.heads:
            raise ConfigurationError(f"model.d_model: {self.d_model} is not divisible by heads={self.heads}")
        if self.num_tl_states != len(TL_STATES):
            raise ConfigurationError(f"model.num_tl_states: must be {len(TL_STATES)}")
        if self.num_types != len(AGENT_TYPES):
            raise ConfigurationError(f"model.num_types: must be {len(AGENT_TYPES)}")
        if self.motion_vocab != MOTION_VOCAB_SIZE:
            raise ConfigurationError(f"model.motion_vocab: must be {MOTION_VOCAB_SIZE}")
        if self.rs_bins < 2:
            raise ConfigurationError(f"model.rs_bins: must be >= 2, got {self.rs_bins}")
        if not 0 <= self.dropout < 1:
            raise ConfigurationError(f"model.dropout: must be in [0, 1), got {self.dropout}")
        if not 0 < self.top_p <= 1:
            raise ConfigurationError(f"model.top_p: must be in (0, 1], got {self.top_p}")
        if self.relative_scale <= 0:
            raise ConfigurationError(f"model.relative_scale: must be > 0, got {self.relative_scale}")

    @property
    def head_dim(self):
        return self.d_model // self.heads

    @property
    def intra_table(self):
        return 4 * self.max_agents + 2

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


def local_point_features(segment):
    """
    Per-point features expressed in the segment frame, so the point encoder sees translation- and
    rotation-free geometry. Global placement reaches the model through the relative attention anchors.
    """
    features = segment.features.copy()
    valid = features[:, FEATURE_VALID] > 0.5
    cx, cy = segment.center
    phi = segment.heading
    for cols in (FEATURE_START, FEATURE_END):
        x, y = GeoUtils.to_local(features[:, cols.start] - cx, features[:, cols.start + 1] - cy, phi)
        features[:, cols.start], features[:, cols.start + 1] = x, y
    dx, dy = GeoUtils.to_local(features[:, FEATURE_DIRECTION.start], features[:, FEATURE_DIRECTION.start + 1], phi)
    features[:, FEATURE_DIRECTION.start], features[:, FEATURE_DIRECTION.start + 1] = dx, dy
    heading = GeoUtils.wrap_angle(features[:, FEATURE_HEADING] - phi)
    features[:, FEATURE_HEADING] = heading
    features[:, FEATURE_SIN] = np.sin(heading)
    features[:, FEATURE_COS] = np.cos(heading)
    features[~valid] = 0.0
    return features


def _relative_input(deltas, both, scale):
    """(Tq, Tk, 5) relative-MLP input: scaled planar offset, heading delta, step delta, anchored flag."""
    scaled = deltas.copy()
    scaled[..., :2] /= scale
    return np.concatenate([scaled, both[..., None].astype(np.float64)], axis=-1)


class SequenceBatch:
    """
    Tensorized token stream of one scenario: per-token embedding inputs, masks, relative inputs for the
    three attention kinds and the supervised targets per head.
    """

    def __init__(self, tensors, rows, targets, num_map_tokens):
        self.tensors = tensors
        self.rows = rows
        self.targets = targets
        self.num_map_tokens = num_map_tokens

    def __getattr__(self, name):
        tensors = self.__dict__.get("tensors", {})
        if name in tensors:
            return tensors[name]
        raise AttributeError(name)

    def __len__(self):
        return int(self.tensors["group"].shape[0])

    def to(self, dtype):
        """Cast the floating tensors (relative inputs, features, velocities) to `dtype`."""
        tensors = {k: v.to(dtype) if v.is_floating_point() else v for k, v in self.tensors.items()}
        return SequenceBatch(tensors, self.rows, self.targets, self.num_map_tokens)

    @staticmethod
    def map_tensors(segments, config):
        """Map-side tensors; they depend only on the segments and can be reused across a rollout."""
        features = np.stack([local_point_features(s) for s in segments]) if segments else \
            np.zeros((0, MAX_POINTS_PER_SEGMENT, NUM_POINT_FEATURES))
        anchors = np.array([[*s.anchor, 0.0] for s in segments], dtype=np.float64).reshape(-1, 4)
        present = np.ones(len(segments), dtype=bool)
        base = np.ones((len(segments), len(segments)), dtype=bool)
        mask = nearest_keys_mask(anchors, present, anchors, present, config.knn_k, base, keep_self=True)
        deltas, both = relative_delta_matrix(anchors, present, anchors, present, same_time=True)
        return {
            "map_features": torch.tensor(features, dtype=torch.float32),
            "map_valid": torch.tensor(features[..., FEATURE_VALID] > 0.5),
            "map_anchors": anchors,
            "map_mask": torch.tensor(mask),
            "map_relative": torch.tensor(_relative_input(deltas, both, config.relative_scale), dtype=torch.float32),
        }

    @classmethod
    def from_sequence(cls, sequence, segments, config, map_tensors=None):
        """
        Build the batch for a token stream.

        Parameters:
        - sequence (TokenSequence or list of Token): The stream.
        - segments (list of MapSegment): Segments of the same scenario.
        - config (ModelConfig): Model configuration (knn k, table sizes, relative scale).
        - map_tensors (dict): Cached result of map_tensors(segments, config).

        Returns:
        - SequenceBatch
        """
        tokens = sequence.tokens if isinstance(sequence, TokenSequence) else list(sequence)
        if len(segments) > config.max_segments:
            raise ConfigurationError(
                f"{len(segments)} segments exceed model.max_segments={config.max_segments}")
        map_tensors = map_tensors or cls.map_tensors(segments, config)
        count = len(tokens)

        columns = {name: np.zeros(count, dtype=np.int64) for name in
                   ("group", "tl_state", "tl_id", "map_id", "agent_type", "agent_id", "intra", "motion_label")}
        velocity = np.zeros((count, 2))
        shape = np.zeros((count, 3))
        rs_bins = np.zeros((count, len(RS_FIELDS)), dtype=np.int64)
        rows = {name: [] for name in HEADS}
        targets = {name: [] for name in HEADS}

        for i, tok in enumerate(tokens):
            payload = tok.payload
            columns["group"][i] = GROUP_INDEX[tok.group]
            columns["intra"][i] = min(tok.intra, config.intra_table - 1)
            columns["tl_state"][i] = payload.get("state", 0)
            columns["tl_id"][i] = payload.get("tl_id", 0) % config.tl_id_table
            columns["map_id"][i] = payload.get("map_id", payload.get("segment", 0))
            columns["agent_type"][i] = payload.get("type", 0)
            columns["agent_id"][i] = payload.get("agent_id", 0) % config.agent_id_table
            columns["motion_label"][i] = payload.get("label", 0)
            if "velocity" in payload:
                velocity[i] = payload["velocity"]
                shape[i] = payload["shape"]
            if "rs" in payload:
                rs_bins[i] = payload["rs"]
            target = tok.target or {}
            for name, key in (("tl", "tl"), ("type", "type"), ("map_id", "map_id"), ("rs", "rs"),
                              ("motion", "motion"), ("next", "next")):
                if key in target:
                    rows[name].append(i)
                    targets[name].append(target[key])

        anchors, present = token_anchors(tokens)
        self_mask = nearest_keys_mask(anchors, present, anchors, present, config.knn_k, group_causal_mask(tokens),
                                      keep_self=True)
        self_deltas, self_both = relative_delta_matrix(anchors, present, anchors, present)
        map_anchors = map_tensors["map_anchors"]
        map_present = np.ones(len(map_anchors), dtype=bool)
        cross_base = np.ones((count, len(map_anchors)), dtype=bool)
        cross_mask = nearest_keys_mask(anchors, present, map_anchors, map_present, config.knn_k, cross_base)
        cross_deltas, cross_both = relative_delta_matrix(anchors, present, map_anchors, map_present, same_time=True)

        tensors = {name: torch.tensor(values) for name, values in columns.items()}
        tensors.update({
            "velocity": torch.tensor(velocity, dtype=torch.float32),
            "shape": torch.tensor(shape, dtype=torch.float32),
            "rs_bins": torch.tensor(rs_bins),
            "self_mask": torch.tensor(self_mask),
            "self_relative": torch.tensor(_relative_input(self_deltas, self_both, config.relative_scale),
                                          dtype=torch.float32),
            "cross_mask": torch.tensor(cross_mask),
            "cross_relative": torch.tensor(_relative_input(cross_deltas, cross_both, config.relative_scale),
                                           dtype=torch.float32),
        })
        tensors.update({k: v for k, v in map_tensors.items() if k != "map_anchors"})
        row_tensors = {name: torch.tensor(rows[name], dtype=torch.long) for name in HEADS}
        target_tensors = {name: torch.tensor(targets[name], dtype=torch.long) for name in HEADS}
        if not len(targets["rs"]):
            target_tensors["rs"] = torch.zeros((0, len(RS_FIELDS)), dtype=torch.long)
        return cls(tensors, row_tensors, target_tensors, len(segments))


class FeedForward(nn.Sequential):
    def __init__(self, config):
        super().__init__(
            nn.Linear(config.d_model, config.ff_mult * config.d_model),
            nn.GELU(),
            nn.Linear(config.ff_mult * config.d_model, config.d_model),
            nn.Dropout(config.dropout),
        )


class RelativeAttention(nn.Module):
    """
    Multi-head attention with a geometric bias. The score of query i and key j is
    (q_i . k_j + q'_i . r_ij) / sqrt(head_dim) + m_ij, with r_ij a feedforward embedding of the
    relative input and m_ij the additive mask (0 or -inf).

    The bias is computed without materializing r_ij: with U = gelu(W1 delta + b1),
    q' . (W2 U + b2) = (W2^T q') . U + q' . b2.
    """

    def __init__(self, config):
        super().__init__()
        d = config.d_model
        self.heads = config.heads
        self.head_dim = config.head_dim
        self.query = nn.Linear(d, d)
        self.key = nn.Linear(d, d)
        self.value = nn.Linear(d, d)
        self.query_rel = nn.Linear(d, d)
        self.rel_in = nn.Linear(RELATIVE_FEATURES, config.relative_dim)
        self.rel_out = nn.Linear(config.relative_dim, d)
        self.out = nn.Linear(d, d)
        self.dropout = nn.Dropout(config.dropout)

    def _split(self, x):
        return x.view(x.shape[0], self.heads, self.head_dim).transpose(0, 1)

    def scores(self, x_q, x_k, relative, mask):
        """Pre-softmax scores, shape (heads, Tq, Tk); masked entries are -inf."""
        q = self._split(self.query(x_q))
        k = self._split(self.key(x_k))
        q_rel = self._split(self.query_rel(x_q))
        hidden = F.gelu(self.rel_in(relative))
        w2 = self.rel_out.weight.view(self.heads, self.head_dim, -1)
        b2 = self.rel_out.bias.view(self.heads, self.head_dim)
        projected = torch.einsum("hqd,hdr->hqr", q_rel, w2)
        bias = torch.einsum("hqr,qkr->hqk", projected, hidden) + torch.einsum("hqd,hd->hq", q_rel, b2).unsqueeze(-1)
        scores = (q @ k.transpose(-1, -2) + bias) / math.sqrt(self.head_dim)
        return scores.masked_fill(~mask.unsqueeze(0), float("-inf"))

    def forward(self, x_q, x_k, relative, mask):
        weights = self.dropout(torch.softmax(self.scores(x_q, x_k, relative, mask), dim=-1))
        out = weights @ self._split(self.value(x_k))
        return self.out(out.transpose(0, 1).reshape(x_q.shape[0], -1))


class EncoderLayer(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.norm_attn = nn.LayerNorm(config.d_model)
        self.attn = RelativeAttention(config)
        self.norm_ff = nn.LayerNorm(config.d_model)
        self.ff = FeedForward(config)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x, relative, mask):
        h = self.norm_attn(x)
        x = x + self.dropout(self.attn(h, h, relative, mask))
        return x + self.ff(self.norm_ff(x))


class DecoderLayer(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.norm_self = nn.LayerNorm(config.d_model)
        self.self_attn = RelativeAttention(config)
        self.norm_cross = nn.LayerNorm(config.d_model)
        self.cross_attn = RelativeAttention(config)
        self.norm_ff = nn.LayerNorm(config.d_model)
        self.ff = FeedForward(config)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x, map_tokens, batch):
        h = self.norm_self(x)
        x = x + self.dropout(self.self_attn(h, h, batch.self_relative, batch.self_mask))
        h = self.norm_cross(x)
        x = x + self.dropout(self.cross_attn(h, map_tokens, batch.cross_relative, batch.cross_mask))
        return x + self.ff(self.norm_ff(x))


class MapEncoder(nn.Module):
    """Point-set encoder (shared point MLP, masked max-pool) followed by relative self-attention layers."""

    def __init__(self, config):
        super().__init__()
        d = config.d_model
        self.point_mlp = nn.Sequential(nn.Linear(NUM_POINT_FEATURES, d), nn.GELU(), nn.Linear(d, d))
        self.project = nn.Sequential(nn.GELU(), nn.Linear(d, d))
        self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.encoder_layers))
        self.norm = nn.LayerNorm(d)
        self.map_id = nn.Embedding(config.max_segments, d)

    def pool(self, features, valid):
        """Max over valid points; segments without valid points pool to zeros."""
        hidden = self.point_mlp(features).masked_fill(~valid.unsqueeze(-1), float("-inf"))
        pooled = hidden.max(dim=1).values
        return torch.where(valid.any(dim=1, keepdim=True), pooled, torch.zeros_like(pooled))

    def forward(self, batch):
        features = batch.map_features
        if features.ndim != 3 or features.shape[1:] != (MAX_POINTS_PER_SEGMENT, NUM_POINT_FEATURES):
            raise ConfigurationError(
                f"map features must be (M, {MAX_POINTS_PER_SEGMENT}, {NUM_POINT_FEATURES}), "
                f"got {tuple(features.shape)}")
        x = self.project(self.pool(features, batch.map_valid))
        for layer in self.layers:
            x = layer(x, batch.map_relative, batch.map_mask)
        ids = torch.arange(x.shape[0], device=x.device)
        return self.norm(x) + self.map_id(ids)


class TokenEmbedding(nn.Module):
    """
    Per-group token composition. TL: state + light id + map id. SOA: intra + agent id + start-of-agent.
    TYPE: intra + agent id + type. MS: TYPE + map id. RS: MS + the sum of the 8 bin embeddings.
    MO: motion label + type + agent id + velocity + shape. Every token also carries its group embedding.
    """

    def __init__(self, config, map_id):
        super().__init__()
        d = config.d_model
        self.agent_id_table = config.agent_id_table
        self.group = nn.Embedding(len(GROUPS), d)
        self.tl_state = nn.Embedding(config.num_tl_states, d)
        self.tl_id = nn.Embedding(config.tl_id_table, d)
        self.map_id = map_id
        self.agent_type = nn.Embedding(config.num_types, d)
        self.agent_id = nn.Embedding(config.agent_id_table, d)
        self.motion = nn.Embedding(config.motion_vocab, d)
        self.velocity = nn.Sequential(nn.Linear(2, d), nn.GELU(), nn.Linear(d, d))
        self.shape = nn.Sequential(nn.Linear(3, d), nn.GELU(), nn.Linear(d, d))
        self.rs = nn.Embedding(len(RS_FIELDS) * config.rs_bins, d)
        self.intra = nn.Embedding(config.intra_table, d)
        self.soa = nn.Parameter(torch.zeros(d))
        self.register_buffer("rs_offsets", torch.arange(len(RS_FIELDS)) * config.rs_bins, persistent=False)
        nn.init.normal_(self.soa, std=0.02)

    def forward(self, batch):
        group = batch.group
        x = self.group(group)

        def is_group(*names):
            hit = torch.zeros_like(group, dtype=torch.bool)
            for name in names:
                hit |= group == GROUP_INDEX[name]
            return hit.unsqueeze(-1).to(x.dtype)

        intra = self.intra(batch.intra)
        agent = self.agent_id(batch.agent_id % self.agent_id_table)
        agent_type = self.agent_type(batch.agent_type)
        map_id = self.map_id(batch.map_id)
        rs = self.rs(batch.rs_bins + self.rs_offsets).sum(dim=1)

        x = x + is_group("TL") * (self.tl_state(batch.tl_state) + self.tl_id(batch.tl_id) + map_id)
        x = x + is_group("AS_START", "AS_SOA", "AS_TYPE", "AS_MS", "AS_RS", "AS_END") * intra
        x = x + is_group("AS_SOA", "AS_TYPE", "AS_MS", "AS_RS", "MO") * agent
        x = x + is_group("AS_SOA") * self.soa
        x = x + is_group("AS_TYPE", "AS_MS", "AS_RS", "MO") * agent_type
        x = x + is_group("AS_MS", "AS_RS") * map_id
        x = x + is_group("AS_RS") * rs
        x = x + is_group("MO") * (self.motion(batch.motion_label) + self.velocity(batch.velocity / 10.0)
                                  + self.shape(batch.shape / 5.0))
        return x


class AdaLNBlock(nn.Module):
    """Causal transformer block whose normalizations are scaled and shifted by a condition vector."""

    def __init__(self, config):
        super().__init__()
        d = config.d_model
        self.norm_attn = nn.LayerNorm(d, elementwise_affine=False)
        self.attn = nn.MultiheadAttention(d, config.heads, dropout=config.dropout, batch_first=True)
        self.norm_ff = nn.LayerNorm(d, elementwise_affine=False)
        self.ff = FeedForward(config)
        self.modulation = nn.Linear(d, 4 * d)

    def forward(self, x, condition, causal):
        scale_attn, shift_attn, scale_ff, shift_ff = self.modulation(condition).unsqueeze(1).chunk(4, dim=-1)
        h = self.norm_attn(x) * (1 + scale_attn) + shift_attn
        x = x + self.attn(h, h, h, attn_mask=causal, need_weights=False)[0]
        h = self.norm_ff(x) * (1 + scale_ff) + shift_ff
        return x + self.ff(h)


class RelativeStateHead(nn.Module):
    """
    Tiny autoregressive decoder producing the 8 relative-state bins in field order from the hidden state of
    the MS token. Position k sees the start embedding and bins 0..k-1.
    """

    def __init__(self, config):
        super().__init__()
        d = config.d_model
        self.num_fields = len(RS_FIELDS)
        self.rs_bins = config.rs_bins
        self.start = nn.Parameter(torch.zeros(d))
        self.bins = nn.Embedding(self.num_fields * config.rs_bins, d)
        self.position = nn.Embedding(self.num_fields, d)
        self.blocks = nn.ModuleList(AdaLNBlock(config) for _ in range(config.rs_head_layers))
        self.norm = nn.LayerNorm(d)
        self.out = nn.Linear(d, config.rs_bins)
        self.register_buffer("offsets", torch.arange(self.num_fields) * config.rs_bins, persistent=False)
        causal = torch.triu(torch.ones(self.num_fields, self.num_fields, dtype=torch.bool), diagonal=1)
        self.register_buffer("causal", causal, persistent=False)
        nn.init.normal_(self.start, std=0.02)

    def forward(self, condition, bins):
        """
        Teacher-forced logits.

        Parameters:
        - condition (Tensor): (n, d) hidden states.
        - bins (Tensor): (n, 8) bins; only the first 7 are consumed.

        Returns:
        - Tensor: (n, 8, rs_bins) logits.
        """
        n = condition.shape[0]
        previous = self.bins(bins[:, :-1] + self.offsets[:-1])
        x = torch.cat([self.start.expand(n, 1, -1), previous], dim=1)
        x = x + self.position(torch.arange(self.num_fields, device=x.device))
        for block in self.blocks:
            x = block(x, condition, self.causal)
        return self.out(self.norm(x))

    @torch.no_grad()
    def generate(self, condition, draw):
        """
        Decode bins one field at a time.

        Parameters:
        - condition (Tensor): (1, d) hidden state.
        - draw (callable): (probabilities ndarray, field index) -> chosen bin.

        Returns:
        - list of int: The 8 bins.
        """
        bins = torch.zeros((1, self.num_fields), dtype=torch.long, device=condition.device)
        for k in range(self.num_fields):
            probs = torch.softmax(self.forward(condition, bins)[0, k].double(), dim=-1).cpu().numpy()
            bins[0, k] = int(draw(probs, k))
        return bins[0].tolist()


class SceneStreamerModel(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        self.config = config or ModelConfig()
        d = self.config.d_model
        self.map_encoder = MapEncoder(self.config)
        self.embedding = TokenEmbedding(self.config, self.map_encoder.map_id)
        self.layers = nn.ModuleList(DecoderLayer(self.config) for _ in range(self.config.decoder_layers))
        self.norm = nn.LayerNorm(d)
        self.head_tl = nn.Linear(d, self.config.num_tl_states)
        self.head_type = nn.Linear(d, self.config.num_types)
        self.head_map = nn.Linear(d, d)
        self.head_rs = RelativeStateHead(self.config)
        self.head_motion = nn.Linear(d, self.config.motion_vocab)
        self.head_next = nn.Linear(d, 2)

    def encode_map(self, batch):
        return self.map_encoder(batch)

    def decode(self, batch, map_tokens):
        """Hidden state of every stream token, shape (T, d)."""
        x = self.embedding(batch)
        for layer in self.layers:
            x = layer(x, map_tokens, batch)
        return self.norm(x)

    def tl_logits(self, hidden):
        return self.head_tl(hidden)

    def type_logits(self, hidden):
        return self.head_type(hidden)

    def map_logits(self, hidden, map_tokens):
        """Scores against the encoded map tokens, padded to max_segments with -inf."""
        scores = self.head_map(hidden) @ map_tokens.T / math.sqrt(self.config.d_model)
        pad = self.config.max_segments - scores.shape[-1]
        return F.pad(scores, (0, pad), value=float("-inf"))

    def rs_logits(self, hidden, bins):
        return self.head_rs(hidden, bins)

    def motion_logits(self, hidden):
        logits = self.head_motion(hidden)
        start = torch.zeros(logits.shape[-1], dtype=torch.bool, device=logits.device)
        start[MOTION_START] = True
        return logits.masked_fill(start, float("-inf"))

    def next_logits(self, hidden):
        return self.head_next(hidden)

    def forward(self, batch):
        """
        Teacher-forced logits for every supervised token.

        Returns:
        - dict: head name -> (logits, targets).
        """
        map_tokens = self.encode_map(batch)
        hidden = self.decode(batch, map_tokens)
        rows, targets = batch.rows, batch.targets
        return {
            "tl": (self.tl_logits(hidden[rows["tl"]]), targets["tl"]),
            "type": (self.type_logits(hidden[rows["type"]]), targets["type"]),
            "map_id": (self.map_logits(hidden[rows["map_id"]], map_tokens), targets["map_id"]),
            "rs": (self.rs_logits(hidden[rows["rs"]], targets["rs"]), targets["rs"]),
            "motion": (self.motion_logits(hidden[rows["motion"]]), targets["motion"]),
            "next": (self.next_logits(hidden[rows["next"]]), targets["next"]),
        }


def loss(outputs):
    """
    Cross-entropy per head over present targets.

    Returns:
    - tuple: (objective, report). The objective is the summed cross-entropy over every present target of every
      head; the report maps each head to its summed loss, target count and mean.
    """
    objective = None
    report = {}
    for name in HEADS:
        logits, targets = outputs[name]
        count = int(targets.numel())
        if count == 0:
            report[name] = {"sum": 0.0, "count": 0, "mean": 0.0}
            continue
        total = F.cross_entropy(logits.reshape(count, -1), targets.reshape(-1), reduction="sum")
        mean = total / count
        objective = total if objective is None else objective + total
        report[name] = {"sum": float(total.detach()), "count": count, "mean": float(mean.detach())}
    if objective is None:
        anchor = next(iter(outputs.values()))[0]
        objective = anchor.sum() * 0.0
    return objective, report
