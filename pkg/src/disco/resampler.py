"""Query-based cross-attention resampler.

Learnable query embeddings attend jointly over every (frame, patch) feature of
a video. Each layer is multi-head scaled dot-product cross-attention with a
residual connection, followed by a two-layer GELU feed-forward block with its
own residual. There is no self-attention between queries and no positional
encoding inside a frame, so patch order within a frame never matters.

Every layer's head-averaged attention is kept in an :class:`AttentionRecord`
as graph tensors so that losses defined on attention maps can differentiate
back into the queries and projections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Graph, Tensor

# (n_tokens, n_global, n_groups)
PARTITION_PRESETS = {
    "desk": (12, 4, 4),
    "st-llm": (32, 8, 12),
    "internvideo2": (96, 32, 16),
}


@dataclass(frozen=True)
class ResamplerConfig:
    layers: int = 2
    heads: int = 4
    width: int = 64
    use_frame_embedding: bool = True
    seed: int = 0
    max_frames: int = 16
    ffn_mult: int = 2

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("resampler needs at least one cross-attention layer")
        if self.heads < 1 or self.width % self.heads:
            raise ConfigError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.max_frames < 1 or self.ffn_mult < 1:
            raise ConfigError("max_frames and ffn_mult must be positive")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads


@dataclass
class VideoFeatures:
    """Per-frame patch features, shape (frames, patches, channels)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ShapeError("VideoFeatures", [self.values.shape], "expected non-empty (T, n, c)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("video features contain non-finite values")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def patches(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def flat(self) -> np.ndarray:
        return self.values.reshape(self.frames * self.patches, self.channels)


def check_partition(n_tokens: int, n_global: int, n_groups: int) -> int:
    """Validate a token partition and return the group size."""
    if n_tokens < 1 or n_global < 0 or n_groups < 1:
        raise ConfigError(f"invalid partition N={n_tokens}, N_global={n_global}, N_g={n_groups}")
    rest = n_tokens - n_global
    if rest < n_groups or rest % n_groups:
        raise ConfigError(
            f"{rest} non-global tokens cannot be split into {n_groups} equal groups"
        )
    return rest // n_groups


@dataclass
class QuerySet:
    """Query embeddings plus the global / grouped partition of their indices."""

    n_tokens: int
    n_global: int
    n_groups: int
    embeddings: np.ndarray

    def __post_init__(self):
        check_partition(self.n_tokens, self.n_global, self.n_groups)
        if self.embeddings.shape[0] != self.n_tokens:
            raise ShapeError("QuerySet", [self.embeddings.shape], f"expected {self.n_tokens} rows")

    @property
    def group_size(self) -> int:
        return (self.n_tokens - self.n_global) // self.n_groups

    def group(self, g: int) -> range:
        start = self.n_global + g * self.group_size
        return range(start, start + self.group_size)

    def pooling_matrix(self) -> np.ndarray:
        """(N_g, N) matrix averaging each group's token rows."""
        pool = np.zeros((self.n_groups, self.n_tokens))
        for g in range(self.n_groups):
            pool[g, list(self.group(g))] = 1.0 / self.group_size
        return pool


def init_queries(config: ResamplerConfig, n_tokens: int, n_global: int, n_groups: int) -> QuerySet:
    check_partition(n_tokens, n_global, n_groups)
    rng = np.random.default_rng(config.seed)
    emb = 0.02 * rng.standard_normal((n_tokens, config.width))
    return QuerySet(n_tokens, n_global, n_groups, emb)


def init_weights(config: ResamplerConfig) -> dict[str, np.ndarray]:
    """Cross-attention and feed-forward weights (queries excluded)."""
    rng = np.random.default_rng([config.seed, 1])
    c, d, hidden = config.width, config.head_dim, config.ffn_mult * config.width
    w: dict[str, np.ndarray] = {}
    if config.use_frame_embedding:
        w["frame_embed"] = 0.02 * rng.standard_normal((config.max_frames, c))
    for k in range(config.layers):
        for h in range(config.heads):
            for proj in ("q", "k", "v"):
                w[f"layer{k}.{proj}{h}"] = rng.standard_normal((c, d)) / math.sqrt(c)
        w[f"layer{k}.out_w"] = rng.standard_normal((c, c)) / math.sqrt(c)
        w[f"layer{k}.out_b"] = np.zeros(c)
        w[f"layer{k}.ff1_w"] = rng.standard_normal((c, hidden)) / math.sqrt(c)
        w[f"layer{k}.ff1_b"] = np.zeros(hidden)
        w[f"layer{k}.ff2_w"] = 0.5 * rng.standard_normal((hidden, c)) / math.sqrt(hidden)
        w[f"layer{k}.ff2_b"] = np.zeros(c)
    return w


@dataclass
class AttentionRecord:
    """Head-averaged attention per layer.

    ``joint[k]`` is (N, T*n) and sums to one over all patches of all frames;
    ``per_frame[k]`` is (N*T, n), the joint map sliced per frame and
    renormalized, row ``i*T + t`` holding token ``i`` over frame ``t``.
    """

    joint: list[Tensor]
    per_frame: list[Tensor]
    n_tokens: int
    frames: int
    patches: int

    @property
    def layers(self) -> int:
        return len(self.per_frame)

    @property
    def weights(self) -> np.ndarray:
        """(L_c, N, T, n) array of per-frame renormalized maps."""
        return np.stack([
            p.value.reshape(self.n_tokens, self.frames, self.patches) for p in self.per_frame
        ])

    @property
    def joint_weights(self) -> np.ndarray:
        return np.stack([
            j.value.reshape(self.n_tokens, self.frames, self.patches) for j in self.joint
        ])


@dataclass
class VisualTokenSet:
    tokens: Tensor        # (N, c)
    group_reps: Tensor    # (N_g, c), mean of each group's rows
    global_reps: Tensor | None  # (N_global, c)


class Resampler:
    """Holds a config, a query partition and the layer weights."""

    def __init__(self, config: ResamplerConfig, queries: QuerySet, weights: dict[str, np.ndarray]):
        if queries.embeddings.shape[1] != config.width:
            raise ShapeError("queries", [queries.embeddings.shape], f"width must be {config.width}")
        self.config = config
        self.queries = queries
        self.weights = weights

    @classmethod
    def create(cls, config: ResamplerConfig, n_tokens: int, n_global: int, n_groups: int) -> "Resampler":
        return cls(config, init_queries(config, n_tokens, n_global, n_groups), init_weights(config))

    def parameters(self) -> dict[str, np.ndarray]:
        return {"queries": self.queries.embeddings, **self.weights}

    def load(self, params: dict[str, np.ndarray]) -> None:
        self.queries.embeddings = np.asarray(params["queries"], dtype=np.float64)
        for k in self.weights:
            self.weights[k] = np.asarray(params[k], dtype=np.float64)

    def forward(self, graph: Graph, video: VideoFeatures,
                bound: dict[str, Tensor] | None = None) -> tuple[VisualTokenSet, AttentionRecord]:
        """Run all layers. ``bound`` maps parameter names to graph tensors;
        when omitted the parameters are registered on ``graph`` here."""
        if bound is None:
            bound = graph.bind(self.parameters())
        return _forward(graph, bound, self.queries, video, self.config)


def _forward(graph, p, queries, video, config):
    c = config.width
    if video.channels != c:
        raise ShapeError("resample", [video.values.shape, (queries.n_tokens, c)], "channel width mismatch")
    T, n, N = video.frames, video.patches, queries.n_tokens
    flat = graph.constant(video.flat())
    if config.use_frame_embedding:
        if T > config.max_frames:
            raise ConfigError(f"video has {T} frames but frame embedding covers {config.max_frames}")
        selector = np.zeros((T * n, config.max_frames))
        selector[np.arange(T * n), np.repeat(np.arange(T), n)] = 1.0
        kv_in = flat + graph.matmul(selector, p["frame_embed"])
    else:
        kv_in = flat

    x = p["queries"]
    scale = 1.0 / math.sqrt(config.head_dim)
    joint, per_frame = [], []
    for k in range(config.layers):
        outs, attn_sum = [], None
        for h in range(config.heads):
            q = x @ p[f"layer{k}.q{h}"]
            keys = kv_in @ p[f"layer{k}.k{h}"]
            vals = kv_in @ p[f"layer{k}.v{h}"]
            attn = graph.softmax((q @ keys.T) * scale)
            outs.append(attn @ vals)
            attn_sum = attn if attn_sum is None else attn_sum + attn
        mixed = graph.concat(outs, axis=-1) if len(outs) > 1 else outs[0]
        x = x + graph.affine(mixed, p[f"layer{k}.out_w"], p[f"layer{k}.out_b"])
        hidden = graph.gelu(graph.affine(x, p[f"layer{k}.ff1_w"], p[f"layer{k}.ff1_b"]))
        x = x + graph.affine(hidden, p[f"layer{k}.ff2_w"], p[f"layer{k}.ff2_b"])

        avg = attn_sum * (1.0 / config.heads)
        joint.append(avg)
        per_frame.append(graph.renormalize(graph.reshape(avg, (N * T, n))))

    group_reps = graph.matmul(queries.pooling_matrix(), x)
    global_reps = graph.take_rows(x, range(queries.n_global)) if queries.n_global else None
    record = AttentionRecord(joint, per_frame, N, T, n)
    return VisualTokenSet(x, group_reps, global_reps), record


def resample(queries: QuerySet, video: VideoFeatures, config: ResamplerConfig,
             weights: dict[str, np.ndarray] | None = None,
             graph: Graph | None = None) -> tuple[VisualTokenSet, AttentionRecord]:
    """One-shot forward pass; queries and weights become parameters of ``graph``."""
    graph = graph if graph is not None else Graph()
    weights = weights if weights is not None else init_weights(config)
    return Resampler(config, queries, weights).forward(graph, video)
