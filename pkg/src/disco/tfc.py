"""Frame-level focus features and their temporal alignment loss.

For every token group and frame, the group's attention over that frame's
patches (averaged over layers and over the group's tokens) weights the raw
patch features into a single focus feature. The alignment loss contrasts
each group's per-frame features against every group's frame centroid, in
both directions, frame by frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .resampler import AttentionRecord, QuerySet, VideoFeatures
from .tensor import Graph, Tensor
from .vcd import DEFAULT_TAU


@dataclass
class FocusFeatures:
    """``a`` is (N_g*T, c) with row ``i*T + t``; ``centroids`` is (N_g, c)."""

    a: Tensor
    centroids: Tensor
    groups: int
    frames: int

    @property
    def array(self) -> np.ndarray:
        return self.a.value.reshape(self.groups, self.frames, -1)

    @property
    def graph(self) -> Graph:
        return self.a.graph


def group_attention(record: AttentionRecord, grouping: QuerySet) -> Tensor:
    """(N_g, T*n) layer- and token-averaged per-frame attention of each group."""
    graph = record.per_frame[0].graph
    pool = grouping.pooling_matrix()
    total = None
    for layer in record.per_frame:
        per_token = graph.reshape(layer, (record.n_tokens, record.frames * record.patches))
        pooled = graph.matmul(pool, per_token)
        total = pooled if total is None else total + pooled
    return total * (1.0 / record.layers)


def frame_block_matrix(video: VideoFeatures) -> np.ndarray:
    """(T*n, T*c) block-diagonal matrix with frame t's features in block (t, t)."""
    T, n, c = video.values.shape
    block = np.zeros((T * n, T * c))
    for t in range(T):
        block[t * n:(t + 1) * n, t * c:(t + 1) * c] = video.values[t]
    return block


def centroids(features: FocusFeatures | Tensor, groups: int | None = None,
              frames: int | None = None) -> Tensor:
    """Mean over frames of each group's focus features, (N_g, c)."""
    if isinstance(features, FocusFeatures):
        a, groups, frames = features.a, features.groups, features.frames
    else:
        a = features
    if not frames or frames < 1:
        raise ContractError("need at least one frame")
    avg = np.kron(np.eye(groups), np.full((1, frames), 1.0 / frames))
    return a.graph.matmul(avg, a)


def focus_features(record: AttentionRecord, video: VideoFeatures, grouping: QuerySet) -> FocusFeatures:
    """Attention-weighted patch sums per group and frame; global tokens excluded."""
    if (record.frames, record.patches) != (video.frames, video.patches):
        raise ShapeError(
            "focus_features",
            [(record.frames, record.patches), (video.frames, video.patches)],
            "attention record and video disagree on frames/patches",
        )
    if record.n_tokens != grouping.n_tokens:
        raise ShapeError("focus_features", [(record.n_tokens,), (grouping.n_tokens,)])
    graph = record.per_frame[0].graph
    weights = group_attention(record, grouping)
    flat = graph.matmul(weights, frame_block_matrix(video))      # (N_g, T*c)
    a = graph.reshape(flat, (grouping.n_groups * video.frames, video.channels))
    cent = centroids(a, grouping.n_groups, video.frames)
    return FocusFeatures(a, cent, grouping.n_groups, video.frames)


def ffa_loss(features: FocusFeatures, tau: float = DEFAULT_TAU) -> Tensor:
    """Bidirectional frame-wise contrast between focus features and centroids."""
    if tau <= 0:
        raise ContractError("temperature must be positive")
    G, T = features.groups, features.frames
    graph = features.graph
    # reorder rows frame-major: row t*G + j holds a_j^t
    frame_major = [i * T + t for t in range(T) for i in range(G)]
    a_n = graph.l2_normalize(graph.take_rows(features.a, frame_major))
    c_n = graph.l2_normalize(features.centroids)

    # centroid anchors: row (i, t), column j -> cos(c_i, a_j^t)
    to_frames = graph.matmul(c_n, a_n.T) * (1.0 / tau)            # (G, T*G), col t*G+j
    to_frames = graph.reshape(to_frames, (G * T, G))
    pick_a = np.zeros((G * T, G))
    pick_a[np.arange(G * T), np.repeat(np.arange(G), T)] = 1.0

    # frame anchors: row (t, i), column j -> cos(a_i^t, c_j)
    to_centroids = graph.matmul(a_n, c_n.T) * (1.0 / tau)          # (T*G, G)
    pick_b = np.zeros((T * G, G))
    pick_b[np.arange(T * G), np.tile(np.arange(G), T)] = 1.0

    term_a = graph.sum(graph.mul(graph.log_softmax(to_frames), pick_a))
    term_b = graph.sum(graph.mul(graph.log_softmax(to_centroids), pick_b))
    return -(term_a + term_b)


def temporal_coherence(features: FocusFeatures | np.ndarray) -> float:
    """Mean over groups and frames of cos(a_i^t, centroid_i)."""
    arr = features.array if isinstance(features, FocusFeatures) else np.asarray(features)
    cent = arr.mean(axis=1, keepdims=True)
    num = np.sum(arr * cent, axis=-1)
    den = np.linalg.norm(arr, axis=-1) * np.linalg.norm(cent, axis=-1)
    cos = np.where(den < 1e-18, 0.0, num / np.where(den < 1e-18, 1.0, den))
    return float(np.mean(cos))
