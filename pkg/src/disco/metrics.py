"""Distinctness / coherence metrics, figure-style exports and the token sweep."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, NotFoundError, PartitionMismatchError
from .resampler import check_partition
from .synth import SynthDataset, SynthVideo
from .tensor import Graph
from .tfc import group_attention, temporal_coherence
from .train import Checkpoint, DiscoModel, TrainConfig, forward_video, timed_train, video_concepts
from .vcd import Assignment, cosine_matrix, hungarian_assign


def diagonal_dominance(similarity: np.ndarray, assignment: Assignment) -> float:
    """Mean matched cosine minus mean unmatched cosine (empty sides count as 0)."""
    mask = np.zeros(similarity.shape, dtype=bool)
    for i, j in assignment.pairs:
        mask[i, j] = True
    matched = float(similarity[mask].mean()) if mask.any() else 0.0
    unmatched = float(similarity[~mask].mean()) if (~mask).any() else 0.0
    return matched - unmatched


def concept_coverage(similarity: np.ndarray) -> float:
    """Fraction of concepts whose best-matching group no other concept shares."""
    if similarity.shape[1] == 0:
        return 0.0
    best = np.argmax(similarity, axis=0)
    counts = np.bincount(best, minlength=similarity.shape[0])
    return float(np.mean(counts[best] == 1))


@dataclass
class VideoMetrics:
    id: str
    diagonal_dominance: float | None
    temporal_coherence: float
    concept_coverage: float | None


@dataclass
class MetricsReport:
    per_video: list[VideoMetrics]
    diagonal_dominance: float
    temporal_coherence: float
    concept_coverage: float
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "aggregate": {
                "diagonal_dominance": self.diagonal_dominance,
                "temporal_coherence": self.temporal_coherence,
                "concept_coverage": self.concept_coverage,
            },
            "per_video": [vars(v) for v in self.per_video],
            **self.extras,
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


@dataclass
class VideoAnalysis:
    concepts: list[str]
    similarity: np.ndarray          # (N_g, M)
    assignment: Assignment
    focus: np.ndarray               # (N_g, T, c)
    group_attention: np.ndarray     # (N_g, T, n)


def _model_for(checkpoint: Checkpoint, config: TrainConfig | None) -> DiscoModel:
    if config is not None and config.partition != checkpoint.config.partition:
        raise PartitionMismatchError(
            f"checkpoint partition {checkpoint.config.partition} != config partition {config.partition}"
        )
    return checkpoint.model()


def analyze_video(model: DiscoModel, video: SynthVideo) -> VideoAnalysis:
    concepts = video_concepts(video)
    fwd = forward_video(model, video.features, concepts, video.concept_ids, Graph())
    sim = cosine_matrix(fwd.tokens.group_reps.value, fwd.concept_embeddings.value)
    assignment = hungarian_assign(1.0 - sim) if concepts else Assignment((), 0.0)
    attn = group_attention(fwd.record, model.queries).value
    T, n = video.features.frames, video.features.patches
    return VideoAnalysis(concepts, sim, assignment, fwd.features.array.copy(),
                         attn.reshape(model.queries.n_groups, T, n))


def evaluate(checkpoint: Checkpoint, dataset: SynthDataset, config: TrainConfig | None = None,
             out_path=None) -> MetricsReport:
    model = _model_for(checkpoint, config)
    rows = []
    for video in dataset.videos:
        a = analyze_video(model, video)
        has = len(a.concepts) > 0
        rows.append(VideoMetrics(
            video.id,
            diagonal_dominance(a.similarity, a.assignment) if has else None,
            temporal_coherence(a.focus),
            concept_coverage(a.similarity) if has else None,
        ))

    def agg(attr):
        vals = [getattr(r, attr) for r in rows if getattr(r, attr) is not None]
        return float(np.mean(vals)) if vals else 0.0

    report = MetricsReport(rows, agg("diagonal_dominance"), agg("temporal_coherence"),
                           agg("concept_coverage"), {"step": checkpoint.step})
    if out_path:
        report.write(out_path)
    return report


def _find(dataset: SynthDataset, video_id: str) -> SynthVideo:
    try:
        return dataset.by_id(video_id)
    except KeyError:
        raise NotFoundError(f"video {video_id!r} not in dataset") from None


def export_similarity(checkpoint: Checkpoint, dataset: SynthDataset, video_id: str, out_path) -> np.ndarray:
    """Group x concept cosine matrix as CSV with a header of concept names."""
    video = _find(dataset, video_id)
    a = analyze_video(checkpoint.model(), video)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(a.concepts)
        for row in a.similarity:
            w.writerow([f"{x:.6f}" for x in row])
    return a.similarity


def grid_shape(n: int) -> tuple[int, int]:
    h = max(d for d in range(1, int(math.isqrt(n)) + 1) if n % d == 0)
    return h, n // h


def write_pgm(path, grid: np.ndarray) -> None:
    """8-bit binary PGM, linearly min-max scaled; a flat grid maps to 0."""
    lo, hi = float(grid.min()), float(grid.max())
    scaled = np.zeros(grid.shape) if hi <= lo else (grid - lo) / (hi - lo) * 255.0
    pixels = np.rint(scaled).astype(np.uint8)
    h, w = grid.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def export_attention(checkpoint: Checkpoint, dataset: SynthDataset, video_id: str, group: int,
                     out_dir, pgm: bool = True) -> np.ndarray:
    """Write one CSV (and optionally one PGM) grid per frame; returns (T, n) weights."""
    model = checkpoint.model()
    if not 0 <= group < model.queries.n_groups:
        raise ContractError(f"group {group} out of range [0, {model.queries.n_groups})")
    video = _find(dataset, video_id)
    weights = analyze_video(model, video).group_attention[group]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h, w = grid_shape(video.features.patches)
    for t, frame in enumerate(weights):
        grid = frame.reshape(h, w)
        np.savetxt(out / f"{video_id}_g{group}_t{t}.csv", grid, delimiter=",", fmt="%.12f")
        if pgm:
            write_pgm(out / f"{video_id}_g{group}_t{t}.pgm", grid)
    return weights


# ---- token sweep -------------------------------------------------------------------


def sweep_partition(n_tokens: int, group_size: int) -> tuple[int, int, int]:
    """A quarter of the tokens are global; the rest form groups of ``group_size``."""
    n_global = n_tokens // 4
    rest = n_tokens - n_global
    if n_tokens % 4 or rest < group_size or rest % group_size:
        valid = [k for k in range(4, 129, 4) if (k - k // 4) % group_size == 0]
        raise ConfigError(
            f"{n_tokens} tokens admit no partition with groups of {group_size}; valid counts: {valid}"
        )
    check_partition(n_tokens, n_global, rest // group_size)
    return n_tokens, n_global, rest // group_size


def token_sweep(base: TrainConfig, token_counts: Sequence[int], dataset: SynthDataset) -> dict:
    group_size = (base.n_tokens - base.n_global) // base.n_groups
    partitions = [sweep_partition(int(k), group_size) for k in token_counts]
    rows = []
    for n_tokens, n_global, n_groups in partitions:
        cfg = base.replace(n_tokens=n_tokens, n_global=n_global, n_groups=n_groups)
        ckpt, _, per_step = timed_train(cfg, dataset)
        rep = evaluate(ckpt, dataset)
        rows.append({
            "tokens": n_tokens, "global": n_global, "groups": n_groups,
            "diagonal_dominance": rep.diagonal_dominance,
            "temporal_coherence": rep.temporal_coherence,
            "concept_coverage": rep.concept_coverage,
            "seconds_per_step": per_step,
        })
    return {"config": base.to_dict(), "results": rows}
