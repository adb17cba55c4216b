"""End-to-end stage-1 training on synthetic videos.

The composite objective is a surrogate task loss plus weighted concept
discrimination (VSC, VSM) and temporal focus alignment (FFA) losses. The task
loss stands in for language modelling: a linear readout of the mean visual
token predicts the multi-hot vector of planted concepts.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .concepts import Caption, EmbedderParams, embed_concepts, extract_rule_based
from .errors import ConfigError, FormatError, NumericOverflowError
from .resampler import QuerySet, Resampler, ResamplerConfig, VideoFeatures, check_partition, init_queries, init_weights
from .synth import SynthDataset, SynthVideo
from .tensor import Graph, Tensor, backward
from .tfc import FocusFeatures, ffa_loss, focus_features
from .vcd import Assignment, DEFAULT_TAU, bce_with_logits_mean, cost_matrix, hungarian_assign, init_vsm_predictor, vsc_loss, vsm_loss

log = logging.getLogger(__name__)

SURROGATE_MODES = ("off", "bag-of-concepts")
DCK_MAGIC = b"DCK1"


def _strict(cls, data: dict, where: str) -> dict:
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    return data


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"optimizer kind must be sgd or adam, got {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))


@dataclass(frozen=True)
class TrainConfig:
    resampler: ResamplerConfig = field(default_factory=ResamplerConfig)
    n_tokens: int = 12
    n_global: int = 4
    n_groups: int = 4
    lambda_vsc: float = 1.0
    lambda_vsm: float = 1.0
    lambda_ffa: float = 1.0
    tau: float = DEFAULT_TAU
    tau_ffa: float | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    steps: int = 500
    batch_size: int = 8
    seed: int = 0
    surrogate_task: str = "bag-of-concepts"
    embedder_buckets: int = 1024
    workers: int = 1

    def __post_init__(self):
        check_partition(self.n_tokens, self.n_global, self.n_groups)
        for name in ("lambda_vsc", "lambda_vsm", "lambda_ffa"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val >= 0):
                raise ConfigError(f"{name} must be finite and >= 0")
        if self.steps < 1 or self.batch_size < 1 or self.workers < 1:
            raise ConfigError("steps, batch_size and workers must be >= 1")
        if not self.tau > 0 or (self.tau_ffa is not None and not self.tau_ffa > 0):
            raise ConfigError("temperatures must be positive")
        if self.surrogate_task not in SURROGATE_MODES:
            raise ConfigError(f"surrogate_task must be one of {SURROGATE_MODES}")

    @property
    def ffa_tau(self) -> float:
        return self.tau if self.tau_ffa is None else self.tau_ffa

    @property
    def partition(self) -> tuple[int, int, int]:
        return (self.n_tokens, self.n_global, self.n_groups)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"]["betas"] = list(self.optimizer.betas)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(_strict(cls, data, "config"))
        if "resampler" in data:
            data["resampler"] = ResamplerConfig(**_strict(ResamplerConfig, data["resampler"], "resampler"))
        if "optimizer" in data:
            data["optimizer"] = OptimizerConfig(**_strict(OptimizerConfig, data["optimizer"], "optimizer"))
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def replace(self, **changes) -> "TrainConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return TrainConfig(**d)


def load_config(path) -> TrainConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return TrainConfig.from_dict(data)


# ---- model state -------------------------------------------------------------


class DiscoModel:
    """Every trainable array, grouped by owner, with flat prefixed names."""

    def __init__(self, config: TrainConfig, vocab: Sequence[str],
                 resampler: Resampler, embedder: EmbedderParams,
                 vsm: dict[str, np.ndarray], readout: dict[str, np.ndarray]):
        self.config = config
        self.vocab = list(vocab)
        self.resampler = resampler
        self.embedder = embedder
        self.vsm = vsm
        self.readout = readout

    @classmethod
    def create(cls, config: TrainConfig, vocab: Sequence[str]) -> "DiscoModel":
        rc = config.resampler
        res = Resampler(rc, init_queries(rc, *config.partition), init_weights(rc))
        emb = EmbedderParams(rc.width, config.embedder_buckets, hash_seed=rc.seed)
        rng = np.random.default_rng([rc.seed, 2])
        vsm = init_vsm_predictor(rc.width, rng)
        readout = {
            "w": rng.standard_normal((rc.width, len(vocab))) / math.sqrt(rc.width),
            "b": np.zeros(len(vocab)),
        }
        return cls(config, vocab, res, emb, vsm, readout)

    @property
    def queries(self) -> QuerySet:
        return self.resampler.queries

    def parameters(self) -> dict[str, np.ndarray]:
        out = {f"resampler.{k}": v for k, v in self.resampler.parameters().items()}
        out["embedder.projection"] = self.embedder.projection
        out.update({f"vsm.{k}": v for k, v in self.vsm.items()})
        out.update({f"readout.{k}": v for k, v in self.readout.items()})
        return out

    def load(self, params: dict[str, np.ndarray]) -> None:
        own = self.parameters()
        missing = set(own) - set(params)
        if missing:
            raise FormatError("missing-parameters", ", ".join(sorted(missing)))
        for name, arr in own.items():
            if np.shape(params[name]) != arr.shape:
                raise FormatError("shape-mismatch", f"{name}: {np.shape(params[name])} vs {arr.shape}")
        self.resampler.load({k[len("resampler."):]: params[k] for k in own if k.startswith("resampler.")})
        self.embedder.projection = np.asarray(params["embedder.projection"], dtype=np.float64)
        for k in self.vsm:
            self.vsm[k] = np.asarray(params[f"vsm.{k}"], dtype=np.float64)
        for k in self.readout:
            self.readout[k] = np.asarray(params[f"readout.{k}"], dtype=np.float64)


# ---- composite loss -----------------------------------------------------------------


@dataclass
class LossBreakdown:
    task: float = 0.0
    vsc: float = 0.0
    vsm: float = 0.0
    ffa: float = 0.0
    total: float = 0.0
    vsc_skipped: bool = False
    vsm_skipped: bool = False

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("task", "vsc", "vsm", "ffa", "total")}


@dataclass
class VideoForward:
    graph: Graph
    tokens: "object"
    record: "object"
    features: FocusFeatures
    concept_embeddings: Tensor
    assignment: Assignment
    terms: dict[str, Tensor]
    total: Tensor
    breakdown: LossBreakdown


def video_concepts(video: SynthVideo) -> list[str]:
    return extract_rule_based(Caption(video.id, video.caption)).concepts


def _stage(component: str, fn: Callable):
    try:
        return fn()
    except NumericOverflowError as exc:
        raise NumericOverflowError(exc.node, component) from None


def forward_video(model: DiscoModel, features: VideoFeatures, concepts: Sequence[str],
                  targets: Sequence[int] | None = None, graph: Graph | None = None) -> VideoForward:
    """Build the full per-video graph: resample, match, and every loss term."""
    cfg = model.config
    graph = graph if graph is not None else Graph()
    bound = graph.bind(model.parameters())
    res_bound = {k[len("resampler."):]: v for k, v in bound.items() if k.startswith("resampler.")}

    tokens, record = _stage("resampler", lambda: model.resampler.forward(graph, features, res_bound))
    emb = _stage("embedder", lambda: embed_concepts(concepts, model.embedder, graph, bound["embedder.projection"]))
    assignment = hungarian_assign(cost_matrix(tokens.group_reps, emb)) if len(concepts) else Assignment((), 0.0)

    vsc, vsc_skip = _stage("vsc", lambda: vsc_loss(tokens.group_reps, emb, assignment, cfg.tau))
    predictor = {k: bound[f"vsm.{k}"] for k in model.vsm}
    vsm, vsm_skip = _stage("vsm", lambda: vsm_loss(tokens.group_reps, emb, assignment, predictor))
    feats = _stage("ffa", lambda: focus_features(record, features, model.queries))
    ffa = _stage("ffa", lambda: ffa_loss(feats, cfg.ffa_tau))

    if cfg.surrogate_task == "bag-of-concepts":
        def surrogate():
            pooled = graph.reshape(graph.mean(tokens.tokens, axis=0), (1, cfg.resampler.width))
            logits = graph.affine(pooled, bound["readout.w"], bound["readout.b"])
            labels = np.zeros((1, len(model.vocab)))
            labels[0, list(targets or [])] = 1.0
            return bce_with_logits_mean(graph, logits, labels)
        task = _stage("task", surrogate)
    else:
        task = graph.constant(0.0)

    total = graph.reshape(task, (1,))
    for lam, term in ((cfg.lambda_vsc, vsc), (cfg.lambda_vsm, vsm), (cfg.lambda_ffa, ffa)):
        if lam:
            total = total + graph.reshape(term, (1,)) * lam

    b = LossBreakdown(
        task=float(task.value), vsc=float(vsc.value), vsm=float(vsm.value), ffa=float(ffa.value),
        vsc_skipped=vsc_skip, vsm_skipped=vsm_skip,
    )
    b.total = b.task + cfg.lambda_vsc * b.vsc + cfg.lambda_vsm * b.vsm + cfg.lambda_ffa * b.ffa
    for name, val in b.as_dict().items():
        if not math.isfinite(val):
            raise NumericOverflowError("loss", name)
    terms = {"task": task, "vsc": vsc, "vsm": vsm, "ffa": ffa}
    return VideoForward(graph, tokens, record, feats, emb, assignment, terms, total, b)


def total_loss(video: SynthVideo, concepts: Sequence[str] | None, model: DiscoModel,
               config: TrainConfig | None = None) -> LossBreakdown:
    if config is not None and config is not model.config:
        model = DiscoModel(config, model.vocab, model.resampler, model.embedder, model.vsm, model.readout)
    concepts = video_concepts(video) if concepts is None else list(concepts)
    return forward_video(model, video.features, concepts, video.concept_ids).breakdown


# ---- optimisation ---------------------------------------------------------------------


class Optimizer:
    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        cfg = self.config
        self.t += 1
        out = {}
        if cfg.kind == "sgd":
            for k, p in params.items():
                out[k] = p - cfg.lr * grads[k]
            return out
        b1, b2 = cfg.betas
        for k, p in params.items():
            g = grads[k]
            m = self.m[k] = b1 * self.m.get(k, np.zeros_like(p)) + (1 - b1) * g
            v = self.v[k] = b2 * self.v.get(k, np.zeros_like(p)) + (1 - b2) * g * g
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            out[k] = p - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        return out


def _video_grads(model: DiscoModel, video: SynthVideo, concepts: list[str]):
    fwd = forward_video(model, video.features, concepts, video.concept_ids)
    return fwd.breakdown, backward(fwd.graph, fwd.total)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    queue: list[int] = []
    while True:
        batch = []
        while len(batch) < batch_size:
            if not queue:
                queue = list(rng.permutation(n))
            batch.append(int(queue.pop(0)))
        yield batch


@dataclass
class Checkpoint:
    config: TrainConfig
    vocab: list[str]
    params: dict[str, np.ndarray]
    step: int = 0
    metrics: dict = field(default_factory=dict)

    def model(self) -> DiscoModel:
        model = DiscoModel.create(self.config, self.vocab)
        model.load(self.params)
        return model


def _round_f32(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.asarray(v, dtype=np.float32).astype(np.float64) for k, v in params.items()}


def train(config: TrainConfig, dataset: SynthDataset, log_path=None,
          model: DiscoModel | None = None,
          on_step: Callable[[dict], None] | None = None) -> tuple[Checkpoint, list[dict]]:
    """Optimise the composite loss; returns the f32-rounded checkpoint and step log."""
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    model = model or DiscoModel.create(config, dataset.names)
    concepts = [video_concepts(v) for v in dataset.videos]
    opt = Optimizer(config.optimizer)
    batches = _batches(len(dataset), config.batch_size, np.random.default_rng([config.seed, 3]))
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    if pool is not None:
        log.warning("data-parallel mode (%d workers): step logs are not guaranteed bit-reproducible",
                    config.workers)
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    step_log: list[dict] = []
    try:
        for step in range(1, config.steps + 1):
            batch = next(batches)
            jobs = [(model, dataset.videos[i], concepts[i]) for i in batch]
            results = list(pool.map(lambda j: _video_grads(*j), jobs)) if pool else [_video_grads(*j) for j in jobs]
            params = model.parameters()
            grads = {k: np.zeros_like(v) for k, v in params.items()}
            sums = dict.fromkeys(("task", "vsc", "vsm", "ffa", "total"), 0.0)
            skipped = 0
            for breakdown, g in results:
                for k in grads:
                    grads[k] += g[k]
                for k, val in breakdown.as_dict().items():
                    sums[k] += val
                skipped += int(breakdown.vsc_skipped)
            scale = 1.0 / len(batch)
            for k in grads:
                grads[k] *= scale
            losses = {k: v * scale for k, v in sums.items()}
            for name, val in losses.items():
                if not math.isfinite(val):
                    raise NumericOverflowError(f"step {step}", name)
            grad_norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if not math.isfinite(grad_norm):
                raise NumericOverflowError(f"step {step}", "gradient")
            model.load(opt.step(params, grads))
            entry = {"step": step, "losses": losses, "grad_norm": grad_norm, "vcd_skipped": skipped}
            step_log.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
            if on_step:
                on_step(entry)
    finally:
        if log_fh:
            log_fh.close()
        if pool:
            pool.shutdown()
    snapshot = step_log[-1]["losses"] if step_log else {}
    ckpt = Checkpoint(config, list(model.vocab), _round_f32(model.parameters()), config.steps, snapshot)
    return ckpt, step_log


def initial_checkpoint(config: TrainConfig, vocab: Sequence[str]) -> Checkpoint:
    """Untrained model packaged as a step-0 checkpoint."""
    model = DiscoModel.create(config, vocab)
    return Checkpoint(config, list(vocab), _round_f32(model.parameters()), 0, {})


# ---- checkpoint files -------------------------------------------------------------------


def save_checkpoint(ckpt: Checkpoint, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = list(ckpt.params)
    blob = bytearray(DCK_MAGIC)
    blob += struct.pack("<I", len(names))
    for name in names:
        blob += np.asarray(ckpt.params[name], dtype="<f4").tobytes()
    (out / "checkpoint.dck").write_bytes(bytes(blob))
    manifest = {
        "format": "DCK1",
        "blob": "checkpoint.dck",
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "metrics": ckpt.metrics,
        "vocab": ckpt.vocab,
        "parameters": [{"name": n, "shape": list(np.shape(ckpt.params[n]))} for n in names],
    }
    path = out / "checkpoint.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.json"
    manifest = json.loads(path.read_text())
    blob = (path.parent / manifest["blob"]).read_bytes()
    if blob[:4] != DCK_MAGIC:
        raise FormatError("bad-magic", f"expected {DCK_MAGIC!r}, found {blob[:4]!r}")
    (count,) = struct.unpack_from("<I", blob, 4)
    entries = manifest["parameters"]
    if count != len(entries):
        raise FormatError("count-mismatch", f"blob has {count} tensors, manifest {len(entries)}")
    sizes = [int(np.prod(e["shape"])) for e in entries]
    expected = 8 + 4 * sum(sizes)
    if len(blob) != expected:
        raise FormatError("length-mismatch", f"blob is {len(blob)} bytes, manifest implies {expected}")
    params, offset = {}, 8
    for entry, size in zip(entries, sizes):
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
        params[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
        offset += 4 * size
    return Checkpoint(
        TrainConfig.from_dict(manifest["config"]), list(manifest["vocab"]), params,
        int(manifest["step"]), manifest.get("metrics", {}),
    )


def write_step_log(entries: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e) + "\n")


def timed_train(config: TrainConfig, dataset: SynthDataset) -> tuple[Checkpoint, list[dict], float]:
    """Train and report mean wall-clock seconds per step."""
    start = time.perf_counter()
    ckpt, steps = train(config, dataset)
    return ckpt, steps, (time.perf_counter() - start) / config.steps
