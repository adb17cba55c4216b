"""Planted-concept synthetic videos and the on-disk formats around them.

Each concept of a fixed vocabulary gets a random unit prototype vector. A
video plants a few concepts; in every frame each planted concept occupies one
patch with probability ``p_show`` (prototype plus Gaussian noise) and all
other patches are background noise. The caption lists the planted names, so
rule-based extraction recovers them exactly.

Feature files use the DVF1 container: little-endian magic ``DVF1``, three
u32 extents (T, n, c), then T*n*c float32 values in row-major order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .concepts import load_nouns
from .errors import ConfigError, FormatError
from .resampler import VideoFeatures

DVF_MAGIC = b"DVF1"
_DVF_HEADER = struct.Struct("<4sIII")
_MAX_VALUES = 1 << 28
BACKGROUND = "background"


@dataclass(frozen=True)
class SynthSpec:
    videos: int = 64
    frames: int = 4
    patches: int = 16
    channels: int = 64
    vocab: int = 12
    concepts_min: int = 3
    concepts_max: int = 5
    noise: float = 0.05
    p_show: float = 0.75
    background: float = 0.06
    max_cos: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if min(self.videos, self.frames, self.patches, self.channels, self.vocab) < 1:
            raise ConfigError("all synth extents must be positive")
        if not 1 <= self.concepts_min <= self.concepts_max:
            raise ConfigError("need 1 <= concepts_min <= concepts_max")
        if self.concepts_max > min(self.vocab, self.patches):
            raise ConfigError("concepts_max must not exceed vocab or patches")
        if not 0.0 < self.p_show <= 1.0:
            raise ConfigError("p_show must be in (0, 1]")
        if self.noise < 0 or self.background < 0:
            raise ConfigError("noise levels must be non-negative")
        if self.vocab > len(load_nouns()):
            raise ConfigError(f"vocab {self.vocab} exceeds the {len(load_nouns())} shipped names")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class SynthVideo:
    id: str
    features: VideoFeatures
    caption: str
    truth: list[list[str]]          # [frame][patch] -> concept name or "background"
    concepts: list[str]             # planted names, caption order
    concept_ids: list[int]          # indices into the vocabulary


@dataclass
class SynthDataset:
    spec: SynthSpec
    names: list[str]
    prototypes: np.ndarray | None
    videos: list[SynthVideo] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.videos)

    def by_id(self, vid: str) -> SynthVideo:
        for v in self.videos:
            if v.id == vid:
                return v
        raise KeyError(vid)

    def manifest(self, feature_dir: str = "features", truth_dir: str = "truth") -> dict:
        return {
            "spec": asdict(self.spec),
            "videos": [
                {
                    "id": v.id,
                    "feature_path": f"{feature_dir}/{v.id}.dvf",
                    "caption": v.caption,
                    "truth_path": f"{truth_dir}/{v.id}.json",
                }
                for v in self.videos
            ],
        }


def _f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def make_prototypes(spec: SynthSpec) -> np.ndarray:
    """Unit vectors with pairwise |cos| <= spec.max_cos, by rejection."""
    rng = np.random.default_rng([spec.seed, 0])
    protos: list[np.ndarray] = []
    tries = 0
    while len(protos) < spec.vocab:
        tries += 1
        if tries > 10_000:
            raise ConfigError(
                f"could not place {spec.vocab} prototypes with |cos| <= {spec.max_cos} "
                f"in {spec.channels} dimensions; vocabulary too large for width"
            )
        v = rng.standard_normal(spec.channels)
        v /= np.linalg.norm(v)
        if all(abs(float(v @ p)) <= spec.max_cos for p in protos):
            protos.append(v)
    return _f32(np.stack(protos))


def caption_for(names: list[str]) -> str:
    return "a video with " + ", ".join(names)


def _make_video(spec: SynthSpec, index: int, names: list[str], protos: np.ndarray) -> SynthVideo:
    rng = np.random.default_rng([spec.seed, index + 1])
    T, n, c = spec.frames, spec.patches, spec.channels
    m = int(rng.integers(spec.concepts_min, spec.concepts_max + 1))
    ids = [int(i) for i in rng.choice(spec.vocab, size=m, replace=False)]

    shown = rng.random((T, m)) < spec.p_show
    for k in range(m):
        if not shown[:, k].any():
            shown[int(rng.integers(T)), k] = True

    feats = rng.normal(0.0, spec.background, size=(T, n, c)) if spec.background else np.zeros((T, n, c))
    truth = [[BACKGROUND] * n for _ in range(T)]
    for t in range(T):
        present = [k for k in range(m) if shown[t, k]]
        slots = rng.choice(n, size=len(present), replace=False)
        for k, p in zip(present, slots):
            noise = rng.normal(0.0, spec.noise, size=c) if spec.noise else 0.0
            feats[t, p] = protos[ids[k]] + noise
            truth[t][int(p)] = names[ids[k]]
    planted = [names[i] for i in ids]
    return SynthVideo(
        id=f"vid{index:04d}",
        features=VideoFeatures(_f32(feats)),
        caption=caption_for(planted),
        truth=truth,
        concepts=planted,
        concept_ids=ids,
    )


def generate_dataset(spec: SynthSpec) -> SynthDataset:
    """Deterministic per seed; values are rounded to float32 precision so an
    in-memory dataset equals one reloaded from DVF1 files."""
    names = list(load_nouns()[: spec.vocab])
    protos = make_prototypes(spec)
    videos = [_make_video(spec, i, names, protos) for i in range(spec.videos)]
    return SynthDataset(spec, names, protos, videos)


def dataset_hash(dataset: SynthDataset) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(dataset.manifest(), sort_keys=True).encode())
    for v in dataset.videos:
        h.update(v.features.values.astype("<f4").tobytes())
        h.update(json.dumps(v.truth).encode())
    return h.hexdigest()


# ---- DVF1 ----------------------------------------------------------------------


def encode_features(video: VideoFeatures) -> bytes:
    T, n, c = video.values.shape
    return _DVF_HEADER.pack(DVF_MAGIC, T, n, c) + video.values.astype("<f4").tobytes()


def decode_features(blob: bytes) -> VideoFeatures:
    if len(blob) < _DVF_HEADER.size:
        raise FormatError("truncated", f"header needs {_DVF_HEADER.size} bytes, got {len(blob)}")
    magic, T, n, c = _DVF_HEADER.unpack_from(blob)
    if magic != DVF_MAGIC:
        raise FormatError("bad-magic", f"expected {DVF_MAGIC!r}, found {magic!r}")
    count = T * n * c
    if count == 0 or count > _MAX_VALUES:
        raise FormatError("dimension-overflow", f"extents T={T}, n={n}, c={c} are out of range")
    payload = len(blob) - _DVF_HEADER.size
    if payload < 4 * count:
        raise FormatError("truncated", f"expected {count} floats, found {payload // 4}")
    if payload > 4 * count:
        raise FormatError("trailing-data", f"{payload - 4 * count} bytes after payload")
    values = np.frombuffer(blob, dtype="<f4", count=count, offset=_DVF_HEADER.size)
    return VideoFeatures(values.astype(np.float64).reshape(T, n, c))


def write_features(path, video: VideoFeatures) -> None:
    Path(path).write_bytes(encode_features(video))


def read_features(path) -> VideoFeatures:
    return decode_features(Path(path).read_bytes())


# ---- manifests -------------------------------------------------------------------


def write_dataset(dataset: SynthDataset, out_dir) -> Path:
    """Write features, truth labels and ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(parents=True, exist_ok=True)
    manifest = dataset.manifest()
    for v, entry in zip(dataset.videos, manifest["videos"]):
        write_features(out / entry["feature_path"], v.features)
        (out / entry["truth_path"]).write_text(json.dumps(v.truth))
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_dataset(manifest_path) -> SynthDataset:
    """Load a dataset written by :func:`write_dataset`.

    Planted concepts are recovered from the caption, which lists them in
    planting order.
    """
    from .concepts import Caption, extract_rule_based

    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    manifest = json.loads(manifest_path.read_text())
    spec = SynthSpec.from_dict(manifest["spec"])
    names = list(load_nouns()[: spec.vocab])
    index = {name: i for i, name in enumerate(names)}
    videos = []
    for entry in manifest["videos"]:
        concepts = extract_rule_based(Caption(entry["id"], entry["caption"])).concepts
        videos.append(SynthVideo(
            id=entry["id"],
            features=read_features(root / entry["feature_path"]),
            caption=entry["caption"],
            truth=json.loads((root / entry["truth_path"]).read_text()),
            concepts=concepts,
            concept_ids=[index[c] for c in concepts if c in index],
        ))
    return SynthDataset(spec, names, None, videos)
