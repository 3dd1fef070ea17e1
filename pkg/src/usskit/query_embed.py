"""Latent source embeddings from a small log-mel audio tagger.

The tagger is four conv blocks (conv, batch-norm, ReLU, 2x2 average pool)
followed by a per-frame penultimate linear layer. Averaging that layer over
time gives the query embedding; a linear softmax head on the average is what
the tagger is trained with.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import numerics
from .data import AudioClip, Manifest, load_clip, resample
from .dsp import StftConfig, log_mel_tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TaggerConfig:
    sample_rate: int = 8000
    clip_samples: int = 16000
    window_size: int = 512
    hop_size: int = 80
    n_mels: int = 64
    channels: tuple[int, ...] = (16, 32, 64, 128)
    embed_dim: int = 128
    lr: float = 3e-3
    batch: int = 16
    holdout_fraction: float = 0.2
    seed: int = 0

    @property
    def mel_config(self) -> StftConfig:
        return StftConfig(self.window_size, self.hop_size, self.sample_rate)


@dataclass
class QueryEmbedding:
    vector: np.ndarray
    provenance: str
    class_id: int | None = None

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32)
        if self.vector.ndim != 1:
            raise ValueError("query embedding must be a vector")
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("query embedding has non-finite entries")

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


class Tagger(nn.Module):
    def __init__(self, n_classes: int, config: TaggerConfig = TaggerConfig()):
        super().__init__()
        self.config = config
        self.n_classes = n_classes
        layers = []
        c_in = 1
        for c in config.channels:
            conv = nn.Conv2d(c_in, c, 3, padding=1, bias=False)
            numerics.init_kaiming(conv)
            layers += [conv, numerics.batch_norm(c)]
            c_in = c
        self.convs = nn.ModuleList(layers[0::2])
        self.norms = nn.ModuleList(layers[1::2])
        self.penultimate = nn.Linear(c_in, config.embed_dim)
        numerics.init_kaiming(self.penultimate)
        self.classifier = nn.Linear(config.embed_dim, n_classes)
        numerics.init_xavier(self.classifier)
        self.register_buffer("norm_mean", torch.zeros(()))
        self.register_buffer("norm_std", torch.ones(()))

    def features(self, wave: torch.Tensor) -> torch.Tensor:
        """(B, N) waveform → (B, frames', embed_dim) penultimate activations."""
        c = self.config
        x = log_mel_tensor(wave, c.mel_config, c.n_mels).to(self.penultimate.weight.dtype)
        x = ((x - self.norm_mean) / self.norm_std)[:, None]
        for conv, bn in zip(self.convs, self.norms):
            x = F.avg_pool2d(F.relu(bn(conv(x))), 2)
        x = x.mean(dim=3).transpose(1, 2)
        return F.relu(self.penultimate(x))

    def embed(self, wave: torch.Tensor) -> torch.Tensor:
        return self.features(wave).mean(dim=1)

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.embed(wave))


def _crop(clip: AudioClip, n: int, rng) -> np.ndarray:
    """A random ``n``-sample crop centred on an active frame when possible."""
    if len(clip) <= n:
        return np.pad(clip.samples, (0, n - len(clip)))
    centre = None
    if clip.activity is not None and clip.activity.any():
        frame = int(rng.choice(np.flatnonzero(clip.activity)))
        centre = int((frame + 0.5) * clip.sample_rate / clip.activity_rate)
    if centre is None:
        centre = int(rng.integers(n // 2, len(clip) - n // 2))
    start = int(np.clip(centre - n // 2, 0, len(clip) - n))
    return clip.samples[start : start + n]


def _peak_normalise(x: np.ndarray, gain: float = 1.0) -> np.ndarray:
    peak = np.max(np.abs(x))
    return x / peak * gain if peak > 0 else x


@dataclass
class TaggerResult:
    model: Tagger
    accuracy: float
    losses: list[float] = field(default_factory=list)


def _accuracy(model: Tagger, waves: np.ndarray, labels: np.ndarray) -> float:
    model.eval()
    with torch.no_grad():
        logits = model(torch.from_numpy(waves.astype(np.float32)))
    return float((logits.argmax(dim=1).numpy() == labels).mean())


def train_tagger(manifest_or_clips, epochs: int, config: TaggerConfig = TaggerConfig()) -> TaggerResult:
    """Cross-entropy training on 2 s crops; reports held-out clip accuracy.

    ``manifest_or_clips`` is a :class:`Manifest` or a list of labelled
    clips. A per-class ``holdout_fraction`` of clips is kept out of training.
    """
    if isinstance(manifest_or_clips, Manifest):
        clips = [resample(load_clip(manifest_or_clips, r), config.sample_rate)
                 for r in manifest_or_clips]
    else:
        clips = [resample(c, config.sample_rate) for c in manifest_or_clips]
    labels = sorted({c.label for c in clips})
    if len(labels) < 2:
        raise ValueError("tagger training needs at least 2 classes")
    n_classes = max(labels) + 1
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    train_clips, held = [], []
    for k in labels:
        members = [c for c in clips if c.label == k]
        n_hold = max(1, int(round(config.holdout_fraction * len(members)))) if len(members) > 1 else 0
        held += members[:n_hold]
        train_clips += members[n_hold:]
    model = Tagger(n_classes, config)
    # standardisation constants from one crop per training clip
    sample = np.stack([_peak_normalise(_crop(c, config.clip_samples, rng)) for c in train_clips])
    with torch.no_grad():
        lm = log_mel_tensor(torch.from_numpy(sample.astype(np.float64)), config.mel_config,
                            config.n_mels)
        model.norm_mean.fill_(float(lm.mean()))
        model.norm_std.fill_(float(lm.std()))
    held_rng = np.random.default_rng([config.seed, 1])
    held_waves = np.stack([_peak_normalise(_crop(c, config.clip_samples, held_rng)) for c in held]) \
        if held else np.zeros((0, config.clip_samples))
    held_labels = np.array([c.label for c in held])
    opt = numerics.Adam(numerics.trainable(model), lr=config.lr)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(train_clips))
        model.train()
        for i in range(0, len(order), config.batch):
            idx = order[i : i + config.batch]
            if len(idx) < 2:
                continue
            waves = np.stack([
                _peak_normalise(_crop(train_clips[j], config.clip_samples, rng),
                                rng.uniform(0.25, 1.0))
                for j in idx
            ])
            y = torch.tensor([train_clips[j].label for j in idx])
            logits = model(torch.from_numpy(waves.astype(np.float32)))
            losses.append(opt.step(F.cross_entropy(logits, y)))
        logger.info("tagger epoch %d loss %.4f", epoch, losses[-1] if losses else float("nan"))
    acc = _accuracy(model, held_waves, held_labels) if len(held) else float("nan")
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return TaggerResult(model, acc, losses)


def _check_clip(clip: AudioClip, tagger: Tagger) -> None:
    c = tagger.config
    if clip.sample_rate != c.sample_rate or len(clip) != c.clip_samples:
        raise ValueError(
            f"embedding input must be {c.clip_samples} samples at {c.sample_rate} Hz, "
            f"got {len(clip)} at {clip.sample_rate} Hz"
        )


def embed_waves(waves: torch.Tensor, tagger: Tagger) -> torch.Tensor:
    """Batch of oracle embeddings in evaluation mode without gradients."""
    tagger.eval()
    with torch.no_grad():
        return tagger.embed(waves.to(tagger.penultimate.weight.dtype))


def oracle_embedding(clip: AudioClip, tagger: Tagger) -> QueryEmbedding:
    _check_clip(clip, tagger)
    vec = embed_waves(torch.from_numpy(np.asarray(clip.samples, dtype=np.float32))[None], tagger)
    return QueryEmbedding(vec[0].numpy(), f"oracle:{clip.name}", clip.label)


def average_embedding(clips, tagger: Tagger, class_id: int | None = None) -> QueryEmbedding:
    clips = list(clips)
    if not clips:
        raise ValueError("average embedding needs at least one clip")
    labels = {c.label for c in clips}
    if len(labels) > 1:
        raise ValueError(f"clips span several classes: {sorted(labels)}")
    if class_id is None:
        class_id = clips[0].label
    vecs = np.stack([oracle_embedding(c, tagger).vector for c in clips]).astype(np.float64)
    return QueryEmbedding(vecs.mean(axis=0), f"average:{class_id}:{len(clips)}", class_id)


# --------------------------------------------------------------------------
# Persistence


def save_tagger(result: TaggerResult, path) -> None:
    m = result.model
    meta = {"kind": "tagger", "n_classes": m.n_classes, "config": asdict(m.config),
            "accuracy": result.accuracy}
    numerics.save_archive(path, numerics.module_arrays(m), meta)


def load_tagger(path) -> Tagger:
    tensors, meta = numerics.load_archive(path)
    if meta.get("kind") != "tagger":
        raise numerics.ArchiveError(f"{path}: not a tagger checkpoint")
    cfg = dict(meta["config"])
    cfg["channels"] = tuple(cfg["channels"])
    model = Tagger(meta["n_classes"], TaggerConfig(**cfg))
    numerics.load_module_arrays(model, tensors)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@dataclass
class EmbeddingStore:
    average: dict[int, QueryEmbedding] = field(default_factory=dict)
    oracle: dict[str, QueryEmbedding] = field(default_factory=dict)
    class_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        dims = {e.dim for e in [*self.average.values(), *self.oracle.values()]}
        if len(dims) > 1:
            raise ValueError(f"store mixes embedding dimensions {sorted(dims)}")

    def add_average(self, emb: QueryEmbedding) -> None:
        self._check_dim(emb)
        self.average[emb.class_id] = emb

    def add_oracle(self, key: str, emb: QueryEmbedding) -> None:
        self._check_dim(emb)
        self.oracle[key] = emb

    def _check_dim(self, emb: QueryEmbedding) -> None:
        for other in [*self.average.values(), *self.oracle.values()]:
            if other.dim != emb.dim:
                raise ValueError(f"embedding dim {emb.dim} != store dim {other.dim}")
            break

    def class_id(self, name_or_id) -> int:
        if isinstance(name_or_id, int) or str(name_or_id).isdigit():
            return int(name_or_id)
        for k, n in self.class_names.items():
            if n == name_or_id:
                return k
        raise KeyError(f"unknown class {name_or_id!r}")

    def save(self, archive_path, index_path) -> None:
        tensors, index = {}, {}
        for k, e in sorted(self.average.items()):
            tensors[f"average/{k}"] = e.vector
            index[f"average/{k}"] = {"provenance": e.provenance, "class_id": e.class_id}
        for key, e in sorted(self.oracle.items()):
            tensors[f"oracle/{key}"] = e.vector
            index[f"oracle/{key}"] = {"provenance": e.provenance, "class_id": e.class_id}
        numerics.save_archive(archive_path, tensors, {"kind": "embedding_store"})
        _, entries, _ = numerics.read_archive_header(archive_path)
        for name, _, _, off, _ in entries:
            index[name]["offset"] = off
        payload = {"class_names": {str(k): v for k, v in sorted(self.class_names.items())},
                   "entries": index}
        Path(index_path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, archive_path, index_path) -> "EmbeddingStore":
        tensors, meta = numerics.load_archive(archive_path)
        if meta.get("kind") != "embedding_store":
            raise numerics.ArchiveError(f"{archive_path}: not an embedding store")
        payload = json.loads(Path(index_path).read_text())
        store = cls(class_names={int(k): v for k, v in payload["class_names"].items()})
        for name, info in payload["entries"].items():
            emb = QueryEmbedding(tensors[name], info["provenance"], info["class_id"])
            group, key = name.split("/", 1)
            if group == "average":
                store.add_average(emb)
            else:
                store.add_oracle(key, emb)
        return store
