"""Mixture construction and the L1 separator training loop."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import numerics
from .data import AudioClip
from .dsp import StftConfig
from .query_embed import QueryEmbedding, Tagger, embed_waves
from .separator import QuerySeparator, SeparatorConfig, separator_meta
from .ssl_mae import MaeConfig, MaskedAutoencoder, SslFrontend, STRATEGIES

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class MixtureExample:
    mixture: AudioClip
    target: AudioClip
    query: QueryEmbedding | None
    classes: tuple[int, int]  # (target class, other class)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch: int = 4
    steps: int = 500
    seed: int = 0
    strategy: str = "frozen"
    fusion: bool = True
    shared_gain: bool = False

    def __post_init__(self):
        if self.lr <= 0 or self.batch <= 0 or self.steps < 0:
            raise ValueError("lr and batch must be positive, steps non-negative")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")


def energy(x: np.ndarray) -> float:
    return float(np.dot(x.astype(np.float64), x.astype(np.float64)))


def make_mixture(
    s1: AudioClip,
    s2: AudioClip,
    embedder: Callable[[AudioClip], QueryEmbedding] | None = None,
    shared_gain: bool = False,
) -> tuple[MixtureExample, MixtureExample] | None:
    """Energy-match ``s2`` to ``s1``, mix, then peak-normalise.

    The mixture and each target are divided by their own peak absolute
    value. With ``shared_gain`` the targets take the mixture's gain instead,
    which keeps ``x = s1 + s2`` exact. Returns ``None`` when either anchor is
    silent.
    """
    if len(s1) != len(s2) or s1.sample_rate != s2.sample_rate:
        raise ValueError("anchors must share length and sample rate")
    if s1.label is not None and s1.label == s2.label:
        raise ValueError(f"anchors must come from distinct classes (both {s1.label})")
    a = np.asarray(s1.samples, dtype=np.float64)
    b = np.asarray(s2.samples, dtype=np.float64)
    e1, e2 = energy(a), energy(b)
    if e1 == 0.0 or e2 == 0.0:
        logger.warning("skipping pair with a silent anchor (%s, %s)", s1.name, s2.name)
        return None
    b = b * np.sqrt(e1 / e2)
    x = a + b
    peak_x = np.max(np.abs(x))
    if peak_x == 0.0:
        logger.warning("skipping pair that cancels to silence (%s, %s)", s1.name, s2.name)
        return None
    x = x / peak_x
    if shared_gain:
        t1, t2 = a / peak_x, b / peak_x
    else:
        t1, t2 = a / np.max(np.abs(a)), b / np.max(np.abs(b))
    sr = s1.sample_rate
    mix = AudioClip(x, sr, name=f"{s1.name}+{s2.name}")
    out = []
    for t, src, other in ((t1, s1, s2), (t2, s2, s1)):
        target = AudioClip(t, sr, src.label, name=src.name)
        query = embedder(target) if embedder is not None else None
        out.append(MixtureExample(mix, target, query, (src.label, other.label)))
    return out[0], out[1]


# --------------------------------------------------------------------------
# Model assembly


def build_separator(
    sep_config: SeparatorConfig,
    stft_config: StftConfig,
    mae: MaskedAutoencoder | None = None,
    mel_config: StftConfig | None = None,
    strategy: str = "frozen",
) -> QuerySeparator:
    ssl = None
    if sep_config.fusion:
        if mae is None or mel_config is None:
            raise ValueError("fusion requires an MAE model and its mel config")
        ssl = SslFrontend(mae, mel_config, strategy, stft_config.pad_to_frames)
    return QuerySeparator(sep_config, stft_config, ssl)


def checkpoint_meta(model: QuerySeparator) -> dict:
    meta = separator_meta(model)
    meta["version"] = CHECKPOINT_VERSION
    if model.ssl is not None:
        meta["mae_config"] = asdict(model.ssl.mae.config)
        meta["mel_config"] = asdict(model.ssl.mel_config)
    return meta


def separator_from_meta(meta: dict) -> QuerySeparator:
    if meta.get("kind") != "separator":
        raise numerics.ArchiveError(f"not a separator checkpoint (kind={meta.get('kind')!r})")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise numerics.ArchiveError(
            f"checkpoint version {meta.get('version')} != supported {CHECKPOINT_VERSION}"
        )
    cfg = dict(meta["config"])
    cfg["channels"] = tuple(cfg["channels"])
    sep_cfg = SeparatorConfig(**cfg)
    stft_cfg = StftConfig(**meta["stft_config"])
    mae = mel = None
    if sep_cfg.fusion:
        mae = MaskedAutoencoder(MaeConfig(**meta["mae_config"]))
        mel = StftConfig(**meta["mel_config"])
    return build_separator(sep_cfg, stft_cfg, mae, mel, meta.get("strategy") or "frozen")


def save_model(model: QuerySeparator, path, extra_meta: dict | None = None) -> None:
    meta = checkpoint_meta(model)
    meta.update(extra_meta or {})
    numerics.save_archive(path, numerics.module_arrays(model, "model/"), meta)


def load_model(path) -> QuerySeparator:
    tensors, meta = numerics.load_archive(path)
    model = separator_from_meta(meta)
    numerics.load_module_arrays(model, numerics.named_subset(tensors, "model/"))
    model.eval()
    return model


# --------------------------------------------------------------------------
# Training


class Trainer:
    """Single-writer training loop over a pool of labelled anchor segments."""

    def __init__(self, model: QuerySeparator, tagger: Tagger, anchors: list[AudioClip],
                 config: TrainConfig):
        if not anchors:
            raise ValueError("empty anchor pool")
        labels = {a.label for a in anchors}
        if len(labels) < 2:
            raise ValueError("anchor pool must span at least two classes")
        if model.config.fusion != config.fusion:
            raise ValueError("model fusion flag differs from the training config")
        if model.ssl is not None and model.ssl.strategy != config.strategy:
            raise ValueError("model SSL strategy differs from the training config")
        self.model = model
        self.tagger = tagger
        self.anchors = anchors
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.optimizer = numerics.Adam(model.trainable_parameters(), lr=config.lr)
        self.losses: list[float] = []
        self.skipped = 0
        self._labels = np.array([a.label for a in anchors])
        self._emb_cache: dict[str, np.ndarray] = {}

    @property
    def step_count(self) -> int:
        return self.optimizer.state.step

    def _embed(self, target: AudioClip) -> QueryEmbedding:
        # A peak-normalised target depends only on its anchor, so embeddings are cached.
        # With a shared gain the target also depends on its partner, so nothing is cached.
        vec = None if self.config.shared_gain else self._emb_cache.get(target.name)
        if vec is None:
            vec = embed_waves(torch.from_numpy(target.samples.astype(np.float32))[None],
                              self.tagger)[0].numpy()
            if not self.config.shared_gain:
                self._emb_cache[target.name] = vec
        return QueryEmbedding(vec, f"oracle:{target.name}", target.label)

    def sample_examples(self) -> list[MixtureExample]:
        examples: list[MixtureExample] = []
        while len(examples) < self.config.batch:
            i = int(self.rng.integers(len(self.anchors)))
            others = np.flatnonzero(self._labels != self._labels[i])
            j = int(others[self.rng.integers(len(others))])
            pair = make_mixture(self.anchors[i], self.anchors[j], self._embed,
                                self.config.shared_gain)
            if pair is None:
                self.skipped += 1
                if self.skipped > 100 * max(1, self.step_count + 1):
                    raise RuntimeError("anchor pool is (nearly) all silent")
                continue
            examples.extend(pair)
        return examples[: self.config.batch]

    def loss(self, examples: list[MixtureExample]) -> torch.Tensor:
        x = torch.from_numpy(np.stack([ex.mixture.samples for ex in examples]).astype(np.float32))
        s = torch.from_numpy(np.stack([ex.target.samples for ex in examples]).astype(np.float32))
        e = torch.from_numpy(np.stack([ex.query.vector for ex in examples]))
        est = self.model(x, e)
        return (est - s).abs().mean()

    def step(self) -> float:
        self.model.train()
        loss = self.loss(self.sample_examples())
        value = self.optimizer.step(loss)
        self.losses.append(value)
        return value

    def run(self, steps: int | None = None, log_every: int = 50) -> list[float]:
        steps = self.config.steps if steps is None else steps
        for _ in range(steps):
            self.step()
            if log_every and self.step_count % log_every == 0:
                recent = np.mean(self.losses[-log_every:])
                logger.info("step %d loss %.5f", self.step_count, recent)
        return self.losses

    # -- checkpointing

    def save(self, path) -> None:
        arrays = numerics.module_arrays(self.model, "model/")
        arrays.update(self.optimizer.state.to_arrays("optim"))
        meta = checkpoint_meta(self.model)
        meta.update({
            "train_config": asdict(self.config),
            "optimizer": self.optimizer.state.hyper(),
            "param_names": list(self.optimizer.params),
            "rng_state": self.rng.bit_generator.state,
            "losses": self.losses,
            "skipped": self.skipped,
        })
        numerics.save_archive(path, arrays, meta)

    @classmethod
    def resume(cls, path, tagger: Tagger, anchors: list[AudioClip],
               config: TrainConfig | None = None) -> "Trainer":
        tensors, meta = numerics.load_archive(path)
        model = separator_from_meta(meta)
        numerics.load_module_arrays(model, numerics.named_subset(tensors, "model/"))
        saved = TrainConfig(**meta["train_config"])
        if config is not None:
            for key in ("strategy", "fusion", "shared_gain", "batch"):
                if getattr(config, key) != getattr(saved, key):
                    raise numerics.ArchiveError(
                        f"config mismatch on '{key}': checkpoint {getattr(saved, key)!r}, "
                        f"requested {getattr(config, key)!r}"
                    )
        trainer = cls(model, tagger, anchors, config or saved)
        if list(trainer.optimizer.params) != meta["param_names"]:
            raise numerics.ArchiveError("trainable parameter set differs from checkpoint")
        state = numerics.OptimizerState.from_arrays(meta["optimizer"], tensors, "optim")
        state.lr = trainer.config.lr
        trainer.optimizer.state = state
        trainer.rng.bit_generator.state = meta["rng_state"]
        trainer.losses = list(meta["losses"])
        trainer.skipped = meta["skipped"]
        return trainer


def train(anchors: list[AudioClip], tagger: Tagger, model: QuerySeparator, config: TrainConfig,
          checkpoint: str | Path | None = None) -> Trainer:
    """Run ``config.steps`` steps; optionally persist checkpoint, loss CSV and config."""
    trainer = Trainer(model, tagger, anchors, config)
    trainer.run()
    if checkpoint is not None:
        checkpoint = Path(checkpoint)
        trainer.save(checkpoint)
        write_loss_csv(trainer.losses, checkpoint.with_suffix(".loss.csv"))
        checkpoint.with_suffix(".config.json").write_text(
            json.dumps({"train": asdict(config), **checkpoint_meta(model)}, indent=1,
                       sort_keys=True) + "\n"
        )
    return trainer


def write_loss_csv(losses, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses, start=1):
            w.writerow([i, repr(float(v))])


def smoothed(losses, window: int = 25) -> np.ndarray:
    losses = np.asarray(losses, dtype=np.float64)
    if len(losses) < window:
        return losses
    return np.convolve(losses, np.ones(window) / window, mode="valid")

