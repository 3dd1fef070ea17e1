"""Flat, prefixed run configuration shared by every CLI stage."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .dsp import StftConfig
from .query_embed import TaggerConfig
from .sed_anchor import ANCHOR_FRAMES, DEFAULT_FRAME_RATE
from .separator import SeparatorConfig
from .ssl_mae import MaeConfig
from .train_pipeline import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, object] = {
    "seed": 0,
    # synthetic corpus
    "corpus.n_classes": 6,
    "corpus.sample_rate": 32000,
    "corpus.clip_len_s": 10.0,
    "corpus.train_per_class": 16,
    "corpus.store_per_class": 8,
    "corpus.eval_per_class": 6,
    "corpus.format": "pcm16",
    # separator front-end; hop keeps 100 frames/s
    "stft.sample_rate": 8000,
    "stft.window_size": 256,
    "stft.hop_size": 80,
    "stft.pad_to_frames": 224,
    # log-mel front-end shared by the tagger and the MAE
    "mel.window_size": 512,
    "mel.hop_size": 80,
    "mel.n_mels": 64,
    "mae.patch_time": 16,
    "mae.patch_mel": 16,
    "mae.embed_dim": 64,
    "mae.encoder_layers": 3,
    "mae.decoder_layers": 2,
    "mae.decoder_dim": 64,
    "mae.heads": 4,
    "mae.mask_ratio": 0.8,
    "mae.pooled_len": 32,
    "mae.steps": 400,
    "mae.batch": 8,
    "mae.lr": 1e-3,
    "tagger.channels": [16, 32, 64, 128],
    "tagger.embed_dim": 128,
    "tagger.epochs": 30,
    "tagger.batch": 16,
    "tagger.lr": 3e-3,
    "sep.encoder_blocks": 4,
    "sep.channels": [8, 16, 32, 64],
    "sep.magnitude_cap": 2.0,
    "sep.log_compress": True,
    "train.steps": 600,
    "train.batch": 4,
    "train.lr": 1e-3,
    "train.strategy": "frozen",
    "train.fusion": True,
    "train.shared_gain": False,
    "eval.per_class": 10,
    "eval.n_average": 8,
}


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(default, list):
        if isinstance(value, str):
            value = [v for v in value.replace("(", "").replace(")", "").split(",") if v]
        return [type(default[0])(v) for v in value]
    if isinstance(default, (int, float)) and not isinstance(value, (int, float)):
        try:
            return type(default)(value)
        except ValueError:
            raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}") from None
    if isinstance(default, int) and isinstance(value, float):
        if value != int(value):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        values = dict(DEFAULTS)
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            try:
                loaded = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
            values.update(cls._typed(loaded))
        values.update(cls._typed(overrides or {}))
        cfg = cls(values)
        cfg.validate()
        return cfg

    @staticmethod
    def _typed(raw: dict) -> dict:
        out = {}
        for key, value in raw.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            out[key] = _coerce(key, value, DEFAULTS[key])
        return out

    def to_json(self) -> str:
        return json.dumps(self.values, indent=1, sort_keys=True) + "\n"

    # -- derived module configs

    @property
    def stft(self) -> StftConfig:
        v = self.values
        return StftConfig(v["stft.window_size"], v["stft.hop_size"], v["stft.sample_rate"],
                          v["stft.pad_to_frames"])

    @property
    def mel(self) -> StftConfig:
        v = self.values
        return StftConfig(v["mel.window_size"], v["mel.hop_size"], v["stft.sample_rate"])

    @property
    def segment_samples(self) -> int:
        return int(round(ANCHOR_FRAMES / DEFAULT_FRAME_RATE * self["stft.sample_rate"]))

    @property
    def mae(self) -> MaeConfig:
        v = self.values
        return MaeConfig(
            patch_time=v["mae.patch_time"], patch_mel=v["mae.patch_mel"], n_mels=v["mel.n_mels"],
            embed_dim=v["mae.embed_dim"], encoder_layers=v["mae.encoder_layers"],
            decoder_layers=v["mae.decoder_layers"], decoder_dim=v["mae.decoder_dim"],
            heads=v["mae.heads"], mask_ratio=v["mae.mask_ratio"], pooled_len=v["mae.pooled_len"],
        )

    @property
    def tagger(self) -> TaggerConfig:
        v = self.values
        return TaggerConfig(
            sample_rate=v["stft.sample_rate"], clip_samples=self.segment_samples,
            window_size=v["mel.window_size"], hop_size=v["mel.hop_size"], n_mels=v["mel.n_mels"],
            channels=tuple(v["tagger.channels"]), embed_dim=v["tagger.embed_dim"],
            lr=v["tagger.lr"], batch=v["tagger.batch"], seed=v["seed"],
        )

    def separator(self, fusion: bool | None = None) -> SeparatorConfig:
        v = self.values
        fusion = v["train.fusion"] if fusion is None else fusion
        return SeparatorConfig(
            encoder_blocks=v["sep.encoder_blocks"], channels=tuple(v["sep.channels"]),
            stft_bins=self.stft.n_bins, ssl_dim=v["mae.embed_dim"] if fusion else 0,
            embed_dim=v["tagger.embed_dim"], magnitude_cap=v["sep.magnitude_cap"],
            log_compress=v["sep.log_compress"],
        )

    @property
    def train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(lr=v["train.lr"], batch=v["train.batch"], steps=v["train.steps"],
                           seed=v["seed"], strategy=v["train.strategy"], fusion=v["train.fusion"],
                           shared_gain=v["train.shared_gain"])

    def validate(self) -> None:
        """Cross-module consistency; raises ConfigError before any work starts."""
        v = self.values
        try:
            stft, mel, mae = self.stft, self.mel, self.mae
            self.separator()
            self.train
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        rate = v["stft.sample_rate"]
        if rate / stft.hop_size != DEFAULT_FRAME_RATE:
            raise ConfigError(
                f"stft.hop_size must give {DEFAULT_FRAME_RATE:g} frames/s at {rate} Hz"
            )
        if rate / mel.hop_size != DEFAULT_FRAME_RATE:
            raise ConfigError(f"mel.hop_size must give {DEFAULT_FRAME_RATE:g} frames/s")
        if stft.pad_to_frames < ANCHOR_FRAMES:
            raise ConfigError(f"stft.pad_to_frames must be >= {ANCHOR_FRAMES}")
        if mel.n_bins < mae.n_mels:
            raise ConfigError(f"mel.n_mels={mae.n_mels} exceeds {mel.n_bins} mel-STFT bins")
        if v["corpus.sample_rate"] % rate and rate % v["corpus.sample_rate"]:
            raise ConfigError("corpus and pipeline rates must be integer multiples")
        if v["corpus.n_classes"] < 2:
            raise ConfigError("corpus.n_classes must be >= 2")
        if v["corpus.clip_len_s"] < 2.0:
            raise ConfigError("corpus.clip_len_s must be >= 2")
        n_tokens = mae.grid_dims(ANCHOR_FRAMES)[0] * mae.grid_dims(ANCHOR_FRAMES)[1]
        if mae.pooled_len > n_tokens:
            raise ConfigError(f"mae.pooled_len={mae.pooled_len} exceeds {n_tokens} SSL tokens")
        if mae.pooled_len > stft.pad_to_frames:
            raise ConfigError("mae.pooled_len exceeds stft.pad_to_frames")
        if v["eval.n_average"] < 1 or v["eval.n_average"] > v["corpus.store_per_class"]:
            raise ConfigError("eval.n_average must lie in [1, corpus.store_per_class]")
