"""Pipeline stages operating on a work directory.

Layout under the work directory::

    run_config.json
    corpus/{train,store,eval}/manifest.jsonl  (+ class folders of WAVs)
    anchors/{train,store,eval}.jsonl
    mae.ckpt  tagger.ckpt  store.ckpt  store.json
    separator.ckpt  separator.loss.csv  separator.config.json
    report/eval.csv  report/eval.json
"""

from __future__ import annotations

import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import numerics
from .config import RunConfig
from .data import (DEFAULT_CLASSES, AudioClip, Manifest, load_clip, read_wav, resample,
                   synthesize_corpus, write_wav)
from .dsp import log_mel_tensor
from .evaluation import EvalReport, build_eval_pairs, evaluate
from .query_embed import (EmbeddingStore, QueryEmbedding, Tagger, average_embedding, load_tagger,
                          oracle_embedding, save_tagger, train_tagger)
from .sed_anchor import ANCHOR_FRAMES, extract_segment, load_anchors, mine_anchor, oracle_sed, save_anchors
from .separator import QuerySeparator, separate
from .ssl_mae import MaeConfig, MaskedAutoencoder, mae_pretrain_step
from .train_pipeline import Trainer, build_separator, load_model, train

logger = logging.getLogger(__name__)

SPLITS = ("train", "store", "eval")


class MissingInput(FileNotFoundError):
    pass


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingInput(f"{path} not found; run '{producer}' first")
    return path


def manifest_path(workdir: Path, split: str) -> Path:
    return workdir / "corpus" / split / "manifest.jsonl"


# --------------------------------------------------------------------------
# synth


def stage_synth(workdir: Path, cfg: RunConfig) -> dict[str, Manifest]:
    classes = DEFAULT_CLASSES[: cfg["corpus.n_classes"]]
    if len(classes) < cfg["corpus.n_classes"]:
        raise ValueError(f"only {len(DEFAULT_CLASSES)} synthetic classes are defined")
    out = {}
    for i, split in enumerate(SPLITS):
        out[split] = synthesize_corpus(
            classes, cfg[f"corpus.{split}_per_class"], cfg["corpus.clip_len_s"],
            seed=cfg["seed"] * 10 + i, out_dir=workdir / "corpus" / split,
            sample_rate=cfg["corpus.sample_rate"], fmt=cfg["corpus.format"],
        )
    return out


def load_split(workdir: Path, split: str) -> Manifest:
    return Manifest.load(_require(manifest_path(workdir, split), "synth"))


def load_split_clips(workdir: Path, split: str, rate: int) -> list[AudioClip]:
    man = load_split(workdir, split)
    return [resample(load_clip(man, r), rate) for r in man]


# --------------------------------------------------------------------------
# pretrain-mae


def pretrain_mae(clips: list[AudioClip], cfg: RunConfig, log_every: int = 50):
    """Masked-reconstruction pretraining on random 2 s crops; returns (model, losses)."""
    mae_cfg, mel_cfg = cfg.mae, cfg.mel
    n = cfg.segment_samples
    rng = np.random.default_rng([cfg["seed"], 2])
    torch.manual_seed(cfg["seed"])

    def crops(k):
        out = []
        for _ in range(k):
            c = clips[int(rng.integers(len(clips)))]
            start = int(rng.integers(0, len(c) - n + 1))
            out.append(c.samples[start : start + n])
        return torch.from_numpy(np.stack(out).astype(np.float32))

    model = MaskedAutoencoder(mae_cfg)
    with torch.no_grad():
        lm = log_mel_tensor(crops(64), mel_cfg, mae_cfg.n_mels)
        model.norm_mean.fill_(float(lm.mean()))
        model.norm_std.fill_(float(lm.std()))
    opt = numerics.Adam(numerics.trainable(model), lr=cfg["mae.lr"])
    losses = []
    for step in range(cfg["mae.steps"]):
        batch = model.standardize(log_mel_tensor(crops(cfg["mae.batch"]), mel_cfg, mae_cfg.n_mels))
        losses.append(mae_pretrain_step(batch, model, opt, rng))
        if log_every and (step + 1) % log_every == 0:
            logger.info("mae step %d loss %.4f", step + 1, np.mean(losses[-log_every:]))
    model.eval()
    return model, losses


def save_mae(model: MaskedAutoencoder, cfg: RunConfig, losses, path: Path) -> None:
    meta = {"kind": "mae", "mae_config": asdict(model.config), "mel_config": asdict(cfg.mel),
            "losses": [float(x) for x in losses]}
    numerics.save_archive(path, numerics.module_arrays(model), meta)


def load_mae(path: Path) -> MaskedAutoencoder:
    tensors, meta = numerics.load_archive(path)
    if meta.get("kind") != "mae":
        raise numerics.ArchiveError(f"{path}: not an MAE checkpoint")
    model = MaskedAutoencoder(MaeConfig(**meta["mae_config"]))
    numerics.load_module_arrays(model, tensors)
    model.eval()
    return model


def stage_pretrain_mae(workdir: Path, cfg: RunConfig) -> Path:
    clips = load_split_clips(workdir, "train", cfg["stft.sample_rate"])
    model, losses = pretrain_mae(clips, cfg)
    path = workdir / "mae.ckpt"
    save_mae(model, cfg, losses, path)
    return path


# --------------------------------------------------------------------------
# train-tagger


def stage_train_tagger(workdir: Path, cfg: RunConfig) -> tuple[Path, float]:
    result = train_tagger(load_split(workdir, "train"), cfg["tagger.epochs"], cfg.tagger)
    path = workdir / "tagger.ckpt"
    save_tagger(result, path)
    logger.info("tagger held-out accuracy %.3f", result.accuracy)
    return path, result.accuracy


# --------------------------------------------------------------------------
# mine-anchors


def stage_mine_anchors(workdir: Path, cfg: RunConfig) -> dict[str, Path]:
    out = {}
    for split in SPLITS:
        man = load_split(workdir, split)
        anchors = []
        for rec in man:
            clip = load_clip(man, rec)
            pmap = oracle_sed(clip, man.n_classes)
            if pmap.n_frames < ANCHOR_FRAMES:
                continue
            a = mine_anchor(pmap, rec.class_id, ANCHOR_FRAMES, clip_path=rec.path)
            if a is None:
                logger.warning("no anchor in %s; skipped", rec.path)
                continue
            anchors.append(a)
        path = workdir / "anchors" / f"{split}.jsonl"
        save_anchors(anchors, path)
        out[split] = path
    return out


def load_anchor_segments(workdir: Path, split: str, rate: int) -> list[AudioClip]:
    """Anchor windows of one split as labelled clips at the pipeline rate."""
    man = load_split(workdir, split)
    anchors = load_anchors(_require(workdir / "anchors" / f"{split}.jsonl", "mine-anchors"))
    by_path = {r.path: r for r in man}
    segments = []
    for a in anchors:
        rec = by_path.get(a.clip_path)
        if rec is None:
            raise MissingInput(f"anchor refers to {a.clip_path}, absent from the {split} manifest")
        seg = extract_segment(load_clip(man, rec), a)
        segments.append(resample(seg, rate))
    return segments


# --------------------------------------------------------------------------
# build-store


def store_paths(workdir: Path) -> tuple[Path, Path]:
    return workdir / "store.ckpt", workdir / "store.json"


def stage_build_store(workdir: Path, cfg: RunConfig) -> EmbeddingStore:
    tagger = load_tagger(_require(workdir / "tagger.ckpt", "train-tagger"))
    segments = load_anchor_segments(workdir, "store", cfg["stft.sample_rate"])
    man = load_split(workdir, "store")
    store = EmbeddingStore(class_names=man.class_names())
    n = cfg["eval.n_average"]
    for k in sorted({s.label for s in segments}):
        members = [_peak_normalised(s) for s in segments if s.label == k]
        for s in members:
            store.add_oracle(s.name, oracle_embedding(s, tagger))
        store.add_average(average_embedding(members[:n], tagger, k))
    store.save(*store_paths(workdir))
    return store


def _peak_normalised(clip: AudioClip) -> AudioClip:
    peak = clip.peak()
    samples = clip.samples / peak if peak > 0 else clip.samples
    return AudioClip(samples, clip.sample_rate, clip.label, name=clip.name)


# --------------------------------------------------------------------------
# train


def make_model(workdir: Path, cfg: RunConfig, fusion: bool | None = None,
               strategy: str | None = None) -> QuerySeparator:
    fusion = cfg["train.fusion"] if fusion is None else fusion
    strategy = strategy or cfg["train.strategy"]
    torch.manual_seed(cfg["seed"])
    mae = None
    if fusion:
        mae = load_mae(_require(workdir / "mae.ckpt", "pretrain-mae"))
    return build_separator(cfg.separator(fusion), cfg.stft, mae, cfg.mel, strategy)


def stage_train(workdir: Path, cfg: RunConfig, name: str = "separator",
                fusion: bool | None = None) -> Trainer:
    tcfg = cfg.train
    if fusion is not None:
        tcfg.fusion = fusion
    tagger = load_tagger(_require(workdir / "tagger.ckpt", "train-tagger"))
    anchors = load_anchor_segments(workdir, "train", cfg["stft.sample_rate"])
    model = make_model(workdir, cfg, tcfg.fusion, tcfg.strategy)
    return train(anchors, tagger, model, tcfg, workdir / f"{name}.ckpt")


# --------------------------------------------------------------------------
# separate / evaluate


class TrainedBundle:
    """Adapter exposing ``separate`` and ``embed`` for evaluation."""

    def __init__(self, model: QuerySeparator, tagger: Tagger):
        self.model = model
        self.tagger = tagger

    def separate(self, mixture: AudioClip, query: QueryEmbedding) -> np.ndarray:
        return separate(mixture, query, self.model).samples

    def embed(self, clip: AudioClip) -> QueryEmbedding:
        return oracle_embedding(clip, self.tagger)


def stage_separate(workdir: Path, cfg: RunConfig, mixture: Path, out: Path,
                   query_class: str | None = None, query_wav: Path | None = None,
                   checkpoint: str = "separator.ckpt") -> Path:
    if (query_class is None) == (query_wav is None):
        raise ValueError("give exactly one of --query-class or --query-wav")
    rate = cfg["stft.sample_rate"]
    if query_class is not None:
        archive, index = store_paths(workdir)
        if not archive.exists() or not index.exists():
            raise MissingInput(f"{archive} not found; run 'build-store' first")
        model = load_model(_require(workdir / checkpoint, "train"))
        store = EmbeddingStore.load(archive, index)
        k = store.class_id(query_class)
        if k not in store.average:
            raise KeyError(f"store has no average embedding for class {query_class!r}")
        query = store.average[k]
    else:
        model = load_model(_require(workdir / checkpoint, "train"))
        tagger = load_tagger(_require(workdir / "tagger.ckpt", "train-tagger"))
        ref = _fit_length(resample(read_wav(query_wav), rate), cfg.segment_samples)
        query = oracle_embedding(_peak_normalised(ref), tagger)
    mix = resample(read_wav(mixture), rate)
    est = separate(mix, query, model)
    write_wav(est, out, "float32")
    return out


def _fit_length(clip: AudioClip, n: int) -> AudioClip:
    s = clip.samples[:n]
    if len(s) < n:
        s = np.pad(s, (0, n - len(s)))
    return AudioClip(s, clip.sample_rate, clip.label, name=clip.name)


def stage_evaluate(workdir: Path, cfg: RunConfig, checkpoint: str = "separator.ckpt",
                   report_name: str = "eval") -> EvalReport:
    model = load_model(_require(workdir / checkpoint, "train"))
    tagger = load_tagger(_require(workdir / "tagger.ckpt", "train-tagger"))
    archive, index = store_paths(workdir)
    if not archive.exists():
        raise MissingInput(f"{archive} not found; run 'build-store' first")
    store = EmbeddingStore.load(archive, index)
    segments = load_anchor_segments(workdir, "eval", cfg["stft.sample_rate"])
    pairs = build_eval_pairs(segments, cfg["eval.per_class"], cfg["seed"])
    bundle = TrainedBundle(model, tagger)
    meta = {"checkpoint": checkpoint, "fusion": model.config.fusion, "strategy": model.strategy,
            "n_pairs": len(pairs)}
    report = evaluate(bundle, pairs, "oracle", store, metadata=meta)
    report = report.merge(evaluate(bundle, pairs, "average", store, metadata=meta))
    out = workdir / "report"
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / f"{report_name}.csv", out / f"{report_name}.json")
    return report
