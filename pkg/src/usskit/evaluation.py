"""SDR / SDRi metrics, evaluation-pair construction and class-wise reports."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .data import AudioClip
from .query_embed import EmbeddingStore, QueryEmbedding
from .train_pipeline import make_mixture

logger = logging.getLogger(__name__)

SDR_CAP_DB = 100.0
REPORT_COLUMNS = ("class_id", "class_name", "condition", "n", "sdr_db", "sdri_db")


def sdr(reference, estimate) -> float:
    """10 log10(|s|² / |s - ŝ|²), capped at +100 dB."""
    s = np.asarray(reference, dtype=np.float64)
    e = np.asarray(estimate, dtype=np.float64)
    if s.shape != e.shape:
        raise ValueError(f"length mismatch: reference {s.shape}, estimate {e.shape}")
    num = float(np.dot(s, s))
    if num == 0.0:
        raise ValueError("reference signal is all zero")
    diff = s - e
    den = float(np.dot(diff, diff))
    if den == 0.0:
        return SDR_CAP_DB
    return min(SDR_CAP_DB, 10.0 * np.log10(num / den))


def sdri(reference, estimate, mixture) -> float:
    return sdr(reference, estimate) - sdr(reference, mixture)


@dataclass
class EvalPair:
    mixture: AudioClip
    target: AudioClip
    class_id: int
    target_index: int
    distractor_index: int


def plan_eval_pairs(labels, per_class: int, seed: int) -> list[tuple[int, int, int]]:
    """(class, target index, distractor index) triples, without materialising audio.

    For every class with anchors, ``per_class`` targets are drawn from that
    class (cycling through a shuffled order) and each gets a distractor from
    a uniformly chosen different class.
    """
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    if len(classes) < 2:
        raise ValueError("evaluation pairs need anchors from at least two classes")
    rng = np.random.default_rng(seed)
    by_class = {k: np.flatnonzero(labels == k) for k in classes}
    plan = []
    for k in classes:
        members = rng.permutation(by_class[k])
        others = [c for c in classes if c != k]
        for i in range(per_class):
            t = int(members[i % len(members)])
            other = others[int(rng.integers(len(others)))]
            d = int(by_class[other][rng.integers(len(by_class[other]))])
            plan.append((k, t, d))
    return plan


def build_eval_pairs(anchors: list[AudioClip], per_class: int, seed: int,
                     class_ids=None) -> list[EvalPair]:
    """Mixtures pairing a target anchor of each class with another class's anchor.

    ``class_ids`` lists classes to evaluate; classes without anchors are
    logged and skipped.
    """
    labels = [a.label for a in anchors]
    present = set(labels)
    if class_ids is not None:
        for k in class_ids:
            if k not in present:
                logger.warning("class %s has no anchors; skipped", k)
    pairs = []
    for k, t, d in plan_eval_pairs(labels, per_class, seed):
        if class_ids is not None and k not in class_ids:
            continue
        mixed = make_mixture(anchors[t], anchors[d])
        if mixed is None:
            continue
        ex = mixed[0]
        pairs.append(EvalPair(ex.mixture, ex.target, k, t, d))
    return pairs


class ModelBundle(Protocol):
    def separate(self, mixture: AudioClip, query: QueryEmbedding) -> np.ndarray: ...

    def embed(self, clip: AudioClip) -> QueryEmbedding: ...


@dataclass
class ReportRow:
    class_id: int
    class_name: str
    condition: str
    n: int
    sdr_db: float
    sdri_db: float


@dataclass
class EvalReport:
    rows: list[ReportRow]
    metadata: dict = field(default_factory=dict)

    def conditions(self) -> list[str]:
        return sorted({r.condition for r in self.rows})

    def global_means(self) -> dict[str, dict[str, float]]:
        out = {}
        for cond in self.conditions():
            rows = [r for r in self.rows if r.condition == cond]
            n = sum(r.n for r in rows)
            out[cond] = {
                "n": n,
                "sdr_db": sum(r.sdr_db * r.n for r in rows) / n,
                "sdri_db": sum(r.sdri_db * r.n for r in rows) / n,
            }
        return out

    def median_class_sdri(self, condition: str) -> float:
        return float(np.median([r.sdri_db for r in self.rows if r.condition == condition]))

    def merge(self, other: "EvalReport") -> "EvalReport":
        meta = {**self.metadata, **other.metadata}
        return EvalReport(self.rows + other.rows, meta)

    def summary(self) -> dict:
        g = self.global_means()
        out = {"metadata": self.metadata, "global": g,
               "median_class_sdri_db": {c: self.median_class_sdri(c) for c in self.conditions()}}
        oracle = [c for c in g if c == "oracle"]
        average = [c for c in g if c.startswith("average")]
        if oracle and average:
            # reported for inspection only
            out["comparison"] = {
                a: {"oracle_minus_average_sdri_db": g["oracle"]["sdri_db"] - g[a]["sdri_db"]}
                for a in average
            }
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in sorted(self.rows, key=lambda r: (r.condition, r.class_id)):
            w.writerow([r.class_id, r.class_name, r.condition, r.n,
                        f"{r.sdr_db:.6f}", f"{r.sdri_db:.6f}"])
        return buf.getvalue()

    def write(self, csv_path, json_path) -> None:
        Path(csv_path).write_text(self.to_csv())
        Path(json_path).write_text(json.dumps(self.summary(), indent=1, sort_keys=True) + "\n")


def condition_name(mode: str, n: int | None = None) -> str:
    if mode == "oracle":
        return "oracle"
    if mode == "average":
        return f"average_N{n}" if n is not None else "average"
    raise ValueError(f"unknown embedding mode {mode!r}")


def evaluate(bundle: ModelBundle, pairs: list[EvalPair], mode: str = "oracle",
             store: EmbeddingStore | None = None, class_names: dict | None = None,
             metadata: dict | None = None) -> EvalReport:
    """Separate every pair under one embedding condition and aggregate by class."""
    if mode == "average" and store is None:
        raise ValueError("average-embedding evaluation requires an embedding store (run build-store)")
    if mode not in ("oracle", "average"):
        raise ValueError(f"unknown embedding mode {mode!r}")
    class_names = class_names or (store.class_names if store is not None else {})
    per_class: dict[int, list[tuple[float, float]]] = {}
    n_avg = None
    for pair in pairs:
        if mode == "oracle":
            query = bundle.embed(pair.target)
        else:
            if pair.class_id not in store.average:
                raise KeyError(f"store has no average embedding for class {pair.class_id}")
            query = store.average[pair.class_id]
            n_avg = int(query.provenance.rsplit(":", 1)[-1])
        est = bundle.separate(pair.mixture, query)
        s = sdr(pair.target.samples, est)
        si = s - sdr(pair.target.samples, pair.mixture.samples)
        per_class.setdefault(pair.class_id, []).append((s, si))
    cond = condition_name(mode, n_avg)
    rows = [
        ReportRow(k, class_names.get(k, str(k)), cond, len(v),
                  float(np.mean([a for a, _ in v])), float(np.mean([b for _, b in v])))
        for k, v in sorted(per_class.items())
    ]
    return EvalReport(rows, dict(metadata or {}))
