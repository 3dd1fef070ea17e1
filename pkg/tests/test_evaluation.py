import csv
import io
import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from usskit.data import AudioClip
from usskit.evaluation import (REPORT_COLUMNS, EvalReport, ReportRow, build_eval_pairs, evaluate,
                               plan_eval_pairs, sdr, sdri)
from usskit.query_embed import EmbeddingStore, QueryEmbedding
from usskit.train_pipeline import make_mixture


def _orthogonal_noise(s, ratio, seed):
    n = np.random.default_rng(seed).standard_normal(s.shape)
    n -= np.dot(n, s) / np.dot(s, s) * s
    return n * np.sqrt(ratio * np.dot(s, s) / np.dot(n, n))


# -- metrics -----------------------------------------------------------------------


def test_sdr_closed_forms():
    s = np.random.default_rng(0).standard_normal(16000)
    assert sdr(s, s) == 100.0
    assert sdr(s, 0.5 * s) == pytest.approx(20 * np.log10(2), abs=1e-12)
    assert abs(sdr(s, 0.5 * s) - 6.0206) < 1e-4
    assert abs(sdr(s, s + _orthogonal_noise(s, 0.01, 1)) - 20.0) < 1e-9


@settings(max_examples=100, deadline=None)
@given(a=st.floats(-5, 5).filter(lambda v: abs(v - 1) > 1e-3), seed=st.integers(0, 1000))
def test_sdr_of_scaled_reference(a, seed):
    s = np.random.default_rng(seed).standard_normal(500)
    assert sdr(s, a * s) == pytest.approx(10 * np.log10(1 / (1 - a) ** 2), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_sdri_is_difference_of_two_sdrs(seed):
    rng = np.random.default_rng(seed)
    s, est, x = rng.standard_normal((3, 300))
    assert sdri(s, est, x) == sdr(s, est) - sdr(s, x)
    assert sdri(s, x, x) == 0.0
    assert sdri(s, s, x) == 100.0 - sdr(s, x)


def test_sdr_preconditions():
    with pytest.raises(ValueError, match="zero"):
        sdr(np.zeros(10), np.ones(10))
    with pytest.raises(ValueError, match="length"):
        sdr(np.ones(10), np.ones(11))


# -- pairs --------------------------------------------------------------------------


def _anchors(n_classes, per_class, seed=0):
    rng = np.random.default_rng(seed)
    return [AudioClip(rng.uniform(-1, 1, 800), 8000, k, name=f"c{k}_{i}")
            for k in range(n_classes) for i in range(per_class)]


def test_pair_counts_and_determinism():
    anchors = _anchors(4, 3)
    pairs = build_eval_pairs(anchors, 10, seed=5)
    assert len(pairs) == 40
    assert [p.class_id for p in pairs] == sorted(k for k in range(4) for _ in range(10))
    again = build_eval_pairs(anchors, 10, seed=5)
    assert [(p.target_index, p.distractor_index) for p in pairs] == \
        [(p.target_index, p.distractor_index) for p in again]
    assert all(np.array_equal(a.mixture.samples, b.mixture.samples) for a, b in zip(pairs, again))


def test_pairs_use_the_training_mixture_procedure():
    anchors = _anchors(3, 2)
    for p in build_eval_pairs(anchors, 4, seed=1):
        assert anchors[p.target_index].label == p.class_id != anchors[p.distractor_index].label
        ex = make_mixture(anchors[p.target_index], anchors[p.distractor_index])[0]
        assert np.array_equal(ex.mixture.samples, p.mixture.samples)
        assert np.array_equal(ex.target.samples, p.target.samples)


def test_full_scale_plan_shape():
    labels = np.repeat(np.arange(527), 2)
    plan = plan_eval_pairs(labels, 100, seed=0)
    assert len(plan) == 52_700
    assert all(labels[t] == k and labels[d] != k for k, t, d in plan[::997])


def test_class_without_anchors_is_skipped(caplog):
    with caplog.at_level(logging.WARNING):
        pairs = build_eval_pairs(_anchors(3, 2), 2, seed=0, class_ids=[0, 2, 7])
    assert {p.class_id for p in pairs} == {0, 2}
    assert "class 7 has no anchors" in caplog.text
    with pytest.raises(ValueError):
        build_eval_pairs(_anchors(1, 3), 2, seed=0)


# -- evaluation with stub models ---------------------------------------------------


class IdealStub:
    def __init__(self, pairs):
        self.truth = {id(p.mixture): p.target.samples for p in pairs}

    def separate(self, mixture, query):
        return self.truth[id(mixture)]

    def embed(self, clip):
        return QueryEmbedding(np.ones(2), "stub", clip.label)


class PassthroughStub(IdealStub):
    def separate(self, mixture, query):
        return mixture.samples


def test_ideal_stub_hits_cap():
    pairs = build_eval_pairs(_anchors(3, 2), 4, seed=2)
    report = evaluate(IdealStub(pairs), pairs)
    for row in report.rows:
        mix_sdr = np.mean([sdr(p.target.samples, p.mixture.samples)
                           for p in pairs if p.class_id == row.class_id])
        assert row.sdr_db == 100.0
        assert row.sdri_db == pytest.approx(100.0 - mix_sdr, abs=1e-9)


def test_passthrough_stub_has_zero_improvement():
    pairs = build_eval_pairs(_anchors(3, 2), 4, seed=3)
    report = evaluate(PassthroughStub(pairs), pairs)
    assert all(r.sdri_db == 0.0 for r in report.rows)
    assert {r.n for r in report.rows} == {4}


def test_average_mode_needs_a_store():
    pairs = build_eval_pairs(_anchors(2, 2), 2, seed=0)
    with pytest.raises(ValueError, match="build-store"):
        evaluate(PassthroughStub(pairs), pairs, mode="average")
    store = EmbeddingStore(class_names={0: "a", 1: "b"})
    for k in (0, 1):
        store.add_average(QueryEmbedding(np.full(2, k), f"average:{k}:8", k))
    report = evaluate(PassthroughStub(pairs), pairs, mode="average", store=store)
    assert report.conditions() == ["average_N8"]
    assert [r.class_name for r in report.rows] == ["a", "b"]


# -- report -------------------------------------------------------------------------


def _report():
    rows = [ReportRow(0, "a", "oracle", 3, 5.0, 4.0), ReportRow(1, "b", "oracle", 7, 1.0, -2.0),
            ReportRow(0, "a", "average_N8", 2, 2.0, 1.5), ReportRow(1, "b", "average_N8", 5, 0.5, 0.25)]
    return EvalReport(rows, {"fusion": True})


def test_global_means_recompute_from_rows():
    report = _report()
    g = report.global_means()
    for cond in report.conditions():
        rows = [r for r in report.rows if r.condition == cond]
        n = sum(r.n for r in rows)
        assert g[cond]["n"] == n
        assert abs(g[cond]["sdri_db"] - sum(r.n * r.sdri_db for r in rows) / n) < 1e-9
    assert g["oracle"]["sdri_db"] == pytest.approx((3 * 4.0 - 7 * 2.0) / 10)


def test_report_files(tmp_path):
    report = _report()
    report.write(tmp_path / "r.csv", tmp_path / "r.json")
    rows = list(csv.reader(io.StringIO((tmp_path / "r.csv").read_text())))
    assert tuple(rows[0]) == REPORT_COLUMNS and len(rows) == 5
    summary = json.loads((tmp_path / "r.json").read_text())
    assert summary["median_class_sdri_db"]["oracle"] == 1.0
    assert "oracle_minus_average_sdri_db" in summary["comparison"]["average_N8"]
    assert summary["metadata"] == {"fusion": True}
