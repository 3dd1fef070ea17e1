"""Acceptance criteria, one test per criterion.

Each test carries a ``criterion`` marker; the conftest summary hook prints a
PASS/FAIL line per criterion with the measured values recorded here.
"""

import csv
import json
import time

import numpy as np
import pytest
import torch
from numpy.lib.stride_tricks import sliding_window_view

from usskit import cli, gradchecks, numerics
from usskit.config import RunConfig
from usskit.data import DEFAULT_CLASSES, synthesize_clip
from usskit.dsp import FULL_RATE_STFT, istft, stft
from usskit.evaluation import sdr, sdri
from usskit.query_embed import oracle_embedding
from usskit.sed_anchor import ProbabilityMap, extract_segment, mine_anchor, oracle_sed
from usskit.separator import build_input
from usskit.ssl_mae import MaskedAutoencoder, random_mask
from usskit.train_pipeline import Trainer, TrainConfig, build_separator, energy, make_mixture


# -- signal processing ------------------------------------------------------------


@pytest.mark.criterion("stft_round_trip")
def test_stft_round_trip(record_property):
    rng = np.random.default_rng(0)
    worst, slowest = 0.0, 0.0
    for _ in range(5):
        x = rng.uniform(-1, 1, 64000)
        t0 = time.perf_counter()
        y = istft(stft(x, FULL_RATE_STFT), len(x)).samples
        slowest = max(slowest, time.perf_counter() - t0)
        worst = max(worst, np.linalg.norm(y - x) / np.linalg.norm(x))
    record_property("detail", f"max rel L2 {worst:.2e}, slowest round trip {slowest:.3f} s")
    assert worst < 1e-6
    assert slowest < 1.0


@pytest.mark.criterion("frame_geometry")
def test_frame_geometry(record_property):
    spec = stft(np.random.default_rng(1).uniform(-1, 1, 64000), FULL_RATE_STFT)
    active = int(np.sum(np.any(spec.values != 0, axis=1)))
    fused = build_input(torch.from_numpy(np.abs(spec.values)), torch.zeros(224, 768))
    record_property("detail", f"{active} frames padded to {spec.shape[0]}; fused {tuple(fused.shape)}")
    assert active == 200 and spec.shape == (224, 513)
    assert tuple(fused.shape) == (224, 1281)


# -- MAE masking --------------------------------------------------------------------


@pytest.mark.criterion("mae_mask_exactness")
def test_mae_mask_exactness(record_property):
    rng = np.random.default_rng(2)
    sizes = rng.integers(1, 1025, 100)
    for i, p in enumerate(sizes):
        vis, msk = random_mask(int(p), 0.8, int(rng.integers(2**31)))
        assert len(msk) == int(np.floor(0.8 * p + 0.5)), (p, len(msk))
        assert np.array_equal(np.sort(np.concatenate([vis, msk])), np.arange(p))
        assert len(np.intersect1d(vis, msk)) == 0
    record_property("detail", f"100 draws, P in [{sizes.min()}, {sizes.max()}]")


# -- gradients ----------------------------------------------------------------------


@pytest.mark.criterion("gradient_checks")
def test_gradient_checks(record_property):
    reports, seconds = gradchecks.run_all(seed=0, tolerance=1e-4)
    worst = max(r.max_rel_error for r in reports)
    record_property("detail", f"{len(reports)} fragments, worst rel err {worst:.2e}, {seconds:.1f} s")
    assert all(r.passed for r in reports), gradchecks.format_table(reports)
    assert worst < 1e-4
    assert seconds < 120


# -- mixtures -----------------------------------------------------------------------


@pytest.mark.criterion("mixture_normalisation")
def test_mixture_normalisation_and_energy_matching(anchor_pool, record_property):
    rng = np.random.default_rng(3)
    labels = np.array([a.label for a in anchor_pool])
    worst_mismatch = 0.0
    n = 0
    for _ in range(200):
        i = int(rng.integers(len(anchor_pool)))
        j = int(rng.choice(np.flatnonzero(labels != labels[i])))
        s1, s2 = anchor_pool[i], anchor_pool[j]
        ex1, ex2 = make_mixture(s1, s2)
        for ex in (ex1, ex2):
            assert np.max(np.abs(ex.mixture.samples)) == 1.0
            assert np.max(np.abs(ex.target.samples)) == 1.0
        # a common gain keeps the energy ratio of the matched sources visible
        sh1, sh2 = make_mixture(s1, s2, shared_gain=True)
        e1, e2 = energy(sh1.target.samples), energy(sh2.target.samples)
        worst_mismatch = max(worst_mismatch, abs(e1 - e2) / e1)
        n += 1
    record_property("detail", f"{n} pairs, worst energy mismatch {worst_mismatch:.1e}")
    assert worst_mismatch < 1e-6


# -- anchors ------------------------------------------------------------------------


@pytest.mark.criterion("anchor_mining")
def test_anchor_mining_matches_exhaustive_search(record_property):
    rng = np.random.default_rng(4)
    checked = 0
    for m in range(1000):
        t = int(rng.integers(1, 2001))
        k = int(rng.integers(1, 11))
        probs = rng.random((t, k))
        if m % 2:  # coarse levels make exact ties frequent
            probs = np.round(probs * 4) / 4
        window = min(200, t) if m % 3 else int(rng.integers(1, min(t, 400) + 1))
        pmap = ProbabilityMap(probs)
        sums = sliding_window_view(probs, window, axis=0).sum(axis=-1)  # (starts, K)
        for c in range(k):
            anchor = mine_anchor(pmap, c, window)
            if not np.any(probs[:, c] > 0):
                assert anchor is None
                continue
            assert anchor.start_frame == int(np.argmax(sums[:, c])), (m, c)
            checked += 1
    record_property("detail", f"1000 maps, {checked} class columns, all exact")


# -- metrics ------------------------------------------------------------------------


@pytest.mark.criterion("sdr_closed_forms")
def test_sdr_closed_forms(record_property):
    rng = np.random.default_rng(5)
    s = rng.standard_normal(64000)
    half = sdr(s, 0.5 * s)
    noise = rng.standard_normal(64000)
    noise -= np.dot(noise, s) / np.dot(s, s) * s
    noise *= np.sqrt(0.01 * np.dot(s, s) / np.dot(noise, noise))
    twenty = sdr(s, s + noise)
    x = s + rng.standard_normal(64000)
    record_property("detail", f"half-scale {half:.7f} dB, orthogonal noise {twenty:.12f} dB")
    assert abs(half - 6.0206) <= 1e-6 + 1e-4  # 20 log10 2 = 6.020599913...
    assert abs(half - 20 * np.log10(2)) < 1e-9
    assert abs(twenty - 20.0) < 1e-9
    assert sdri(s, x, x) == 0.0


# -- training contracts ------------------------------------------------------------------


def _desk_fused(strategy):
    cfg = RunConfig.load()
    torch.manual_seed(0)
    mae = MaskedAutoencoder(cfg.mae)
    return build_separator(cfg.separator(True), cfg.stft, mae, cfg.mel, strategy)


@pytest.mark.criterion("frozen_updated_contracts")
def test_frozen_and_updated_contracts(trained_tagger, anchor_pool, record_property):
    tagger_sum = numerics.state_checksum(trained_tagger.model)
    frozen = _desk_fused("frozen")
    enc_before = numerics.state_checksum(frozen.ssl.mae.encoder_parameters())
    Trainer(frozen, trained_tagger.model, anchor_pool,
            TrainConfig(fusion=True, strategy="frozen")).run(10)
    assert numerics.state_checksum(frozen.ssl.mae.encoder_parameters()) == enc_before

    updated = _desk_fused("updated")
    w0 = updated.ssl.layer_weights.weights().detach().clone()
    enc0 = {n: p.detach().clone() for n, p in updated.ssl.mae.encoder_parameters().items()}
    trainer = Trainer(updated, trained_tagger.model, anchor_pool,
                      TrainConfig(fusion=True, strategy="updated"))
    trainer.run(10)
    w = updated.ssl.layer_weights.weights().detach()
    changed = sum(not torch.equal(p, enc0[n])
                  for n, p in updated.ssl.mae.encoder_parameters().items())
    record_property("detail", f"frozen encoder checksum unchanged; updated weights "
                              f"{[round(v, 4) for v in w.tolist()]} (sum {float(w.sum()):.7f}), "
                              f"{changed} encoder tensors changed")
    assert abs(float(w.sum()) - 1.0) < 1e-6
    assert not torch.equal(w, w0)
    assert changed > 0 and all(v > 0 for v in trainer.losses)
    assert numerics.state_checksum(trained_tagger.model) == tagger_sum


@pytest.mark.slow
@pytest.mark.criterion("overfit_sanity")
def test_overfit_four_fixed_mixtures(trained_tagger, record_property):
    """Shared-gain targets: with per-signal peak normalisation the capped
    mask cannot reach the targets (see the decisions log)."""
    anchors = []
    for k in range(4):
        clip = synthesize_clip(DEFAULT_CLASSES[k], k, np.random.default_rng([3, k]), 4.0, 8000)
        anchors.append(extract_segment(clip, mine_anchor(oracle_sed(clip, 6), k)))
    embed = lambda c: oracle_embedding(c, trained_tagger.model)  # noqa: E731
    examples = []
    for i, j in ((0, 1), (2, 3)):
        examples += make_mixture(anchors[i], anchors[j], embed, shared_gain=True)
    x = torch.from_numpy(np.stack([ex.mixture.samples for ex in examples]).astype(np.float32))
    s = torch.from_numpy(np.stack([ex.target.samples for ex in examples]).astype(np.float32))
    e = torch.from_numpy(np.stack([ex.query.vector for ex in examples]))
    cfg = RunConfig.load()
    torch.manual_seed(0)
    model = build_separator(cfg.separator(False), cfg.stft)
    opt = numerics.Adam(model.trainable_parameters(), lr=1e-3)
    model.train()
    t0 = time.perf_counter()
    losses = [opt.step((model(x, e) - s).abs().mean()) for _ in range(500)]
    seconds = time.perf_counter() - t0
    ratio = losses[-1] / losses[0]
    record_property("detail", f"loss {losses[0]:.4f} -> {losses[-1]:.5f} ({100 * ratio:.2f}% of "
                              f"initial) in {seconds:.0f} s")
    assert ratio < 0.10
    assert seconds < 300


# -- end to end -------------------------------------------------------------------------


PIPELINE = ("synth", "pretrain-mae", "train-tagger", "mine-anchors", "build-store", "train",
            "evaluate")


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """The full desk pipeline through the CLI at default settings."""
    wd = tmp_path_factory.mktemp("desk")
    timings = {}
    t0 = time.perf_counter()
    for cmd in PIPELINE:
        start = time.perf_counter()
        code = cli.main([cmd, "--workdir", str(wd)])
        timings[cmd] = time.perf_counter() - start
        assert code == 0, f"{cmd} failed"
    total = time.perf_counter() - t0
    summary = json.loads((wd / "report" / "eval.json").read_text())
    return wd, summary, total, timings


def _class_sdri(path):
    with open(path) as fh:
        return {(r["condition"], r["class_name"]): float(r["sdri_db"]) for r in csv.DictReader(fh)}


@pytest.mark.slow
@pytest.mark.criterion("end_to_end_desk")
def test_end_to_end_desk_experiment(desk_run, record_property):
    wd, summary, total, timings = desk_run
    med = summary["median_class_sdri_db"]
    average = next(c for c in med if c.startswith("average"))
    n_pairs = summary["metadata"]["n_pairs"]
    record_property("detail", f"median class SDRi oracle {med['oracle']:.2f} dB, {average} "
                              f"{med[average]:.2f} dB over {n_pairs} mixtures; "
                              f"pipeline {total / 60:.1f} min "
                              + ", ".join(f"{k} {v:.0f}s" for k, v in timings.items()))
    assert average == "average_N8"
    assert n_pairs >= 60
    assert med["oracle"] > 3.0
    assert med[average] > 1.5
    assert total < 30 * 60


@pytest.mark.slow
@pytest.mark.criterion("fusion_directional_report")
def test_fusion_directional_report(desk_run, record_property):
    """Fusion-off twin run under the same seed; deltas are reported, not asserted."""
    wd = desk_run[0]
    assert cli.main(["train", "--workdir", str(wd), "--fusion", "off", "--name", "nofusion"]) == 0
    assert cli.main(["evaluate", "--workdir", str(wd), "--checkpoint", "nofusion.ckpt",
                     "--report-name", "nofusion"]) == 0
    on = _class_sdri(wd / "report" / "eval.csv")
    off = _class_sdri(wd / "report" / "nofusion.csv")
    assert on.keys() == off.keys()
    lines = []
    for cond, name in sorted(on):
        lines.append(f"{cond}/{name} {on[cond, name] - off[cond, name]:+.2f}")
    deltas = np.array([on[k] - off[k] for k in on])
    record_property("detail", f"fusion on minus off, mean {deltas.mean():+.2f} dB: "
                              + ", ".join(lines))
    (wd / "report" / "fusion_deltas.json").write_text(
        json.dumps({f"{c}/{n}": on[c, n] - off[c, n] for c, n in on}, indent=1) + "\n")
