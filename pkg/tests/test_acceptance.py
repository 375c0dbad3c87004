"""Acceptance gate: ten criteria, one PASS/FAIL line each.

Run under pytest (lines appear in the terminal summary) or directly with
``python3 tests/test_acceptance.py``.
"""
import functools
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from stackalign.alignment import (YMS_ACTIONS, GoldAlignment, derive_oracle_actions, execute, state_to_alignment,
                                  text_iou, video_accuracy)
from stackalign.data import GeneratorConfig, apply_standardizer, generate, split_dataset
from stackalign.diagnostics import summarize
from stackalign.gradcheck import run_suite
from stackalign.model import make_batch
from stackalign.normalization import SbnState, sbn_forward
from stackalign.optim import LrSchedule, schedule_epoch_end, warmup_lr
from stackalign.projection import rp_apply, rp_new
from stackalign.tensorcore import Rng
from stackalign.train import Trainer, evaluate, prepare, run_config_from_flat

RESULTS = {}
SEEDS = (0, 1, 2)
EPOCHS = 100
TOY = {"model.projected_dim": 64, "model.stack_hidden": 64, "model.fc_hidden": 64}


def report(number, title, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2} {title}: {detail}"
    RESULTS[number] = line
    print(line)
    return passed


@functools.lru_cache(maxsize=None)
def toy_data():
    train, val, test = split_dataset(generate(GeneratorConfig(seed=0)), [200, 40, 40])
    return train, val, test


@functools.lru_cache(maxsize=None)
def toy_run(preset, seed):
    train, val, _ = toy_data()
    cfg = run_config_from_flat(dict(TOY, preset=preset, seed=seed, epochs=EPOCHS, eval_every=10))
    t0 = time.perf_counter()
    trainer = Trainer(cfg, train, val)
    trainer.run()
    return trainer, time.perf_counter() - t0


def final_features(trainer):
    rows = trainer.diag.feature_stats
    last = max(r[0] for r in rows)
    return {(r[1], r[2]): (r[3], r[4]) for r in rows if r[0] == last}


# ---------------------------------------------------------------- criteria

def test_01_gradient_correctness():
    t0 = time.perf_counter()
    results = run_suite("all", seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(r.worst for r in results)
    ok = all(r.passed for r in results) and worst < 1e-4 and elapsed < 120
    ops = ", ".join(f"{r.op}={r.worst:.1e}" for r in results)
    assert report(1, "gradient check", ok, f"worst {worst:.2e} < 1e-4 in {elapsed:.1f}s ({ops})")


def test_02_lars_law():
    train, val, _ = toy_data()
    cfg = run_config_from_flat(dict(TOY, preset="rp+lars+sbn", batch_size=32, epochs=1))
    trainer = Trainer(cfg, train[:64], [])
    worst_mag = worst_cos = 0.0
    checked = steps = 0
    before = {}

    def snapshot():
        before.clear()
        before.update({p.name: p.value.copy() for p in trainer.model.params() if p.lars_enabled})

    def hook(opt):
        nonlocal worst_mag, worst_cos, checked, steps
        steps += 1
        for p in opt.params:
            if not p.lars_enabled:
                continue
            w, d, delta = before[p.name], opt.last_directions[p.name], opt.last_deltas[p.name]
            if np.linalg.norm(w) <= opt.lars.weight_norm_floor or not d.any():
                continue
            np.testing.assert_array_equal(w - delta, p.value)
            mag = np.linalg.norm(delta) / (opt.lr * np.linalg.norm(w))
            cos = delta.ravel() @ d.ravel() / (np.linalg.norm(delta) * np.linalg.norm(d))
            worst_mag = max(worst_mag, abs(mag - 1))
            worst_cos = max(worst_cos, 1 - cos)
            checked += 1
        snapshot()

    trainer.update_hook = hook
    snapshot()
    while steps < 50:
        trainer.train_epoch(trainer.epoch + 1)
        trainer.epoch += 1
    ok = worst_mag <= 1e-9 and worst_cos <= 1e-12 and checked > 0
    assert report(2, "LARS law", ok, f"{steps} steps, {checked} updates; max | |dw|/(lr|w|) - 1 | = {worst_mag:.1e}, "
                                     f"max cosine deviation {worst_cos:.1e}")


def test_03_sbn_statistics():
    rng = np.random.default_rng(0)
    eps = 1e-5
    worst_mean, var_lo, var_hi, same = 0.0, math.inf, -math.inf, True
    for trial in range(20):
        B, T, P = 4, 7, 16
        x = rng.normal(rng.uniform(-5, 5, P), rng.uniform(0.8, 4, P), (B, T, P))
        mask = np.arange(T)[None, :] < rng.integers(1, T + 1, B)[:, None]
        mask[0, :2] = True
        st = SbnState.create("s", P, eps=eps)
        y, _ = sbn_forward(st, x, mask)
        sel, sel_in = y[mask], x[mask]
        ok_dims = sel_in.var(0) >= 0.5
        worst_mean = max(worst_mean, np.abs(sel.mean(0)).max())
        var_lo = min(var_lo, sel.var(0)[ok_dims].min())
        var_hi = max(var_hi, sel.var(0)[ok_dims].max())
        x2 = x.copy()
        x2[~mask] = rng.normal(0, 1e6, x2[~mask].shape)
        st2 = SbnState.create("s", P, eps=eps)
        y2, _ = sbn_forward(st2, x2, mask)
        same &= (np.array_equal(y, y2) and np.array_equal(st.running_mean, st2.running_mean)
                 and np.array_equal(st.running_var, st2.running_var) and not y[~mask].any())
    ok = worst_mean < 1e-10 and var_lo >= 1 - 2 * eps and var_hi <= 1 and same
    assert report(3, "SBN statistics", ok, f"max |mean| {worst_mean:.1e}, variance in [{var_lo:.8f}, {var_hi:.8f}], "
                                           f"padding mutation exact: {same}")


def test_04_random_projection():
    proj = rp_new(Rng(0, 4), 768, 300)
    R = proj.matrix
    s3 = math.sqrt(3)
    freq = np.array([np.mean(R == s3), np.mean(R == 0), np.mean(R == -s3)])
    rng = np.random.default_rng(4)
    x, y = rng.standard_normal((100, 768)), rng.standard_normal((100, 768))
    d = rp_apply(proj, x - y)
    ratio = (d ** 2).sum(1) / (300 * ((x - y) ** 2).sum(1))
    inside = np.mean((ratio >= 0.75) & (ratio <= 1.25))
    freq_ok = np.all(np.abs(freq - [1 / 6, 2 / 3, 1 / 6]) <= 0.02)
    ok = inside >= 0.95 and freq_ok
    assert report(4, "random projection", ok, f"{inside:.0%} of pairs in [0.75, 1.25]; entry frequencies "
                                              f"{np.round(freq, 4).tolist()}")


def random_monotone_gold(rng):
    n, m = int(rng.integers(1, 40)), int(rng.integers(1, 12))
    labels = np.where(rng.random(n) < 0.3, -1, rng.integers(0, m, n))
    matched = iter(sorted(labels[labels >= 0]))
    clips = [[] for _ in range(m)]
    for v, lab in enumerate(labels):
        if lab >= 0:
            clips[next(matched)].append(v)
    return GoldAlignment.from_lists(clips, n)


def test_05_alignment_round_trip():
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    exact = metrics_one = 0
    for _ in range(1000):
        gold = random_monotone_gold(rng)
        state = execute(derive_oracle_actions(gold, YMS_ACTIONS), gold.n_video, gold.n_text, YMS_ACTIONS)
        pred = state_to_alignment(state, gold.n_video, gold.n_text)
        exact += pred == gold
        lengths = rng.integers(5, 51, gold.n_video)
        ends = np.cumsum(lengths)
        iv = np.stack([ends - lengths, ends], 1)
        metrics_one += video_accuracy(pred, gold, lengths) == 1.0 and text_iou(pred, gold, iv) == 1.0
    elapsed = time.perf_counter() - t0
    ok = exact == 1000 and metrics_one == 1000 and elapsed < 30
    assert report(5, "alignment round trip", ok, f"{exact}/1000 exact, {metrics_one}/1000 metrics 1.0/1.0, "
                                                 f"{elapsed:.1f}s")


def test_06_end_to_end_learning():
    trainer, elapsed = toy_run("rp+lars+sbn", 0)
    _, _, test = toy_data()
    held_out = prepare(trainer.model, apply_standardizer(trainer.standardizer, test), trainer.standardizer)
    m = evaluate(trainer.model, held_out)
    ok = m["action_accuracy"] >= 0.90 and m["video_accuracy"] >= 0.85 and elapsed < 600
    assert report(6, "end-to-end learning", ok,
                  f"held-out action accuracy {m['action_accuracy']:.3f} (>= 0.90), video accuracy "
                  f"{m['video_accuracy']:.3f} (>= 0.85), text IoU {m['text_iou']:.3f}, decoded action match "
                  f"{m['decoded_action_accuracy']:.3f}; {EPOCHS} epochs in {elapsed:.0f}s")


def test_07_lars_raises_gradient_ratios():
    details, ok = [], True
    for seed in SEEDS:
        lars = summarize(toy_run("rp+lars+sbn", seed)[0].diag)["groups"]
        adam = summarize(toy_run("rp+adam+sbn", seed)[0].diag)["groups"]
        losing = [g for g in lars if not lars[g]["mean"] > adam[g]["mean"]]
        ok &= not losing
        pairs = " ".join(f"{g}={lars[g]['mean']:.3g}/{adam[g]['mean']:.3g}" for g in lars)
        details.append(f"seed {seed}: {pairs}" + (f" (not higher: {', '.join(losing)})" if losing else ""))
    assert report(7, "LARS vs Adam ratios (LARS/Adam, last 20 epochs)", ok, "; ".join(details))


def test_08_sbn_feature_statistics():
    sbn = final_features(toy_run("rp+lars+sbn", 0)[0])
    none = final_features(toy_run("rp+lars+none", 0)[0])
    keys = sorted(sbn)
    max_mean = max(abs(sbn[k][0]) for k in keys)
    higher = np.mean([sbn[k][1] > none[k][1] for k in keys])
    ok = max_mean <= 0.01 and higher >= 0.8
    assert report(8, "SBN feature statistics", ok,
                  f"max |mean| {max_mean:.3g} (<= 0.01: {max_mean <= 0.01}); variance above no-norm run in "
                  f"{higher:.0%} of dims (>= 80%: {higher >= 0.8}); mean variance "
                  f"{np.mean([sbn[k][1] for k in keys]):.3g} vs {np.mean([none[k][1] for k in keys]):.3g}")


def test_09_scheduler_and_warmup():
    s = LrSchedule(0.007)
    schedule_epoch_end(s, 1.0)
    lrs = [schedule_epoch_end(s, 1.0) for _ in range(10)]
    halving = all(lr == 0.007 for lr in lrs[:9]) and abs(lrs[9] - 0.0035) <= 1e-12
    w = LrSchedule(5e-4, warmup_start=5e-5, warmup_end=5e-4, warmup_epochs=5)
    start = w.lr
    ramp = [schedule_epoch_end(w, 1.0 - 0.1 * i) for i in range(5)]
    mid = warmup_lr(w, 3)
    warm = (abs(start - 5e-5) <= 1e-12 and abs(ramp[-1] - 5e-4) <= 1e-12
            and abs(mid - (5e-5 + 0.6 * 4.5e-4)) <= 1e-12)
    assert report(9, "scheduler and warm-up", halving and warm,
                  f"lr after 9/10 flat epochs {lrs[8]:.4g}/{lrs[9]:.4g}; warm-up {start:.1e} -> {ramp[-1]:.1e}, "
                  f"epoch 3 {mid:.4e}")


def test_10_determinism():
    train, val, _ = toy_data()
    flat = {"preset": "rp+lars+sbn", "epochs": 3, "model.projected_dim": 16, "model.stack_hidden": 16,
            "model.fc_hidden": 16}
    with tempfile.TemporaryDirectory() as tmp:
        for name in ("a", "b"):
            Trainer(run_config_from_flat(flat), train[:40], val[:10], out_dir=Path(tmp) / name).run()
        ma, mb = (Path(tmp) / n / "manifest.json" for n in ("a", "b"))
        ca, cb = (Path(tmp) / n / "metrics.csv" for n in ("a", "b"))
        same_manifest = ma.read_text() == mb.read_text()
        same_metrics = ca.read_bytes() == cb.read_bytes()
    assert report(10, "determinism", same_manifest and same_metrics,
                  f"manifests identical: {same_manifest}; metrics.csv byte-identical: {same_metrics}")


if __name__ == "__main__":
    failed = 0
    for name, fn in sorted((n, f) for n, f in globals().items() if n.startswith("test_")):
        try:
            fn()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
