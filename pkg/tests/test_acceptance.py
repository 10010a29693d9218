"""Acceptance criteria. Each test records one PASS/FAIL line, printed at the
end of the session (and immediately when run with ``-s``)."""
import math
import time

import numpy as np
import pytest
import torch
from torch import nn

from herbs.evaluation import false_true_rate, generic_class_report, top_k_accuracy
from herbs.gradcheck import run_tiny_gradcheck
from herbs.heatmap import background_activation
from herbs.model import fuse_predictions
from herbs.refinement import TemperatureSchedule, refinement_loss, temperature_at
from herbs.suppression import BsLossWeights, ClassificationMap, bs_total, dropped_loss, max_score, merged_loss, select_topk
from herbs.training import (
    TrainConfig,
    accumulate_and_step,
    build_model,
    load_checkpoint,
    load_datasets,
    save_checkpoint,
    train,
)

from conftest import DESK_CONFIG, desk_run
from oracles import brute_false_true, brute_generic, brute_top_k, random_dump

RESULTS: list[str] = []
SEEDS = (0, 1, 2)


def record(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def test_criterion_01_gradient_oracle():
    start = time.perf_counter()
    report = run_tiny_gradcheck(num_params=24)
    seconds = time.perf_counter() - start
    ok = len(report.entries) >= 20 and report.max_rel_error < 1e-4 and seconds < 120
    record(1, "gradient oracle", ok,
           f"{len(report.entries)} parameters, max rel. error {report.max_rel_error:.2e} (< 1e-4), {seconds:.1f}s")


def test_criterion_02_loss_closed_forms():
    C = 7
    errs = {}
    errs["merged"] = abs(float(merged_loss(torch.zeros(4, C), torch.arange(4))) - math.log(C))
    errs["dropped"] = abs(float(dropped_loss(torch.zeros(2, 5, C))) - C)
    w = BsLossWeights()
    m, d, l = torch.tensor(0.7), torch.tensor(1.3), torch.tensor(2.9)
    errs["bs"] = abs(float(bs_total(m, d, l, w)) - float(1.0 * m + 5.0 * d + 0.3 * l))
    z = torch.randn(3, C)
    refine = abs(float(refinement_loss([(z, z.clone()) for _ in range(4)], 64.0)))
    ok = (errs["merged"] <= 1e-9 and errs["dropped"] <= 1e-9 and errs["bs"] == 0.0
          and (w.merged, w.dropped, w.layer) == (1.0, 5.0, 0.3) and refine <= 1e-12)
    record(2, "loss closed forms", ok,
           f"|merged-lnC|={errs['merged']:.1e}, |dropped-C|={errs['dropped']:.1e}, "
           f"bs recomposition diff={errs['bs']:.1e}, refine(identical)={refine:.1e}")


def _brute_select(scores: list[float], k: int) -> list[int]:
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[:k]


def test_criterion_03_selector_oracle():
    rng = np.random.default_rng(0)
    mismatches = ties_seen = 0
    for trial in range(500):
        H, W = (int(v) for v in rng.integers(1, 17, size=2))
        C = int(rng.integers(2, 21))
        if trial % 2:
            logits = rng.integers(-2, 3, size=(1, C, H, W)).astype(float)  # coarse values: many exact ties
        else:
            logits = rng.normal(size=(1, C, H, W))
        logits = torch.from_numpy(logits)
        cmap = ClassificationMap(logits, max_score(logits))
        k = int(rng.integers(1, H * W + 1))
        sel = select_topk(cmap, torch.randn(1, 3, H, W), k)
        scores = cmap.max_score.flatten().tolist()
        ties_seen += len(scores) != len(set(scores))
        expected = _brute_select(scores, k)
        mismatches += sel.selected_idx[0].tolist() != expected
        mismatches += sorted(sel.dropped_idx[0].tolist()) != sorted(set(range(H * W)) - set(expected))
    record(3, "selector oracle", mismatches == 0 and ties_seen > 0,
           f"500 instances ({ties_seen} with tied scores), {mismatches} mismatches")


def test_criterion_04_temperature_schedule():
    s = TemperatureSchedule(64.0)
    ok = [temperature_at(e, s) for e in (0, 10, 79)] == [64.0, 32.0, 0.5] and s.halving_interval == 10
    grid = [0.5 * 2**i for i in range(10)]
    monotone = literal = True
    for T in grid:
        seq = [temperature_at(e, TemperatureSchedule(T)) for e in range(100)]
        monotone &= all(a >= b for a, b in zip(seq, seq[1:]))
        lit = TemperatureSchedule(T, "literal")
        literal &= all(temperature_at(e, lit) == 0.5 ** math.floor(e / (-math.log2(0.0625 / T))) for e in range(100))
    record(4, "temperature schedule", ok and monotone and literal,
           f"T_0,T_10,T_79={[temperature_at(e, s) for e in (0, 10, 79)]}, non-increasing on 0.5..256: {monotone}, "
           f"literal exact: {literal}")


def test_criterion_05_desk_effectiveness():
    a = [desk_run(variant="a", seed=s) for s in SEEDS]
    e = [desk_run(variant="e", seed=s) for s in SEEDS]
    test_a = float(np.mean([r.test_top1 for r in a]))
    test_e = float(np.mean([r.test_top1 for r in e]))
    train_e = float(np.mean([r.train_top1 for r in e]))
    minutes = sum(r.seconds for r in a + e) / 60
    ok = test_e >= test_a + 2.0 and train_e >= 95.0 and minutes < 20
    assert len(a[0].train_set) == 200 and len(a[0].test_set) == 100 and a[0].cfg.epochs == 30
    record(5, "desk-scale effectiveness", ok,
           f"test top-1 (e) {test_e:.1f} vs (a) {test_a:.1f} (delta {test_e - test_a:+.1f}, need >= +2), "
           f"train top-1 (e) {train_e:.1f} (need >= 95), {minutes:.1f} min")


def test_criterion_06_suppression_effect():
    on = desk_run(variant="e", seed=0)
    off = desk_run(variant="e", seed=0, lambda_d=0.0)
    masks = on.test_set.masks
    on.net.eval()
    off.net.eval()
    bg_on = background_activation(on.net, on.test_pixels, masks)
    bg_off = background_activation(off.net, off.test_pixels, masks)
    frac = float((bg_on < bg_off).double().mean())
    record(6, "suppression effect", frac >= 0.8,
           f"mean |tanh(Y)| on background {bg_on.mean():.3f} (lambda_d=5) vs {bg_off.mean():.3f} (lambda_d=0); "
           f"lower on {100 * frac:.0f}% of test images (need >= 80%)")


def test_criterion_07_metric_oracles():
    rng = np.random.default_rng(7)
    bad = 0
    for _ in range(100):
        C = int(rng.integers(2, 11))
        dump = random_dump(rng, int(rng.integers(1, 51)), C)
        mapping = {c: f"g{rng.integers(3)}" for c in range(C)}
        bad += any(top_k_accuracy(dump, k) != brute_top_k(dump, k) for k in range(1, C + 1))
        rows, _ = generic_class_report(dump, mapping, min_categories=1)
        bad += {r.generic: (r.num, r.precision, r.fp) for r in rows} != brute_generic(dump, mapping, 1)
        td, bu, y = ([r[k] for r in dump] for k in ("td_argmax", "bu_argmax", "label"))
        bad += false_true_rate(td, bu, y) != brute_false_true(td, bu, y)
    ftr = false_true_rate([1, 1, 1, 1], [0, 0, 0, 2], [0, 0, 0, 0])
    record(7, "metric oracles", bad == 0 and ftr == 0.75,
           f"100 random dumps, {bad} disagreements; false_true_rate(ft=3, ff=1)={ftr}")


def test_criterion_08_fusion_invariants():
    g = torch.Generator().manual_seed(8)
    worst_sum = worst_ref = 0.0
    perm_ok = True
    for _ in range(100):
        nine = [torch.randn(3, 10, generator=g) * 5 for _ in range(9)]
        fused = fuse_predictions(nine)
        worst_ref = max(worst_ref, float((fused - torch.softmax(sum(nine), -1)).abs().max()))
        worst_sum = max(worst_sum, float((fused.sum(-1) - 1).abs().max()))
        for _ in range(5):
            perm = torch.randperm(9, generator=g).tolist()
            perm_ok &= torch.equal(fuse_predictions([nine[i] for i in perm]), fused)
    ok = worst_ref < 1e-12 and worst_sum <= 1e-6 and perm_ok
    record(8, "fusion invariants", ok,
           f"max |fused - softmax(sum)|={worst_ref:.1e}, max |sum-1|={worst_sum:.1e}, permutation-invariant: {perm_ok}")


def test_criterion_09_reproducibility(tmp_path):
    cfg = TrainConfig.from_file(DESK_CONFIG).with_overrides(["epochs=3", "samples_per_class=4"])
    train_set, test_set, _ = load_datasets(cfg)
    logs = []
    for name in ("a", "b"):
        net = build_model(cfg, train_set.num_classes)
        log = tmp_path / f"{name}.jsonl"
        res = train(net, train_set, cfg, log_path=log, num_classes=train_set.num_classes)
        logs.append(log.read_text())
    same_logs = logs[0] == logs[1] and len(logs[0].splitlines()) == 3
    path = tmp_path / "ck.pt"
    save_checkpoint(path, res.net.double(), cfg, cfg.epochs, res.optimizer, res.step, train_set.num_classes)
    loaded, _, _ = load_checkpoint(path)
    loaded.double()
    x = torch.stack([test_set[i][0] for i in range(8)]).double()
    res.net.eval()
    loaded.eval()
    b1, b2 = res.net(x)[0], loaded(x)[0]
    same_forward = all(torch.equal(u, v) for u, v in zip(b1.all_logits + [b1.fused_probs],
                                                         b2.all_logits + [b2.fused_probs]))
    record(9, "reproducibility", same_logs and same_forward,
           f"identical epoch logs: {same_logs}; checkpoint round trip bitwise (float64): {same_forward}")


def test_criterion_10_accumulation_equivalence():
    g = torch.Generator().manual_seed(10)
    X = torch.randn(32, 6, generator=g)
    y = torch.randn(32, generator=g)

    def one_step(batch, accum):
        torch.manual_seed(0)
        model = nn.Linear(6, 1)
        opt = torch.optim.SGD(model.parameters(), lr=0.05, momentum=0.9, weight_decay=5e-4)
        window = [(X[i:i + batch], y[i:i + batch]) for i in range(0, 32, batch)][:accum]
        accumulate_and_step(opt, window, lambda b: ((model(b[0])[:, 0] - b[1]) ** 2).mean())
        return torch.cat([p.detach().flatten() for p in model.parameters()])

    diff = float((one_step(8, 4) - one_step(32, 1)).abs().max())
    record(10, "gradient-accumulation equivalence", diff <= 1e-8, f"max parameter difference {diff:.1e} (<= 1e-8)")
