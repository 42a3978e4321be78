"""Acceptance suite: one test per numbered criterion, each held to its time budget.

Run ``pytest tests/test_acceptance.py`` (or this file directly); the terminal
summary prints one PASS/FAIL line per criterion.
"""
import time

import numpy as np
import pytest

from cgtrack import ndcore as nd
from cgtrack.backbone import CorrelationPyramid
from cgtrack.harness import gradcheck
from cgtrack.harness.cli import main as cli
from cgtrack.harness.synth import SynthConfig, synth_generate
from cgtrack.harness.tracker import track_sequence
from cgtrack.harness.train import make_training_batch, smoke_train
from cgtrack.hfc import HFC
from cgtrack.lgch import LGCH, HeadOutputs
from cgtrack.metrics import SequenceRecord, evaluate, iou
from cgtrack.model import build_model
from cgtrack.ndcore import NDArray
from cgtrack.objective import focal_loss, giou, make_targets, stack_targets, total_loss
from cgtrack.profiler import report
from oracles import direct_focal, naive_conv2d, naive_linear, pixel_iou_giou, random_pairs, to_cxcywh

B_DIMS = (384, 512, 768)
B_MAPS = ((1, 384, 16, 16), (1, 512, 8, 8), (1, 768, 4, 4))

# overfit experiment: default learning rate and crop jitter, 150 of the allowed 200 steps
OVERFIT_STEPS = 150


class Budget:
    """Wall-clock guard: ``with Budget(1.0): ...`` fails if the block overruns."""

    def __init__(self, seconds: float):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert self.elapsed < self.seconds, f"took {self.elapsed:.2f} s, budget {self.seconds} s"


@pytest.mark.acceptance(1, "SE parameter identity")
def test_criterion_01_se_parameter_identity(record_property):
    with Budget(1.0):
        rows = report(HFC(B_DIMS), B_MAPS, "hfc").rows
        se = sum(r.params for r in rows if r.name.startswith(("hfc.se1", "hfc.se2")))
    record_property("detail", f"SE params {se}")
    assert se == 550_912
    assert abs(se - (41.219 - 40.668) * 1e6) <= 1_000


@pytest.mark.acceptance(2, "HFC zero-cost fusion")
def test_criterion_02_hfc_zero_cost_fusion(rng):
    with Budget(1.0):
        hfc = HFC(B_DIMS, rng=rng)
        rows = report(hfc, B_MAPS, "hfc").rows
        fusion = [r for r in rows if "upsample" in r.name or "concat" in r.name]
        assert len(fusion) == 4 and all(r.params == 0 for r in fusion)
        assert hfc.channel_trace() == [768, 1280, 1664]
        maps = [NDArray(rng.standard_normal(s), dtype=np.float32) for s in B_MAPS]
        with nd.no_grad():
            assert hfc(CorrelationPyramid(*maps)).shape == (1, 1664, 16, 16)


@pytest.mark.acceptance(3, "EG-head affinity in the expansion ratio")
def test_criterion_03_eg_head_affinity(record_property):
    with Budget(1.0):
        counts = [report(LGCH(1664, ratio=r), (1, 1664, 16, 16), "head").params for r in (1, 2, 3, 4)]
    record_property("detail", "params(r=1..4) = " + ", ".join(f"{c:,}" for c in counts))
    assert np.all(np.diff(counts, 2) == 0)
    assert np.all(np.diff(counts) > 0)


@pytest.mark.acceptance(4, "shape contract (B config)")
def test_criterion_04_shape_contract():
    with Budget(10.0):
        model = build_model("B", seed=0).eval()
        rng = np.random.default_rng(0)
        z = NDArray(rng.standard_normal((1, 3, 128, 128)), dtype=np.float32)
        x = NDArray(rng.standard_normal((1, 3, 256, 256)), dtype=np.float32)
        with nd.no_grad():
            pyr = model.pyramid(z, x)
            fused = model.hfc(pyr)
            out = model.head(fused)
    assert [m.shape[1:] for m in pyr.maps()] == [(384, 16, 16), (512, 8, 8), (768, 4, 4)]
    assert fused.shape[1:] == (1664, 16, 16)
    assert (out.score.shape[1:], out.offset.shape[1:], out.size.shape[1:]) == ((1, 16, 16), (2, 16, 16), (2, 16, 16))


@pytest.mark.acceptance(5, "gradient suite")
def test_criterion_05_gradient_suite(record_property):
    with Budget(300.0):
        results = gradcheck.run("all")
    worst = max(results, key=lambda r: r.max_rel_err)
    record_property("detail", f"{len(results)} groups, worst {worst.scope}/{worst.name} {worst.max_rel_err:.1e}")
    assert {r.scope for r in results} == set(gradcheck.SCOPES)
    failed = [f"{r.scope}/{r.name}: {r.max_rel_err:.2e}" for r in results
              if not (r.checked > 0 and r.max_rel_err < 1e-5)]
    assert not failed, failed


@pytest.mark.acceptance(6, "oracle equivalence")
def test_criterion_06_oracle_equivalence():
    rng = np.random.default_rng(6)
    x, w, b = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    out = nd.conv2d(NDArray(x), NDArray(w), NDArray(b), stride=1, padding=1)
    assert np.abs(out.data - naive_conv2d(x, w, b, 1, 1, 1)).max() < 1e-5

    xd, wd, bd = rng.standard_normal((2, 3, 9, 9)), rng.standard_normal((3, 1, 7, 7)), rng.standard_normal(3)
    out = nd.depthwise_conv2d(NDArray(xd), NDArray(wd), NDArray(bd), padding=3)
    assert np.abs(out.data - naive_conv2d(xd, wd, bd, 1, 3, 3)).max() < 1e-5

    xl, wl, bl = rng.standard_normal((3, 5, 7)), rng.standard_normal((6, 7)), rng.standard_normal(6)
    assert np.abs(nd.linear(NDArray(xl), NDArray(wl), NDArray(bl)).data - naive_linear(xl, wl, bl)).max() < 1e-5

    pairs = random_pairs(rng, 1000)
    oracle = np.array([pixel_iou_giou(p, q) for p, q in pairs])
    assert np.abs(iou(pairs[:, 0], pairs[:, 1]) - oracle[:, 0]).max() < 1e-3
    assert np.abs(giou(to_cxcywh(pairs[:, 0]), to_cxcywh(pairs[:, 1])).data - oracle[:, 1]).max() < 1e-3

    # 2x2 toy grid, p = 0.5 everywhere, a single positive and zero Gaussian elsewhere
    y = np.zeros((1, 1, 2, 2))
    y[0, 0, 1, 0] = 1.0
    p = np.full_like(y, 0.5)
    assert abs(focal_loss(NDArray(p), y).item() - direct_focal(p, y)) < 1e-9
    t = stack_targets([make_targets((0.4, 0.55, 0.3, 0.2), 6)])
    p = rng.uniform(0, 1, t.cls_target.shape)
    assert abs(focal_loss(NDArray(p), t.cls_target).item() - direct_focal(p, t.cls_target)) < 1e-9


@pytest.mark.acceptance(7, "loss identities")
def test_criterion_07_loss_identities():
    t = stack_targets([make_targets((0.47, 0.52, 0.13, 0.2)), make_targets((0.31, 0.66, 0.2, 0.1))])
    n, _, g, _ = t.cls_target.shape
    score, offset, size = np.zeros((n, 1, g, g)), np.zeros((n, 2, g, g)), np.zeros((n, 2, g, g))
    for k, (i, j) in enumerate(t.center_cell):
        score[k, 0, i, j] = 1.0
        offset[k, :, i, j] = t.offset_target[k]
        size[k, :, i, j] = t.size_target[k]
    total, _ = total_loss(HeadOutputs(NDArray(score), NDArray(offset), NDArray(size)), t)
    assert total.item() < 1e-9

    a = np.array([0.3, 0.6, 0.2, 0.35])
    assert giou(a, a).item() == 1.0
    pa, pb = (0, 0, 10, 10), (5, 0, 10, 10)
    assert iou(pa, pb) == 1 / 3
    assert giou(to_cxcywh(pa), to_cxcywh(pb)).item() == 1 / 3


@pytest.mark.acceptance(8, "overfit experiment")
def test_criterion_08_overfit_then_track(record_property):
    with Budget(600.0):
        record = synth_generate(SynthConfig(seed=0), 20)
        assert "static" in record.attributes
        batch = make_training_batch(record, 8, seed=0)
        model = build_model("T", seed=0)
        history = smoke_train(model, batch, OVERFIT_STEPS)
        boxes = track_sequence(model, record.frames, record.boxes[0])
    first, last = history[0]["total"], history[-1]["total"]
    overlaps = iou(boxes, record.boxes)
    record_property("detail", f"loss {first:.3f} -> {last:.3f}, min IoU {overlaps.min():.3f}")
    assert last <= 0.5 * first
    assert len(boxes) == len(record.frames)
    assert np.all(overlaps > 0.7), np.round(overlaps, 3)


@pytest.mark.acceptance(9, "metrics fixtures")
def test_criterion_09_metrics_fixtures():
    rng = np.random.default_rng(9)
    gt = np.concatenate([rng.uniform(0, 200, (40, 2)), rng.uniform(5, 60, (40, 2))], axis=1)
    rep = evaluate(gt, SequenceRecord("perfect", gt))
    assert rep.precision_at_20 == 1.0
    assert rep.success_auc == pytest.approx(20 / 21, abs=1e-12)

    half = np.array([[0.0, 0.0, 10.0, 10.0]] * 10)
    res = half + [10 / 3, 0, 0, 0]
    assert evaluate(res, SequenceRecord("half", half)).success_auc == pytest.approx(10 / 21, abs=1e-12)

    for _ in range(20):
        n = int(rng.integers(1, 50))
        g = np.concatenate([rng.uniform(0, 100, (n, 2)), rng.uniform(1, 40, (n, 2))], axis=1)
        r = g + rng.normal(0, 15, g.shape) * [1, 1, 0.3, 0.3]
        r[:, 2:] = np.abs(r[:, 2:]) + 0.5
        rep = evaluate(r, SequenceRecord("random", g))
        assert np.all(np.diff(rep.precision_curve) >= 0)
        assert np.all(np.diff(rep.success_curve) <= 0)


def _pipeline(root):
    root.mkdir()
    cfg = root / "run.cfg"
    cfg.write_text("seed = 3\nmodel.variant = T\ntrain.batch = 2\nsynth.frames = 4\n")
    seq, ckpt = root / "seq", root / "model.ckpt"
    assert cli(["synth", "--config", str(cfg), "--out", str(seq)]) == 0
    assert cli(["init", "--variant", "T", "--config", str(cfg), "--out", str(ckpt)]) == 0
    assert cli(["smoke-train", "--config", str(cfg), "--ckpt", str(ckpt), "--data", str(seq), "--steps", "2"]) == 0
    assert cli(["track", "--config", str(cfg), "--ckpt", str(ckpt), "--seq", str(seq),
                "--out", str(root / "result.txt")]) == 0
    assert cli(["eval", "--results", str(root / "result.txt"), "--gt", str(seq),
                "--attrs", str(seq / "attributes.txt"), "--report", str(root / "report.csv")]) == 0
    return {name: (root / name).read_bytes()
            for name in ("result.txt", "report.csv", "model.ckpt", "model.ckpt.loss.csv")}


@pytest.mark.acceptance(10, "pipeline determinism")
def test_criterion_10_pipeline_determinism(tmp_path, monkeypatch):
    monkeypatch.delenv("CGTRACK_SEED", raising=False)
    first = _pipeline(tmp_path / "a")
    second = _pipeline(tmp_path / "b")
    for name in first:
        assert first[name] == second[name], f"{name} differs between runs"


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
