import math

import numpy as np
import pytest

from cgtrack import ndcore as nd
from cgtrack.ndcore.array import make_output
from cgtrack.harness import gradcheck
from cgtrack.harness.config import RunConfig
from cgtrack.harness.crop import clip_box, crop_resize, crop_transform, to_network_input
from cgtrack.harness.modelio import infer_config, load_model, save_model
from cgtrack.harness.store import FormatError, ParamStore, checkpoint_load, checkpoint_save
from cgtrack.harness.synth import (SENSOR_NOISE, SynthConfig, load_sequence, read_pixmap, save_sequence, synth_generate,
                                   write_pixmap)
from cgtrack.harness.tracker import track_sequence
from cgtrack.harness.train import (AdamW, NonFiniteLossError, batch_losses, make_training_batch,
                                   smoke_train, write_history)
from cgtrack.metrics import iou
from cgtrack.model import CGTrack, ModelConfig, build_model
from cgtrack.objective import LossWeights


def tiny_model(seed=0):
    return CGTrack(ModelConfig(gradcheck.TINY_BACKBONE, se_reduction=8, head_width=8, eg_ratio=2, eg_blocks=1),
                   seed=seed)


# -- config ------------------------------------------------------------------


def test_config_parse_and_dump_round_trip(monkeypatch):
    monkeypatch.delenv("CGTRACK_SEED", raising=False)
    cfg = RunConfig.parse("model.variant = S\n# comment\nhead.eg_ratio = 3\nloss.lambda_giou=1.5\n"
                          "synth.occluder = true\nseed = 9\n")
    assert (cfg.model_variant, cfg.head_eg_ratio, cfg.loss_lambda_giou, cfg.synth_occluder, cfg.seed) == \
        ("S", 3, 1.5, True, 9)
    assert RunConfig.parse(cfg.dumps()) == cfg
    assert "track.search_factor = 4.0" in cfg.dumps()


def test_config_env_seed_override(monkeypatch):
    monkeypatch.setenv("CGTRACK_SEED", "41")
    assert RunConfig.parse("seed = 3").seed == 41


@pytest.mark.parametrize("text", ["model.variant S", "nope.key = 1", "synth.occluder = maybe"])
def test_config_errors(text):
    with pytest.raises(ValueError):
        RunConfig.parse(text, env=False)


# -- checkpoints -------------------------------------------------------------


def sample_store(rng):
    s = ParamStore()
    s["a.weight"] = rng.standard_normal((3, 4)).astype(np.float32)
    s["a.bias"] = rng.standard_normal(4)
    s["scalar"] = np.array(2.5, dtype=np.float32)
    s["empty"] = np.zeros((0, 3), dtype=np.float32)
    return s


def test_store_round_trip_bit_exact(tmp_path, rng):
    s = sample_store(rng)
    checkpoint_save(s, tmp_path / "c.ckpt")
    back = checkpoint_load(tmp_path / "c.ckpt")
    assert list(back) == list(s)
    for k in s:
        assert back[k].dtype == s[k].dtype and back[k].shape == s[k].shape
        assert back[k].tobytes() == s[k].tobytes()
    raw = (tmp_path / "c.ckpt").read_bytes()
    assert raw.startswith(b"CGTK1\n4\na.weight f32 2 3 4\na.bias f64 1 4\nscalar f32 0\nempty f32 2 0 3\n")


def test_store_format_errors(rng):
    raw = sample_store(rng).to_bytes()
    with pytest.raises(FormatError) as e:
        ParamStore.from_bytes(b"XGTK1" + raw[5:])
    assert e.value.offset == 0
    with pytest.raises(FormatError) as e:
        ParamStore.from_bytes(raw[:-3])
    assert "truncated" in str(e.value)
    with pytest.raises(FormatError) as e:
        ParamStore.from_bytes(raw.replace(b"a.bias f64 1 4", b"a.bias f16 1 4"))
    assert e.value.offset == len(b"CGTK1\n4\na.weight f32 2 3 4\n")
    for cut in range(0, 40, 3):
        with pytest.raises(FormatError):
            ParamStore.from_bytes(raw[:cut])


def test_model_checkpoint_round_trip_and_variant_inference(tmp_path):
    m = build_model("T", seed=3)
    save_model(m, tmp_path / "t.ckpt")
    name, cfg = infer_config(checkpoint_load(tmp_path / "t.ckpt"))
    assert name == "T" and cfg == m.cfg
    _, back = load_model(tmp_path / "t.ckpt")
    for (k, a), (k2, b) in zip(m.state().items(), back.state().items()):
        assert k == k2 and np.array_equal(a, b)


# -- synthetic data ----------------------------------------------------------


def test_synth_deterministic_and_bounded():
    cfg = SynthConfig(seed=7, velocity=(9.0, -4.0), scale_amplitude=0.2, occluder=True)
    a, b = synth_generate(cfg, 12), synth_generate(cfg, 12)
    assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))
    s = cfg.image_size
    assert np.all(a.boxes[:, :2] >= 0) and np.all(a.boxes[:, 0] + a.boxes[:, 2] <= s)
    assert np.all(a.boxes[:, 1] + a.boxes[:, 3] <= s)
    assert a.attributes == {"motion", "fast_motion", "scale_variation", "occlusion"}


def test_synth_static_boxes_identical():
    rec = synth_generate(SynthConfig(seed=1), 6)
    assert np.all(rec.boxes == rec.boxes[0])
    assert rec.attributes == {"static"}


def test_synth_static_scene_varies_only_by_sensor_noise():
    rec = synth_generate(SynthConfig(seed=2), 3)
    x, y, w, h = rec.boxes[0].astype(int)
    mask = np.ones(rec.frames[0].shape[:2], bool)
    mask[y:y + h, x:x + w] = False
    diff = rec.frames[1].astype(float) - rec.frames[2].astype(float)
    # two independent noise draws: difference std is sqrt(2) times the sensor noise
    assert abs(diff[mask].std() - math.sqrt(2) * SENSOR_NOISE) < 0.5
    assert np.array_equal(rec.frames[1][~mask], rec.frames[2][~mask])


def test_synth_box_matches_rendered_target():
    rec = synth_generate(SynthConfig(seed=5, velocity=(3.0, 2.0)), 4)
    for frame, (x, y, w, h) in zip(rec.frames, rec.boxes.astype(int)):
        border = np.array([30, 30, 90], dtype=np.uint8)
        assert np.all(frame[y, x:x + w] == border) and np.all(frame[y + h - 1, x:x + w] == border)


@pytest.mark.parametrize("kw", [dict(target_min=300, target_max=400), dict(target_min=50, target_max=20)])
def test_synth_rejects_bad_config(kw):
    with pytest.raises(ValueError):
        synth_generate(SynthConfig(**kw), 3)
    with pytest.raises(ValueError):
        synth_generate(SynthConfig(), 1)


def test_pixmap_and_sequence_round_trip(tmp_path):
    rec = synth_generate(SynthConfig(seed=2, image_size=64, target_min=10, target_max=12), 3)
    write_pixmap(tmp_path / "f.pxm", rec.frames[0])
    assert (tmp_path / "f.pxm").read_bytes().startswith(b"64 64 3\n")
    assert np.array_equal(read_pixmap(tmp_path / "f.pxm"), rec.frames[0])
    save_sequence(tmp_path / "seq", rec)
    back = load_sequence(tmp_path / "seq")
    assert back.name == rec.name and back.attributes == rec.attributes
    assert np.array_equal(back.boxes, rec.boxes)
    assert all(np.array_equal(a, b) for a, b in zip(back.frames, rec.frames))


# -- cropping ----------------------------------------------------------------


def test_crop_affine_round_trip(rng):
    for _ in range(200):
        box = (*rng.uniform(-50, 300, 2), *rng.uniform(1, 120, 2))
        tf = crop_transform(box, rng.uniform(1.5, 5), int(rng.integers(64, 300)))
        norm = tuple(rng.uniform(0, 1, 4))
        np.testing.assert_allclose(tf.image_to_normalized(tf.normalized_to_image(norm)), norm, atol=1e-6)
        np.testing.assert_allclose(tf.normalized_to_image(tf.image_to_normalized(box)), box, atol=1e-6)


def test_centered_box_maps_to_crop_center():
    box = (40.0, 60.0, 30.0, 20.0)
    tf = crop_transform(box, 4.0, 256)
    cx, cy, w, h = tf.image_to_normalized(box)
    assert (cx, cy) == (0.5, 0.5)
    assert w * h * 16 == pytest.approx(1.0)  # area fraction 1 / factor^2


def test_crop_pixels_and_mean_padding():
    img = np.zeros((40, 40, 3), np.uint8)
    img[10:20, 10:20] = 200
    crop, _ = crop_resize(img, (10, 10, 10, 10), 1.0, 10)
    np.testing.assert_allclose(crop, 200)  # identity scale reproduces the pixels exactly
    crop, _ = crop_resize(img, (0, 0, 4, 4), 8.0, 32)
    assert crop[0, 0, 0] == pytest.approx(img.mean(axis=(0, 1))[0])


def test_crop_rejects_degenerate_box():
    with pytest.raises(ValueError):
        crop_resize(np.zeros((8, 8, 3)), (1, 1, 0, 4), 2.0, 16)
    with pytest.raises(ValueError):
        crop_transform((math.nan, 0, 1, 1), 2.0, 16)


def test_clip_box_stays_inside():
    assert clip_box((-5, -5, 20, 20), 10, 10) == (0.0, 0.0, 10.0, 10.0)
    x, y, w, h = clip_box((50, 50, 10, 10), 10, 10)
    assert 0 <= x and x + w <= 10 and w >= 1 and h >= 1


# -- tracking and training (reduced network) ---------------------------------


@pytest.fixture(scope="module")
def small_sequence():
    return synth_generate(SynthConfig(seed=4, image_size=96, target_min=12, target_max=16, velocity=(2.0, 1.0)), 5)


def test_track_sequence_protocol(small_sequence):
    m = tiny_model()
    out = track_sequence(m, small_sequence.frames, small_sequence.boxes[0])
    assert out.shape == (5, 4)
    assert tuple(out[0]) == tuple(small_sequence.boxes[0])
    assert np.all(out[:, :2] >= 0) and np.all(out[:, 0] + out[:, 2] <= 96) and np.all(out[:, 1] + out[:, 3] <= 96)
    assert np.all(iou(out, out) > 0)


def test_smoke_train_lr_zero_leaves_parameters_unchanged(small_sequence):
    m = tiny_model()
    before = {k: v.copy() for k, v in m.state().items() if "running" not in k}
    batch = make_training_batch(small_sequence, 4, template_size=64, search_size=128)
    smoke_train(m, batch, 3, lr=0.0, weight_decay=0.0)
    for k, v in before.items():
        assert v.tobytes() == m.state()[k].tobytes(), k


def test_smoke_train_deterministic_and_decreasing(small_sequence, tmp_path):
    histories = []
    for _ in range(2):
        m = tiny_model(seed=11)
        batch = make_training_batch(small_sequence, 4, template_size=64, search_size=128, seed=2)
        histories.append(smoke_train(m, batch, 6, lr=1e-3))
    assert histories[0] == histories[1]
    assert histories[0][-1]["total"] < histories[0][0]["total"]
    write_history(tmp_path / "h.csv", histories[0])
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "step,total,focal,giou,l1" and len(lines) == 8


def test_training_batch_first_crop_is_centered_on_truth(small_sequence):
    batch = make_training_batch(small_sequence, 3, template_size=64, search_size=128, seed=5)
    crop, _ = crop_resize(small_sequence.frames[0], small_sequence.boxes[0], 4.0, 128)
    assert np.array_equal(batch.search[:1], to_network_input(crop))
    assert not np.array_equal(batch.search[1], batch.search[0])


def test_batch_norm_recalibration_matches_batch_statistics(small_sequence):
    m = tiny_model(seed=3)
    batch = make_training_batch(small_sequence, 4, template_size=64, search_size=128)
    smoke_train(m, batch, 2, lr=1e-3)
    losses = {}
    for mode in ("train", "eval"):
        getattr(m, mode)()
        with nd.no_grad():
            losses[mode] = batch_losses(m, batch, LossWeights())[1].item()
    # eval mode differs only through the unbiased variance estimate
    assert losses["eval"] == pytest.approx(losses["train"], rel=2e-2)
    assert m.training is False


def test_smoke_train_non_finite_diagnostic(small_sequence):
    m = tiny_model()
    m.head.size[-1].weight.data[:] = np.nan
    batch = make_training_batch(small_sequence, 2, template_size=64, search_size=128)
    with pytest.raises(NonFiniteLossError, match="head.size.1.weight"):
        smoke_train(m, batch, 1)


def test_adamw_matches_reference_update():
    p = nd.NDArray(np.array([1.0, -2.0]), requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.01)
    p.grad = np.array([0.5, -0.25])
    opt.step()
    # first step: m_hat = g, v_hat = g^2 -> update = g / (|g| + eps)
    expect = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * np.array([0.5, -0.25]) / (np.array([0.5, 0.25]) + 1e-8)
    np.testing.assert_allclose(p.data, expect, rtol=1e-12)


def test_gradcheck_scope_smoke():
    results = gradcheck.run("hfc")
    assert results and all(r.passed for r in results)


def test_gradcheck_flags_a_wrong_backward(rng):
    x = nd.NDArray(rng.standard_normal(6))
    # value x.x, but the backward is off by one part in ten thousand
    bad = lambda: make_output(np.sum(x.data ** 2), (x,), lambda g: (g * 2.0002 * x.data,), "bad_square")  # noqa: E731
    (res,) = gradcheck.check_arrays("t", bad, [("x", x)], rng)
    assert not res.passed and res.max_rel_err == pytest.approx(1e-4, rel=1e-3)


def test_gradcheck_skips_probes_across_a_breakpoint(rng):
    x = nd.NDArray(np.array([3e-6, 1.0, -2.0]))
    (res,) = gradcheck.check_arrays("t", lambda: nd.relu(x).sum(), [("x", x)], rng, samples=2)
    # entry 0 sits within one step of the kink; entry 2 has zero gradient and is not probed
    assert (res.checked, res.skipped) == (1, 1) and res.passed


def test_record_pieces_logs_piecewise_ops():
    x = nd.NDArray(np.array([-4.0, -1.0, 2.0, 7.0]))
    with nd.record_pieces() as log:
        nd.relu6(x)
        nd.hardswish(x)
        nd.sigmoid(x)
    assert [p.tolist() for p in log] == [[0, 0, 1, 2], [0, 1, 1, 2]]
