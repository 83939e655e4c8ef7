import numpy as np
import pytest

from advcamo import detector as det
from advcamo import diffcore as dc
from advcamo import scene as sc


def make_dets(pairs, boxes=None, image_size=128):
    """Detections container from (C_obj, P_cls) pairs and optional boxes."""
    n = len(pairs)
    obj = np.array([[p[0] for p in pairs]], dtype=np.float64)
    cls = np.array([[p[1] for p in pairs]], dtype=np.float64)
    if boxes is None:
        boxes = [(64.0, 64.0, 32.0, 32.0)] * n
    cx = np.array([[b[0] for b in boxes]])
    cy = np.array([[b[1] for b in boxes]])
    w = np.array([[b[2] for b in boxes]])
    h = np.array([[b[3] for b in boxes]])
    z = dc.Tensor(np.zeros((1, n)))
    return det.Detections(
        dc.Tensor(cx), dc.Tensor(cy), dc.Tensor(w), dc.Tensor(h),
        dc.Tensor(obj), dc.Tensor(cls), z, z, (n,), image_size,
    )


def test_detection_count_128():
    model = det.init_weights("arch-a-v1", seed=0)
    image = np.random.default_rng(0).uniform(size=(128, 128, 3))
    dets, acts = det.forward(model, image)
    assert len(dets) == 16 * 16 + 8 * 8 == 320
    assert set(acts) == {"s8", "s16"}
    assert acts["s8"].shape == (1, 64, 16, 16)
    assert acts["s16"].shape == (1, 64, 8, 8)


def test_arch_b_has_stride4_attention():
    model = det.init_weights("arch-b-v1", seed=0)
    image = np.zeros((64, 64, 3))
    dets, acts = det.forward(model, image)
    assert set(acts) == {"s4", "s8", "s16"}
    assert acts["s4"].shape == (1, 24, 16, 16)
    assert len(dets) == 8 * 8 + 4 * 4


def test_zero_weights_give_half_confidence():
    model = det.init_weights("arch-a-v1", seed=0)
    model.weights = {k: np.zeros_like(v) for k, v in model.weights.items()}
    dets, _ = det.forward(model, np.random.default_rng(1).uniform(size=(64, 64, 3)))
    assert np.allclose(dets.obj.data, 0.5)
    assert np.allclose(dets.cls.data, 0.5)


def test_forward_determinism():
    model = det.init_weights("arch-a-v1", seed=3)
    image = np.random.default_rng(2).uniform(size=(64, 64, 3))
    a, _ = det.forward(model, image)
    b, _ = det.forward(model, image)
    assert np.array_equal(a.obj.data, b.obj.data)
    assert np.array_equal(a.cx.data, b.cx.data)


def test_indivisible_image_rejected():
    model = det.init_weights("arch-a-v1", seed=0)
    with pytest.raises(det.DetectorError, match="divisible"):
        det.forward(model, np.zeros((50, 50, 3)))


def test_select_yc_one_stage_enumeration():
    model = det.DetectorModel("arch-a-v1", {}, score_mode="one_stage")
    dets = make_dets([(0.9, 0.8), (0.2, 0.95)])
    y = det.select_yc(model, dets)
    assert y.item() == pytest.approx(1.7)


def test_select_yc_two_stage_identical_box():
    model = det.DetectorModel("arch-a-v1", {}, score_mode="two_stage")
    gt = det.GroundTruth((48.0, 48.0, 80.0, 80.0))
    dets = make_dets([(0.9, 0.6)], boxes=[(64.0, 64.0, 32.0, 32.0)])
    y = det.select_yc(model, dets, gt)
    assert y.item() == pytest.approx(1.6)


def test_select_yc_two_stage_requires_gt():
    model = det.DetectorModel("arch-a-v1", {}, score_mode="two_stage")
    dets = make_dets([(0.5, 0.5)])
    with pytest.raises(det.DetectorError, match="ground truth"):
        det.select_yc(model, dets, None)


def test_select_yc_tie_break():
    model = det.DetectorModel("arch-a-v1", {}, score_mode="one_stage")
    dets = make_dets([(0.5, 0.5)] * 4)
    with dc.Tape() as tape:
        obj = dc.Tensor(dets.obj.data, requires_grad=True)
        dets.obj = obj
        y = det.select_yc(model, dets)
        g = tape.grad(y, [obj])[0].data
    assert y.item() == pytest.approx(1.0)
    assert np.array_equal(g, [[1.0, 0.0, 0.0, 0.0]])


def test_yc_monotone_in_confidences():
    model = det.DetectorModel("arch-a-v1", {}, score_mode="one_stage")
    rng = np.random.default_rng(5)
    base_pairs = [(rng.uniform(), rng.uniform()) for _ in range(6)]
    y0 = det.select_yc(model, make_dets(base_pairs)).item()
    for i in range(6):
        for j in range(2):
            bumped = [list(p) for p in base_pairs]
            bumped[i][j] += 0.05
            y1 = det.select_yc(model, make_dets([tuple(p) for p in bumped])).item()
            assert y1 >= y0 - 1e-12


def test_iou_examples():
    assert det.iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert det.iou((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0
    assert det.iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1.0 / 7.0)
    assert det.iou((0, 0, 0, 0), (0, 0, 0, 0)) == 0.0


def test_yc_image_gradient_matches_finite_differences():
    model = det.init_weights("arch-a-v1", seed=7)
    model.score_mode = "one_stage"
    rng = np.random.default_rng(8)
    base = rng.uniform(0.2, 0.8, size=(32, 32, 3))

    def f(t):
        dets, _ = det.forward(model, dc.reshape(t, (32, 32, 3)))
        return det.select_yc(model, dets)

    # check a random subset of coordinates to keep the test quick
    with dc.Tape() as tape:
        leaf = dc.Tensor(base.copy().reshape(-1), requires_grad=True)
        y = f(leaf)
        analytic = tape.grad(y, [leaf])[0].data
    eps = 1e-5
    flat = base.reshape(-1)
    coords = rng.choice(flat.size, size=24, replace=False)
    for c in coords:
        orig = flat[c]
        flat[c] = orig + eps
        hi = f(dc.Tensor(base.reshape(-1))).item()
        flat[c] = orig - eps
        lo = f(dc.Tensor(base.reshape(-1))).item()
        flat[c] = orig
        central = (hi - lo) / (2 * eps)
        assert abs(analytic[c] - central) / (abs(central) + 1e-8) < 1e-3


def test_two_stage_yc_gradient():
    model = det.init_weights("arch-a-v1", seed=9)
    model.score_mode = "two_stage"
    rng = np.random.default_rng(10)
    base = rng.uniform(0.3, 0.7, size=(32, 32, 3))
    gt = det.GroundTruth((8.0, 8.0, 24.0, 24.0))

    def f(t):
        dets, _ = det.forward(model, dc.reshape(t, (32, 32, 3)))
        return det.select_yc(model, dets, gt)

    err = _spot_fd(f, base.reshape(-1), n=12, seed=11)
    assert err < 1e-3


def _spot_fd(f, flat_base, n, seed, eps=1e-5):
    rng = np.random.default_rng(seed)
    base = flat_base.copy()
    with dc.Tape() as tape:
        leaf = dc.Tensor(base.copy(), requires_grad=True)
        analytic = tape.grad(f(leaf), [leaf])[0].data
    worst = 0.0
    for c in rng.choice(base.size, size=n, replace=False):
        orig = base[c]
        base[c] = orig + eps
        hi = f(dc.Tensor(base)).item()
        base[c] = orig - eps
        lo = f(dc.Tensor(base)).item()
        base[c] = orig
        central = (hi - lo) / (2 * eps)
        worst = max(worst, abs(analytic[c] - central) / (abs(central) + 1e-8))
    return worst


def test_weights_roundtrip(tmp_path):
    model = det.init_weights("arch-a-v1", seed=4)
    path = tmp_path / "m.weights"
    det.save_weights(model, path)
    loaded = det.load_weights(path)
    assert loaded.arch_id == model.arch_id
    assert loaded.score_mode == model.score_mode
    for k in model.weights:
        assert np.array_equal(loaded.weights[k], model.weights[k])
    probe = np.random.default_rng(0).uniform(size=(64, 64, 3))
    a, _ = det.forward(model, probe)
    b, _ = det.forward(loaded, probe)
    assert np.array_equal(a.obj.data, b.obj.data)


def test_weights_bad_magic(tmp_path):
    path = tmp_path / "bad.weights"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
    with pytest.raises(det.DetectorError, match="bad header"):
        det.load_weights(path)


def test_weights_truncated(tmp_path):
    model = det.init_weights("arch-a-v1", seed=4)
    path = tmp_path / "m.weights"
    det.save_weights(model, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(det.DetectorError, match="truncated"):
        det.load_weights(path)


def test_weights_arch_mismatch(tmp_path):
    model = det.init_weights("arch-b-v1", seed=4)
    path = tmp_path / "m.weights"
    det.save_weights(model, path)
    with pytest.raises(det.DetectorError, match="mismatch"):
        det.load_weights(path, expect_arch="arch-a-v1")


def test_grid_coverage_stride8():
    # anchor-scale GT boxes are coverable anywhere in frame on the s8 head
    for side in (26.0, 32.0, 40.0):
        worst = det.grid_coverage_min_iou(64, 8, side, side)
        assert worst >= 0.3, f"gt side {side}: worst IoU {worst}"


def test_train_determinism_and_errors(small_scene_set):
    scenes = small_scene_set[:18]
    kwargs = dict(seed=5, epochs=2, batch_size=4, min_ap=-1.0, holdout_every=6)
    m1 = det.train_detector("arch-a-v1", scenes, **kwargs)
    m2 = det.train_detector("arch-a-v1", scenes, **kwargs)
    for k in m1.weights:
        assert np.array_equal(m1.weights[k], m2.weights[k]), k
    m3 = det.train_detector("arch-a-v1", scenes, seed=6, epochs=2, batch_size=4,
                            min_ap=-1.0, holdout_every=6)
    assert any(not np.array_equal(m1.weights[k], m3.weights[k]) for k in m1.weights)
    with pytest.raises(det.DetectorError, match="empty"):
        det.train_detector("arch-a-v1", [], seed=0, epochs=1)
    with pytest.raises(det.DetectorError, match="budget"):
        det.train_detector("arch-a-v1", scenes, seed=5, epochs=1, batch_size=4,
                           min_ap=0.999, holdout_every=6)
