"""Detection head, target rendering, decoding, and the fusion gate."""

import math

import numpy as np
import pytest

from panodet.autograd import optim, ops
from panodet.autograd.tensor import Tensor
from panodet.boxes import (Box3D, boxes_from_array, boxes_to_array,
                           load_boxes_csv, save_boxes_csv, wrap_angle)
from panodet.detect_head import (DetectHead, FusionAttention, decode_boxes,
                                 detection_loss, make_targets)
from panodet.geometry import GridSpec, RVSpec

from helpers import fd_gradcheck, module_gradcheck

GRID = GridSpec(x_min=-16.0, x_max=16.0, y_min=-16.0, y_max=16.0,
                z_min=-4.0, z_max=4.0, h=64, w=64, z=16)  # 0.5 m cells


def fov_cloud(rng, n, rmin=3.0, rmax=12.0):
    az = rng.uniform(-np.pi, np.pi, n)
    incl = rng.uniform(np.deg2rad(-24.0), np.deg2rad(2.5), n)
    r = rng.uniform(rmin, rmax, n)
    x = r * np.cos(incl) * np.cos(az)
    y = r * np.cos(incl) * np.sin(az)
    z = r * np.sin(incl)
    return np.stack([x, y, z, np.ones(n)], axis=1)


class TestBox3D:
    def test_sizes_must_be_positive(self):
        with pytest.raises(ValueError):
            Box3D(0, 0, 0, 1.0, -1.0, 1.0, 0.0)

    def test_yaw_normalized_on_construction(self):
        assert Box3D(0, 0, 0, 1, 1, 1, np.pi).yaw == -np.pi
        assert Box3D(0, 0, 0, 1, 1, 1, 3 * np.pi).yaw == pytest.approx(-np.pi)
        b = Box3D(0, 0, 0, 1, 1, 1, -0.5)
        assert b.yaw == -0.5

    def test_wrap_angle_range(self):
        a = np.linspace(-10.0, 10.0, 401)
        w = wrap_angle(a)
        assert ((w >= -np.pi) & (w < np.pi)).all()
        assert np.allclose(np.sin(w), np.sin(a), atol=1e-12)
        assert np.allclose(np.cos(w), np.cos(a), atol=1e-12)

    def test_array_round_trip(self):
        boxes = [Box3D(1, 2, 3, 4, 5, 6, 0.5, 2, 0.9),
                 Box3D(-1, 0, 1, 2, 2, 2, -1.0)]
        back = boxes_from_array(boxes_to_array(boxes))
        assert back == boxes

    def test_csv_round_trip(self, tmp_path):
        rows = [("s0", Box3D(1.25, -2.5, 0.75, 4.2, 1.9, 1.6, 0.31, 1, 0.875)),
                ("s1", Box3D(0.1, 0.2, 0.3, 1, 1, 1, -2.0, 0, 1.0))]
        path = tmp_path / "dets.csv"
        save_boxes_csv(path, rows)
        back = load_boxes_csv(path)
        assert back == rows


class TestHeadForward:
    def test_shape_contract(self):
        rng = np.random.default_rng(0)
        head = DetectHead(3, c_in=5, c_trunk=8, rng=rng)
        out = head(Tensor(rng.standard_normal((5, 16, 16)).astype(np.float32)))
        assert out.heatmap.shape == (3, 16, 16)
        stack = np.concatenate([out.offset.data, out.z.data,
                                out.logsize.data, out.yaw.data], axis=0)
        assert stack.shape == (8, 16, 16)
        assert ((out.heatmap.data > 0) & (out.heatmap.data < 1)).all()

    def test_zero_input_gives_bias_maps(self):
        head = DetectHead(2, c_in=3, c_trunk=4, rng=np.random.default_rng(1))
        head.eval()
        out = head(Tensor(np.zeros((3, 8, 8), dtype=np.float32)))
        want = 1.0 / (1.0 + np.exp(2.19))
        assert np.allclose(out.heatmap.data, want, atol=1e-6)
        for m in (out.offset, out.z, out.logsize, out.yaw):
            assert not m.data.any()

    def test_gradients(self):
        rng = np.random.default_rng(2)
        head = DetectHead(2, c_in=3, c_trunk=4, rng=rng)
        head.cast(np.float64)
        for _, p in head.named_parameters():
            p.data = p.data + rng.normal(scale=0.05, size=p.shape)
        x = Tensor(rng.standard_normal((3, 8, 8)))
        boxes = [Box3D(2.3, -5.1, 0.4, 3.7, 1.8, 1.5, 0.7, cls=0),
                 Box3D(-9.6, 7.2, -0.2, 1.1, 0.9, 1.7, -2.1, cls=1)]
        targets, mask, _ = make_targets(boxes, GRID, n_classes=2)

        def make_loss():
            return detection_loss(head(x), targets, mask)

        module_gradcheck(make_loss, head, tol=1e-3)


class TestFusionAttention:
    def test_channel_contract_and_uniform_scores(self):
        rng = np.random.default_rng(3)
        spec = RVSpec(h=8, w=16)
        pts = fov_cloud(rng, 60)
        fus = FusionAttention(3, thing_classes=(1, 2), rng=rng)
        bev = Tensor(rng.standard_normal((3, 8, 8)).astype(np.float32))
        logits = Tensor(np.zeros((4, 8, 16), dtype=np.float32))
        out = fus(bev, logits, pts, spec, GRID)
        assert out.shape == (5, 8, 8)
        assert np.isfinite(out.data).all()

        s = fus.foreground_scores(logits, pts, spec, GRID).data
        from panodet.geometry import rv_pixel_coords
        valid = rv_pixel_coords(pts, spec)[0]
        inside, _, iy, ix = GRID.bin_points(pts)
        occupied = np.zeros((8, 8), dtype=bool)
        occupied[iy[valid[inside]] // 8, ix[valid[inside]] // 8] = True
        # zero logits -> per-point softmax is exactly uniform
        assert np.array_equal(s[0] != 0, occupied)
        assert np.all(s[:, occupied] == 0.25)
        assert not s[:, ~occupied].any()

    def test_no_points_gives_zero_scores(self):
        rng = np.random.default_rng(4)
        fus = FusionAttention(2, thing_classes=(1,), rng=rng)
        spec = RVSpec(h=8, w=16)
        pts = np.zeros((0, 4))
        s = fus.foreground_scores(
            Tensor(np.zeros((3, 8, 16), dtype=np.float32)), pts, spec, GRID)
        assert s.shape == (1, 8, 8)
        assert not s.data.any()

    def test_gradients(self):
        rng = np.random.default_rng(5)
        spec = RVSpec(h=8, w=16)
        pts = fov_cloud(rng, 50)
        fus = FusionAttention(3, thing_classes=(1, 2), rng=rng)
        fus.cast(np.float64)
        for _, p in fus.named_parameters():
            p.data = p.data + rng.normal(scale=0.05, size=p.shape)
        bev = Tensor(rng.standard_normal((3, 8, 8)))
        logits_np = rng.standard_normal((3, 8, 16))
        w = rng.standard_normal((5, 8, 8))

        def make_loss():
            return ops.tensor_sum(fus(bev, Tensor(logits_np), pts, spec, GRID) * w)

        module_gradcheck(make_loss, fus, tol=1e-3)

        # gradients also reach the semantic logits (the dual-task link)
        def f(lg):
            return ops.tensor_sum(fus(bev, lg, pts, spec, GRID) * w)

        fd_gradcheck(f, [logits_np], tol=1e-3)


class TestMakeTargets:
    def test_unit_peak_at_center_cell(self):
        b = Box3D(1.3, -2.7, 0.5, 3.1, 1.7, 1.4, 0.4, cls=1)
        t, mask, skipped = make_targets([b], GRID, n_classes=3)
        assert skipped == 0
        iy, ix = np.argwhere(mask)[0]
        assert t.heatmap[1, iy, ix] == 1.0
        assert t.heatmap[(0, 2), :, :].max() == 0.0
        # regression values live at the center cell only
        assert mask.sum() == 1
        off_cells = np.argwhere(t.offset.any(axis=0))
        assert off_cells.tolist() == [[iy, ix]]
        assert t.z[0, iy, ix] == b.z
        assert np.allclose(np.exp(t.logsize[:, iy, ix]), (b.l, b.w, b.h),
                           rtol=1e-12)
        assert np.allclose(t.yaw[:, iy, ix],
                           (math.sin(b.yaw), math.cos(b.yaw)))

    def test_two_distant_boxes_two_unit_peaks(self):
        boxes = [Box3D(-10.0, -10.0, 0, 2, 2, 2, 0.0, cls=0),
                 Box3D(10.0, 10.0, 0, 2, 2, 2, 0.0, cls=0)]
        t, mask, _ = make_targets(boxes, GRID, n_classes=1)
        assert mask.sum() == 2
        assert (t.heatmap == 1.0).sum() == 2

    def test_gaussian_matches_closed_form(self):
        b = Box3D(0.9, 0.9, 0, 12.0, 12.0, 2.0, 0.0, cls=0)  # r = 2 in cells
        t, mask, _ = make_targets([b], GRID, n_classes=1)
        iy, ix = np.argwhere(mask)[0]
        r = 2
        sigma = (2 * r + 1) / 6.0
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                want = math.exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma))
                got = t.heatmap[0, iy + dy, ix + dx]
                assert got == pytest.approx(want, rel=1e-12)
        # nothing outside the splat window
        win = np.zeros_like(t.heatmap[0], dtype=bool)
        win[iy - r:iy + r + 1, ix - r:ix + r + 1] = True
        assert not t.heatmap[0][~win].any()

    def test_outside_box_skipped_with_count(self):
        boxes = [Box3D(100.0, 0.0, 0, 2, 2, 2, 0.0),
                 Box3D(1.0, 1.0, 0, 2, 2, 2, 0.0)]
        t, mask, skipped = make_targets(boxes, GRID, n_classes=1)
        assert skipped == 1
        assert mask.sum() == 1

    def test_bad_class_rejected(self):
        with pytest.raises(ValueError):
            make_targets([Box3D(0, 0, 0, 1, 1, 1, 0, cls=5)], GRID, n_classes=2)


class TestDecode:
    def test_empty_heatmap_empty_set(self):
        t, _, _ = make_targets([], GRID, n_classes=2)
        assert decode_boxes(t, GRID) == []

    def test_equal_adjacent_peaks_keep_one(self):
        t, _, _ = make_targets([], GRID, n_classes=1)
        t.heatmap[0, 3, 4] = 0.9
        t.heatmap[0, 3, 5] = 0.9
        dets = decode_boxes(t, GRID, score_thresh=0.1)
        assert len(dets) == 1
        # the earlier cell in scan order wins; its center cell is (3, 4)
        assert dets[0].y == GRID.y_min + 3 * GRID.dy * 8
        assert dets[0].x == GRID.x_min + 4 * GRID.dx * 8

    def test_threshold_monotonicity(self):
        rng = np.random.default_rng(6)
        t, _, _ = make_targets([], GRID, n_classes=2)
        t.heatmap[:] = rng.uniform(size=t.heatmap.shape)
        counts = [len(decode_boxes(t, GRID, score_thresh=th, max_dets=1000))
                  for th in np.linspace(0.0, 1.0, 21)]
        assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_max_dets_cap(self):
        rng = np.random.default_rng(7)
        t, _, _ = make_targets([], GRID, n_classes=2)
        t.heatmap[:] = rng.uniform(size=t.heatmap.shape)
        assert len(decode_boxes(t, GRID, score_thresh=0.0, max_dets=5)) == 5

    def test_round_trip_100_sets(self):
        # acceptance: decode(make_targets(B)) = B for non-overlapping boxes.
        # Centers are drawn on a 2^-20-cell lattice so that, with the
        # power-of-two cell pitch, every target-transform step is exact in
        # float64 and center recovery is bitwise.
        rng = np.random.default_rng(8)
        cells = [(y, x) for y in range(8) for x in range(8)]
        for _ in range(100):
            n = int(rng.integers(1, 7))
            order = rng.permutation(len(cells))
            picked = []
            for j in order:
                cy, cx = cells[j]
                if all(max(abs(cy - py), abs(cx - px)) >= 2
                       for py, px in picked):
                    picked.append((cy, cx))
                if len(picked) == n:
                    break
            boxes = []
            for cy, cx in picked:
                fy, fx = rng.integers(0, 2 ** 20, size=2) / 2.0 ** 20
                boxes.append(Box3D(
                    GRID.x_min + (cx + fx) * 4.0,
                    GRID.y_min + (cy + fy) * 4.0,
                    float(rng.uniform(-3, 3)),
                    float(rng.uniform(0.5, 11.0)),
                    float(rng.uniform(0.5, 11.0)),
                    float(rng.uniform(0.5, 3.0)),
                    float(rng.uniform(-np.pi, np.pi)),
                    cls=int(rng.integers(0, 3))))
            t, mask, skipped = make_targets(boxes, GRID, n_classes=3)
            assert skipped == 0
            dets = decode_boxes(t, GRID, score_thresh=0.5)
            assert len(dets) == len(boxes)
            key = lambda b: (b.cls, b.x, b.y)
            for got, want in zip(sorted(dets, key=key), sorted(boxes, key=key)):
                assert got.score == 1.0
                assert got.cls == want.cls
                assert (got.x, got.y, got.z) == (want.x, want.y, want.z)
                assert np.allclose((got.l, got.w, got.h),
                                   (want.l, want.w, want.h), rtol=1e-5)
                assert abs(wrap_angle(got.yaw - want.yaw)) < 1e-5


class TestDetectionLoss:
    def test_perfect_prediction_near_zero(self):
        boxes = [Box3D(2.0, -3.0, 0.5, 3.0, 1.5, 1.5, 0.3, cls=0)]
        t, mask, _ = make_targets(boxes, GRID, n_classes=2)
        pred_hm = np.where(t.heatmap >= 1.0, 1.0, 0.0)
        out_like = type(t)(Tensor(pred_hm), Tensor(t.offset), Tensor(t.z),
                           Tensor(t.logsize), Tensor(t.yaw))
        loss = detection_loss(out_like, t, mask)
        assert abs(loss.item()) < 1e-9

    def test_no_positives_heatmap_only(self):
        t, mask, _ = make_targets([], GRID, n_classes=2)
        rng = np.random.default_rng(9)
        hm = Tensor(rng.uniform(0.1, 0.9, size=t.heatmap.shape))
        reg = [Tensor(rng.standard_normal((c, 8, 8))) for c in (2, 1, 3, 2)]
        out_like = type(t)(hm, *reg)
        loss = detection_loss(out_like, t, mask)
        from panodet.autograd.losses import focal_heatmap_loss
        assert loss.item() == pytest.approx(
            focal_heatmap_loss(hm, t.heatmap).item(), rel=1e-12)

    def test_overfits_one_scene(self):
        rng = np.random.default_rng(10)
        head = DetectHead(2, c_in=4, c_trunk=8, rng=rng)
        x = Tensor(rng.standard_normal((4, 8, 8)).astype(np.float32))
        boxes = [Box3D(2.3, -5.1, 0.4, 3.7, 1.8, 1.5, 0.7, cls=0),
                 Box3D(-9.6, 7.2, -0.2, 1.1, 0.9, 1.7, -2.1, cls=1)]
        targets, mask, _ = make_targets(boxes, GRID, n_classes=2)
        opt = optim.Adam(head.named_parameters(), lr=1e-2)
        losses = []
        for _ in range(50):
            opt.zero_grad()
            loss = detection_loss(head(x), targets, mask)
            losses.append(loss.item())
            loss.backward()
            opt.step()
        assert losses[-1] < 0.5 * losses[0]
