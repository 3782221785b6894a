import numpy as np
import pytest

from parttrack import autodiff as ad
from parttrack import geometry as geo
from parttrack.autodiff import RngState, Tensor
from parttrack.geometry import BBox, DegenerateBoxWarning, EstimationError, Frame


class TestPartCenters:
    def test_single_cell(self):
        grid = geo.part_centers(1, 1, 16)
        np.testing.assert_array_equal(grid.centers, [[8.0, 8.0]])

    def test_two_by_two(self):
        grid = geo.part_centers(2, 2, 16)
        np.testing.assert_array_equal(
            grid.centers, [[8, 8], [24, 8], [8, 24], [24, 24]])

    def test_eight_by_eight(self):
        grid = geo.part_centers(8, 8, 16)
        assert grid.n == 64
        np.testing.assert_array_equal(grid.centers[-1], [120.0, 120.0])

    def test_preconditions(self):
        with pytest.raises(ValueError):
            geo.part_centers(0, 2, 16)


class TestTargetMask:
    def test_full_cover(self):
        grid = geo.part_centers(2, 2, 16)
        mask = geo.target_mask(grid, BBox(16, 16, 32, 32))
        np.testing.assert_array_equal(mask.values, [1, 1, 1, 1])
        assert mask.n_target == 4

    def test_single_center(self):
        grid = geo.part_centers(2, 2, 16)
        mask = geo.target_mask(grid, BBox(8, 8, 4, 4))
        np.testing.assert_array_equal(mask.values, [1, 0, 0, 0])

    def test_outside_gives_zeros_and_warns(self):
        grid = geo.part_centers(2, 2, 16)
        with pytest.warns(DegenerateBoxWarning):
            mask = geo.target_mask(grid, BBox(500, 500, 10, 10))
        assert mask.n_target == 0

    def test_zero_area_warns(self):
        grid = geo.part_centers(2, 2, 16)
        with pytest.warns(DegenerateBoxWarning):
            mask = geo.target_mask(grid, BBox(8, 8, 0, 0))
        assert mask.n_target == 0

    def test_boundary_counts_inside(self):
        grid = geo.part_centers(2, 2, 16)
        mask = geo.target_mask(grid, BBox(12, 8, 8, 2))  # x-range [8, 16]
        np.testing.assert_array_equal(mask.values, [1, 0, 0, 0])

    def test_stride_shift_moves_mask_one_cell(self):
        grid = geo.part_centers(4, 4, 16)
        base = geo.target_mask(grid, BBox(24, 24, 18, 18)).values.reshape(4, 4)
        moved = geo.target_mask(grid, BBox(40, 24, 18, 18)).values.reshape(4, 4)
        np.testing.assert_array_equal(np.roll(base, 1, axis=1), moved)


class TestEstimateBBox:
    def test_zero_variance(self):
        locs = Tensor(np.full((3, 2), 0.5))
        out = geo.estimate_bbox(locs, geo.TargetMask(np.ones(3)), sigma=3.0)
        np.testing.assert_array_equal(out.data, [0.5, 0.5, 0.0, 0.0])

    def test_four_corners(self):
        # corners of [0.25, 0.75]^2: std 0.25 per axis, w = sqrt(12)*0.25
        locs = Tensor(np.array([[0.25, 0.25], [0.75, 0.25],
                                [0.25, 0.75], [0.75, 0.75]]))
        out = geo.estimate_bbox(locs, geo.TargetMask(np.ones(4)),
                                sigma=np.sqrt(12.0))
        np.testing.assert_allclose(out.data, [0.5, 0.5, 0.8660254, 0.8660254],
                                   atol=1e-7)

    def test_dense_uniform_grid_recovers_box(self):
        # parts at the cell centers of a 12x12 grid filling the box
        k = 12
        xs = 0.3 + (np.arange(k) + 0.5) * (0.4 / k)
        ys = 0.4 + (np.arange(k) + 0.5) * (0.2 / k)
        gx, gy = np.meshgrid(xs, ys)
        locs = np.stack([gx.ravel(), gy.ravel()], axis=1)
        out = geo.estimate_bbox(Tensor(locs), geo.TargetMask(np.ones(len(locs))),
                                sigma=np.sqrt(12.0))
        cx, cy, w, h = out.data
        # oracle: population statistics of the explicit grid
        np.testing.assert_allclose([cx, cy], locs.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose([w, h],
                                   np.sqrt(12.0) * locs.std(axis=0), atol=1e-12)
        assert abs(cx - 0.5) < 0.05 * 0.4 and abs(cy - 0.5) < 0.05 * 0.2
        assert abs(w - 0.4) / 0.4 < 0.05
        assert abs(h - 0.2) / 0.2 < 0.05

    def test_literal_formula_divides_by_count(self):
        locs = Tensor(np.array([[0.25, 0.25], [0.75, 0.25],
                                [0.25, 0.75], [0.75, 0.75]]))
        mask = geo.TargetMask(np.ones(4))
        std_form = geo.estimate_bbox(locs, mask, sigma=3.0, formula="std")
        literal = geo.estimate_bbox(locs, mask, sigma=3.0, formula="literal")
        # literal: (3/4)*sqrt(4*0.0625) = 0.375; std: 3*0.25 = 0.75
        np.testing.assert_allclose(std_form.data[2:], [0.75, 0.75])
        np.testing.assert_allclose(literal.data[2:], [0.375, 0.375])

    def test_mask_excludes_parts(self):
        locs = Tensor(np.array([[0.2, 0.2], [0.4, 0.4], [99.0, 99.0]]))
        out = geo.estimate_bbox(locs, geo.TargetMask(np.array([1.0, 1.0, 0.0])),
                                sigma=1.0)
        np.testing.assert_allclose(out.data[:2], [0.3, 0.3])

    def test_empty_mask_raises(self):
        with pytest.raises(EstimationError):
            geo.estimate_bbox(Tensor(np.zeros((2, 2))),
                              geo.TargetMask(np.zeros(2)), sigma=3.0)

    def test_translation_equivariance(self):
        rng = RngState(1)
        locs = rng.uniform(0.2, 0.8, size=(6, 2))
        mask = geo.TargetMask(np.array([1, 0, 1, 1, 0, 1], dtype=float))
        a = geo.estimate_bbox(Tensor(locs), mask, sigma=3.0).data
        b = geo.estimate_bbox(Tensor(locs + [0.07, -0.03]), mask, sigma=3.0).data
        np.testing.assert_allclose(b[:2], a[:2] + [0.07, -0.03], atol=1e-12)
        np.testing.assert_allclose(b[2:], a[2:], atol=1e-12)

    def test_scale_equivariance_about_mean(self):
        rng = RngState(2)
        locs = rng.uniform(0.2, 0.8, size=(5, 2))
        mask = geo.TargetMask(np.ones(5))
        a = geo.estimate_bbox(Tensor(locs), mask, sigma=3.0).data
        center = (mask.values[:, None] * locs).sum(0) / 5
        scaled = center + 2.5 * (locs - center)
        b = geo.estimate_bbox(Tensor(scaled), mask, sigma=3.0).data
        np.testing.assert_allclose(b[2:], 2.5 * a[2:], atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = RngState(3)
        locs = Tensor(rng.uniform(0.1, 0.9, size=(6, 2)))
        mask = geo.TargetMask(np.array([1, 1, 0, 1, 1, 1], dtype=float))
        w = ad.constant(np.array([0.3, -0.2, 0.5, 0.7]))

        def f(x):
            return ad.sum_(ad.mul(geo.estimate_bbox(x, mask, sigma=3.0), w))

        assert ad.grad_check(f, locs, eps=1e-5) < 1e-5


class TestIoU:
    def test_identical(self):
        b = BBox(3, 4, 2, 2)
        assert geo.iou(b, b) == 1.0

    def test_half_offset_unit_boxes(self):
        a = BBox.from_corners(0, 0, 1, 1)
        b = BBox.from_corners(0.5, 0, 1.5, 1)
        assert abs(geo.iou(a, b) - 1 / 3) < 1e-12

    def test_disjoint(self):
        assert geo.iou(BBox(0, 0, 1, 1), BBox(10, 10, 1, 1)) == 0.0

    def test_both_degenerate(self):
        assert geo.iou(BBox(0, 0, 0, 0), BBox(1, 1, 0, 0)) == 0.0

    def test_frame_mismatch(self):
        with pytest.raises(ValueError):
            geo.iou(BBox(0, 0, 1, 1), BBox(0, 0, 1, 1, Frame.NORMALIZED))


class TestGIoU:
    def test_identical(self):
        b = BBox(1, 1, 3, 2)
        assert geo.giou(b, b) == 1.0

    def test_half_offset_equals_iou(self):
        # hull equals union for axis-aligned flush boxes
        a = BBox.from_corners(0, 0, 1, 1)
        b = BBox.from_corners(0.5, 0, 1.5, 1)
        assert abs(geo.giou(a, b) - 1 / 3) < 1e-12

    def test_far_apart_limit(self):
        for gap in (3.0, 30.0, 300.0):
            a = BBox.from_corners(0, 0, 1, 1)
            b = BBox.from_corners(gap, 0, gap + 1, 1)
            hull = (gap + 1) * 1.0
            assert abs(geo.giou(a, b) - (-(hull - 2) / hull)) < 1e-12
        assert geo.giou(a, b) > -1.0

    def test_random_pairs_property_suite(self):
        rng = RngState(123)
        vals = rng.uniform(size=(10_000, 8))
        for row in vals:
            a = BBox(row[0] * 10, row[1] * 10, row[2] * 5 + 1e-3, row[3] * 5 + 1e-3)
            b = BBox(row[4] * 10, row[5] * 10, row[6] * 5 + 1e-3, row[7] * 5 + 1e-3)
            g, g_sym = geo.giou(a, b), geo.giou(b, a)
            assert g == pytest.approx(g_sym, abs=1e-12)
            assert g <= geo.iou(a, b) + 1e-12
            assert -1.0 <= g <= 1.0
            assert geo.giou(a, a) == 1.0

    def test_tensor_giou_matches_float_oracle(self):
        rng = RngState(9)
        for _ in range(200):
            arr = rng.uniform(size=8)
            a = np.array([arr[0], arr[1], arr[2] + 0.05, arr[3] + 0.05])
            b = np.array([arr[4], arr[5], arr[6] + 0.05, arr[7] + 0.05])
            want = geo.giou(BBox(*a), BBox(*b))
            got = float(geo.giou_tensor(Tensor(a), Tensor(b)).data)
            assert got == pytest.approx(want, abs=1e-9)


class TestCropRegion:
    def test_constant_image_inside(self):
        img = np.full((40, 40, 3), 0.7)
        patch = geo.crop_region(img, (20, 20), 16, 8)
        np.testing.assert_allclose(patch, 0.7, atol=1e-12)

    def test_outside_padded_with_channel_mean(self):
        img = np.zeros((20, 20, 3))
        img[:, :, 0] = 0.4
        img[:, :, 1] = 0.8
        patch = geo.crop_region(img, (0, 10), 20, 20)
        # left half of the crop lies outside -> per-channel mean
        np.testing.assert_allclose(patch[:, :8, 0], 0.4, atol=1e-12)
        np.testing.assert_allclose(patch[:, :8, 1], 0.8, atol=1e-12)
        np.testing.assert_allclose(patch[:, 12:, 0], 0.4, atol=1e-12)

    def test_identity_crop(self):
        rng = RngState(4)
        img = rng.uniform(size=(16, 16, 3))
        patch = geo.crop_region(img, (8, 8), 16, 16)
        np.testing.assert_allclose(patch, img, atol=1e-9)

    def test_empty_frame_rejected(self):
        with pytest.raises(ValueError):
            geo.crop_region(np.zeros((0, 0, 3)), (0, 0), 4, 4)

    def test_bilinear_downscale_averages(self):
        img = np.zeros((4, 4, 1))
        img[:, 2:] = 1.0
        patch = geo.crop_region(img, (2, 2), 4, 2)
        np.testing.assert_allclose(patch[:, 0, 0], 0.0, atol=1e-12)
        np.testing.assert_allclose(patch[:, 1, 0], 1.0, atol=1e-12)
