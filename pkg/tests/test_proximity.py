import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from segxal.core import DepthMap, Image, ShapeMismatchError
from segxal.data import SceneSpec, generate_scene, paired_vehicle_scene
from segxal.model import UNetSegmenter
from segxal.pngio import save_depth_png
from segxal.proximity import (DepthCoverageError, DepthProvider, depth_informed_image,
                              gradcam, prox_gradcam, proximity_mask)

from conftest import flat_image


def row_ramp(h=16, w=16, top=0.0, bottom=1.0):
    col = np.linspace(top, bottom, h, dtype=np.float32)
    return DepthMap(np.repeat(col[:, None], w, axis=1))


class TestProximityMask:
    def test_linear_ramp_median_threshold(self):
        # nearness 0 at the top row, 1 at the bottom row, median at 0.5
        mask = proximity_mask(row_ramp(h=17), tau_quantile=0.5)
        soft = mask.soft.values
        assert np.all(soft[:8] == 0.0)  # strictly below the median row
        assert np.all(soft[-1] == 1.0)
        assert mask.tau_used == pytest.approx(0.5)

    def test_constant_depth_degenerates_to_ones_with_warning(self):
        with pytest.warns(UserWarning, match="constant depth"):
            mask = proximity_mask(DepthMap(np.full((8, 8), 0.7, np.float32)), 0.5)
        assert np.all(mask.soft.values == 1.0)
        assert "degenerate_depth" in mask.soft.flags

    def test_tau_zero_keeps_raw_nearness(self):
        mask = proximity_mask(row_ramp(), tau_quantile=1e-12)
        assert np.allclose(mask.soft.values, row_ramp().depth, atol=1e-6)

    def test_hard_mode_is_binary(self):
        mask = proximity_mask(row_ramp(), tau_quantile=0.5, hard=True)
        assert set(np.unique(mask.soft.values).tolist()) <= {0.0, 1.0}

    @given(arrays(np.float32, (8, 8), elements=st.floats(0, 1, width=32)),
           st.floats(0.05, 0.95))
    @settings(max_examples=40, deadline=None)
    def test_monotone_in_nearness(self, depth, tau):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            mask = proximity_mask(DepthMap(depth), tau)
        near = depth.ravel()
        soft = mask.soft.values.ravel()
        order = np.argsort(near)
        assert np.all(np.diff(soft[order]) >= -1e-6)


class TestDepthInformedImage:
    def test_all_ones_mask_is_identity(self):
        img = flat_image(16, 16, 0.8)
        mask = proximity_mask(DepthMap(np.ones((16, 16), np.float32) * 0.9), 0.5)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            mask = proximity_mask(DepthMap(np.full((16, 16), 0.9, np.float32)), 0.5)
        out = depth_informed_image(img, mask)
        assert np.array_equal(out.pixels, img.pixels)

    def test_all_zeros_mask_blacks_out(self):
        from segxal.core import HeatMap
        from segxal.proximity import ProximityMask
        img = flat_image(16, 16, 0.8)
        mask = ProximityMask(HeatMap(np.zeros((16, 16), np.float32), "proximity"), 1.0)
        assert depth_informed_image(img, mask).pixels.max() == 0.0

    def test_checkerboard_multiplies_pixelwise(self):
        from segxal.core import HeatMap
        from segxal.proximity import ProximityMask
        board = np.indices((16, 16)).sum(axis=0) % 2
        mask = ProximityMask(HeatMap(board.astype(np.float32), "proximity"), 0.5)
        out = depth_informed_image(flat_image(16, 16, 0.8), mask)
        assert np.allclose(out.pixels[board == 1], 0.8)
        assert np.allclose(out.pixels[board == 0], 0.0)

    def test_shape_mismatch_rejected(self):
        mask = proximity_mask(row_ramp(8, 8), 0.5)
        with pytest.raises(ShapeMismatchError):
            depth_informed_image(flat_image(16, 16), mask)


class TestDepthProvider:
    def test_synthetic_gt_provider(self, scene):
        dm = DepthProvider("synthetic_gt").lookup(scene)
        assert np.array_equal(dm.depth, scene.depth.depth)

    def test_file_provider_roundtrip(self, tmp_path, scene):
        save_depth_png(scene.depth, tmp_path / f"{scene.id}.depth.png")
        provider = DepthProvider("file_midas", tmp_path)
        dm = provider.lookup(scene)
        assert dm.provider == "file_midas"
        assert np.abs(dm.depth - scene.depth.depth).max() < 1.0 / 65535
        assert provider.covers([scene.id]) == []
        assert provider.covers(["missing"]) == ["missing"]

    def test_missing_file_raises(self, tmp_path, scene):
        with pytest.raises(DepthCoverageError):
            DepthProvider("file_dinov2", tmp_path).lookup(scene)


class TestGradCam:
    def test_zeroed_head_yields_flagged_zero_map(self, scene):
        est = UNetSegmenter(num_classes=5, height=64, width=128, seed=0)
        est._build()
        with torch.no_grad():
            est.net_.head.weight.zero_()
            est.net_.head.bias.zero_()
        cam = gradcam(est, scene.image, target_class=2)
        assert "all_zero" in cam.flags
        assert np.all(cam.values == 0.0)

    def test_output_range_normalized(self, trained_estimator, scene):
        cam = gradcam(trained_estimator, scene.image, target_class=1)
        if "all_zero" not in cam.flags:
            assert cam.values.min() == 0.0
            assert cam.values.max() == 1.0

    def test_saliency_concentrates_on_the_object(self, trained_estimator, scene):
        vehicle_classes = sorted(set(np.unique(scene.gt.labels)) - {0, 1})
        cls = int(vehicle_classes[0])
        cam = gradcam(trained_estimator, scene.image, target_class=cls)
        inside = scene.gt.labels == cls
        assert cam.values[inside].mean() > cam.values[~inside].mean()

    def test_z_rescaling_keeps_argmax_location(self, trained_estimator, scene):
        # positive_grad_sum and spatial_count differ by a positive factor
        a = gradcam(trained_estimator, scene.image, 1, z_mode="positive_grad_sum")
        b = gradcam(trained_estimator, scene.image, 1, z_mode="spatial_count")
        assert np.unravel_index(np.argmax(a.values), a.values.shape) == \
            np.unravel_index(np.argmax(b.values), b.values.shape)


class TestProxGradCam:
    def test_all_zero_proximity_mask_falls_back_flagged(self, trained_estimator, scene):
        from dataclasses import replace
        # a ramp topping out below 1 with a vanishing keep-quantile:
        # threshold = max(nearness), so the soft ramp is zero everywhere
        ramp = np.repeat(np.linspace(0, 0.9, 64, dtype=np.float32)[:, None], 128, axis=1)
        capped = replace(scene, depth=DepthMap(ramp))
        out = prox_gradcam(trained_estimator, capped,
                           DepthProvider("synthetic_gt"), tau_quantile=1e-12)
        assert "fallback_proximity" in out.flags
        assert np.all(out.values == 0.0)

    def test_near_vehicle_outscores_far_vehicle(self, trained_estimator):
        wins = 0
        for seed in (31, 32, 33):
            sample, near, far = paired_vehicle_scene(128, 64, 5, seed=seed)
            est = UNetSegmenter(num_classes=5, height=64, width=128,
                                epochs_per_cycle=50, learning_rate=0.05, seed=seed)
            est.fit_samples([sample])
            out = prox_gradcam(est, sample, DepthProvider("synthetic_gt"), 0.5)
            if out.values[near].mean() > out.values[far].mean():
                wins += 1
        assert wins >= 2

    def test_mass_stays_within_dilated_support(self, trained_estimator, scene):
        out = prox_gradcam(trained_estimator, scene, DepthProvider("synthetic_gt"), 0.5)
        pmask = proximity_mask(scene.depth, 0.5)
        support = pmask.soft.values > 0
        halo = ndimage.binary_dilation(support, iterations=2 ** trained_estimator.levels)
        total = out.values.sum()
        if total > 0:
            assert out.values[halo].sum() / total > 0.95

    def test_depth_weighting_concentrates_mass_on_the_near_vehicle(self):
        # same pipeline with and without depth: a constant-depth provider
        # degenerates to an all-ones mask, i.e. no proximity attenuation
        from dataclasses import replace
        from segxal.data import SceneSpec, generate_scene_with_record
        sample, record = generate_scene_with_record(SceneSpec(128, 64, 5, 1, seed=41))
        est = UNetSegmenter(num_classes=5, height=64, width=128,
                            epochs_per_cycle=50, learning_rate=0.05, seed=41)
        est.fit_samples([sample])
        region = np.zeros((64, 128), dtype=bool)
        obj = record[0]
        region[obj.y0:obj.y1, obj.x0:obj.x1] = True
        with_depth = prox_gradcam(est, sample, DepthProvider("synthetic_gt"), 0.5)
        flat = replace(sample, depth=DepthMap(np.full((64, 128), 0.5, np.float32)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            without_depth = prox_gradcam(est, flat, DepthProvider("synthetic_gt"), 0.5)
        ratio_with = with_depth.values[region].sum() / max(with_depth.values.sum(), 1e-9)
        ratio_without = without_depth.values[region].sum() / max(without_depth.values.sum(), 1e-9)
        assert ratio_with >= ratio_without
