import numpy as np
import pytest

from mmcs.core import RngStream
from mmcs.diameter import (
    DiameterStats,
    dataset_mean_diameter,
    inference_rescale,
    instance_diameter,
    train_rescale,
)
from mmcs.errors import DataError, EmptyDatasetError, ScaleRangeError
from mmcs.ingest import SynthSpec, synth_blobs


class TestInstanceDiameter:
    def test_area_one(self):
        assert instance_diameter(1) == pytest.approx(1.12838, abs=1e-5)

    def test_area_25(self):
        assert instance_diameter(25) == pytest.approx(5.64190, abs=1e-5)

    def test_zero_area_rejected(self):
        with pytest.raises(DataError):
            instance_diameter(0)

    def test_strictly_increasing(self):
        areas = np.arange(1, 200)
        d = [instance_diameter(a) for a in areas]
        assert all(b > a for a, b in zip(d, d[1:]))


class TestDatasetMean:
    def test_two_equal_instances(self):
        m = np.zeros((10, 10), np.int32)
        m[0:5, 0:5] = 1  # area 25
        m2 = np.zeros((10, 10), np.int32)
        m2[0:5, 0:5] = 1  # area 25
        stats = dataset_mean_diameter([m, m2])
        assert stats.mean == pytest.approx(5.64190, abs=1e-5)

    def test_pooled_mean_of_mixed_areas(self):
        m = np.zeros((10, 10), np.int32)
        m[0, 0] = 1  # area 1
        m[5:10, 5:10] = 2  # area 25
        stats = dataset_mean_diameter([m])
        assert stats.mean == pytest.approx(3.38514, abs=1e-5)

    def test_empty_dataset_rejected(self):
        with pytest.raises(EmptyDatasetError):
            dataset_mean_diameter([np.zeros((8, 8), np.int32)])

    def test_permutation_invariant(self):
        rng = np.random.default_rng(0)
        masks = []
        for _ in range(4):
            m = np.zeros((16, 16), np.int32)
            m[1:5, 1:5] = 1
            m[8 : 8 + rng.integers(2, 7), 8:12] = 2
            masks.append(m)
        a = dataset_mean_diameter(masks).mean
        b = dataset_mean_diameter(masks[::-1]).mean
        assert a == b


class TestTrainRescale:
    def test_identity_when_mean_equals_target(self):
        img = np.random.default_rng(1).random((12, 12, 2)).astype(np.float32)
        m = np.zeros((12, 12), np.int32)
        m[2:6, 2:6] = 1
        stats = DiameterStats((30.0,), 30.0, 30.0)
        out_img, out_mask, scale = train_rescale(img, m, stats, 30.0)
        assert scale == 1.0
        assert np.array_equal(out_img, img)
        assert np.array_equal(out_mask, m)

    def test_doubling(self):
        img = np.zeros((10, 14, 2), np.float32)
        m = np.zeros((10, 14), np.int32)
        m[0:4, 0:4] = 1
        stats = DiameterStats((20.0,), 20.0, 20.0)
        out_img, out_mask, scale = train_rescale(img, m, stats, 40.0)
        assert scale == 2.0
        assert out_img.shape == (20, 28, 2)
        assert out_mask.shape == (20, 28)

    def test_range_guard(self):
        img = np.zeros((8, 8, 2), np.float32)
        m = np.ones((8, 8), np.int32)
        stats = DiameterStats((40.0,), 40.0, 40.0)
        with pytest.raises(ScaleRangeError):
            train_rescale(img, m, stats, 1.0)

    def test_rescale_hits_target_within_5pct(self):
        # instances >= 8 px diameter (radius >= 4): quantization stays small
        spec = SynthSpec(image_size=96, count_range=(2, 4), radius_range=(4.0, 8.0))
        pairs = synth_blobs(spec, RngStream(31), 8)
        stats = dataset_mean_diameter([m for _, m in pairs])
        rescaled = [train_rescale(i, m, stats, 30.0)[1] for i, m in pairs]
        measured = dataset_mean_diameter(rescaled).mean
        assert abs(measured - 30.0) / 30.0 < 0.05


class TestInferenceRescale:
    def test_default_matching_diameters(self):
        img = np.zeros((8, 8, 2), np.float32)
        out, scale = inference_rescale(img, 30.0, 30.0)
        assert scale == 1.0 and out.shape == img.shape

    def test_ratio(self):
        img = np.zeros((16, 16, 2), np.float32)
        out, scale = inference_rescale(img, 40.0, 30.0)
        assert scale == 0.75
        assert out.shape == (12, 12, 2)

    def test_zero_diameter_rejected(self):
        with pytest.raises(DataError):
            inference_rescale(np.zeros((4, 4, 2), np.float32), 0.0, 30.0)

    def test_round_trip_dims_exact(self):
        img = np.random.default_rng(2).random((37, 23, 2)).astype(np.float32)
        out, scale = inference_rescale(img, 17.0, 30.0)
        from mmcs.core import resize_nearest

        mask = np.ones(out.shape[:2], np.int32)
        back = resize_nearest(mask, img.shape[0], img.shape[1])
        assert back.shape == img.shape[:2]
