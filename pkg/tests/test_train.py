import numpy as np
import pytest

from equivox.field import LabelVolume, VoxelField
from equivox.net import UnetConfig, build_unet, forward
from equivox.so3 import scalar_layout
from equivox.train import (
    ADAM_LR,
    AdamState,
    TrainConfig,
    adam_step,
    dice_score,
    predict_volume,
    softmax_cross_entropy,
    train,
)

TINY = dict(levels=2, top_mults=(2, 1, 1), kernel_size=3, radial_count=2,
            in_channels=1, n_classes=3, seed=3)


class TestSoftmaxCrossEntropy:
    def test_uniform_two_class(self):
        logits = VoxelField(scalar_layout(2), np.zeros((2, 2, 2, 2)))
        labels = LabelVolume(np.zeros((2, 2, 2), dtype=np.int32), 2)
        assert softmax_cross_entropy(logits, labels) == pytest.approx(np.log(2.0))

    def test_saturated(self):
        data = np.zeros((2, 1, 1, 1))
        data[0] = 20.0
        data[1] = -20.0
        logits = VoxelField(scalar_layout(2), data)
        labels = LabelVolume(np.zeros((1, 1, 1), dtype=np.int32), 2)
        assert softmax_cross_entropy(logits, labels) <= 1e-8

    def test_direct_value(self):
        data = np.array([1.0, 0.0]).reshape(2, 1, 1, 1)
        logits = VoxelField(scalar_layout(2), data)
        labels = LabelVolume(np.zeros((1, 1, 1), dtype=np.int32), 2)
        expected = -np.log(np.e / (np.e + 1.0))
        assert softmax_cross_entropy(logits, labels) == pytest.approx(expected)

    def test_class_mismatch_rejected(self):
        logits = VoxelField(scalar_layout(2), np.zeros((2, 2, 2, 2)))
        labels = LabelVolume(np.zeros((2, 2, 2), dtype=np.int32), 3)
        with pytest.raises(ValueError):
            softmax_cross_entropy(logits, labels)


class TestAdam:
    def test_default_lr_is_paper_value(self):
        assert AdamState().lr == ADAM_LR == 5e-3

    def test_zero_gradients_leave_params(self):
        from equivox.net import ParameterStore

        params = ParameterStore({"w": np.ones(4, dtype=np.float32)})
        state = AdamState()
        adam_step(params, {"w": np.zeros(4)}, state)
        np.testing.assert_array_equal(params["w"], np.ones(4))

    def test_first_step_magnitude(self):
        from equivox.net import ParameterStore

        params = ParameterStore({"w": np.zeros(1, dtype=np.float64)})
        state = AdamState()
        adam_step(params, {"w": np.ones(1)}, state)
        # bias-corrected first step is -lr / (1 + eps)
        assert params["w"][0] == pytest.approx(-state.lr, rel=1e-6)

    def test_shape_mismatch_rejected(self):
        from equivox.net import ParameterStore

        params = ParameterStore({"w": np.zeros(2, dtype=np.float32)})
        with pytest.raises(ValueError):
            adam_step(params, {"w": np.zeros(3)}, AdamState())


class TestDice:
    def _lab(self, arr):
        return LabelVolume(np.asarray(arr, dtype=np.int32), 3)

    def test_identical_masks(self):
        rng = np.random.default_rng(0)
        lab = self._lab(rng.integers(0, 3, size=(4, 4, 4)))
        assert dice_score(lab, lab, 1) == 1.0

    def test_disjoint_masks(self):
        a = np.zeros((4, 4, 4), dtype=np.int32)
        b = np.zeros((4, 4, 4), dtype=np.int32)
        a[0, 0, 0] = 1
        b[1, 1, 1] = 1
        assert dice_score(self._lab(a), self._lab(b), 1) == 0.0

    def test_offset_cubes(self):
        a = np.zeros((6, 6, 6), dtype=np.int32)
        b = np.zeros((6, 6, 6), dtype=np.int32)
        a[1:3, 1:3, 1:3] = 1
        b[2:4, 1:3, 1:3] = 1
        assert dice_score(self._lab(a), self._lab(b), 1) == pytest.approx(0.5)

    def test_empty_empty_is_one(self):
        z = self._lab(np.zeros((3, 3, 3)))
        assert dice_score(z, z, 2) == 1.0

    def test_symmetry_and_permutation_invariance(self):
        rng = np.random.default_rng(1)
        a = rng.integers(0, 3, size=(4, 4, 4)).astype(np.int32)
        b = rng.integers(0, 3, size=(4, 4, 4)).astype(np.int32)
        la, lb = self._lab(a), self._lab(b)
        assert dice_score(la, lb, 1) == dice_score(lb, la, 1)
        perm = rng.permutation(64)
        pa = self._lab(a.ravel()[perm].reshape(4, 4, 4))
        pb = self._lab(b.ravel()[perm].reshape(4, 4, 4))
        assert dice_score(pa, pb, 2) == pytest.approx(dice_score(la, lb, 2))

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValueError):
            dice_score(
                self._lab(np.zeros((2, 2, 2))), self._lab(np.zeros((3, 3, 3))), 1
            )


def constant_case(value, n=8, label=0):
    vol = VoxelField(scalar_layout(1), np.full((1, n, n, n), value, dtype=np.float32))
    lab = LabelVolume(np.full((n, n, n), label, dtype=np.int32), 3)
    return vol, lab


def tiny_dataset(n_cases=3, n=8, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_cases):
        vol = VoxelField(
            scalar_layout(1), rng.normal(size=(1, n, n, n)).astype(np.float32)
        )
        lab = LabelVolume((vol.data[0] > 0.5).astype(np.int32), 3)
        out.append((vol, lab))
    return out


class TestTrainLoop:
    def test_constant_val_loss_stops_after_patience_plus_one(self):
        net, params = build_unet(UnetConfig(**TINY))
        # zero learning rate => nothing changes => val loss constant
        data = tiny_dataset(2)
        cfg = TrainConfig(max_epochs=50, patience=3, patch_size=8, seed=0)
        _, history = train(net, params, data, data, cfg, AdamState(lr=0.0))
        assert len(history) == cfg.patience + 1

    def test_improving_val_runs_to_max_epochs(self):
        net, params = build_unet(UnetConfig(**TINY))
        data = tiny_dataset(2)
        cfg = TrainConfig(max_epochs=4, patience=2, patch_size=8, seed=0)
        _, history = train(net, params, data, data, cfg)
        # a learnable task: expect improvement most epochs; only assert the
        # loop honors max_epochs when no patience break occurred
        assert len(history) <= 4
        assert history[0]["epoch"] == 1

    def test_best_params_are_global_best(self):
        net, params = build_unet(UnetConfig(**TINY))
        data = tiny_dataset(3)
        cfg = TrainConfig(max_epochs=5, patience=5, patch_size=8, seed=0)
        best, history = train(net, params, data, data, cfg)
        best_epoch = next(r["epoch"] for r in history if r.get("best"))
        best_loss = min(r["val_loss"] for r in history)
        assert history[best_epoch - 1]["val_loss"] == best_loss

    def test_determinism(self):
        results = []
        for _ in range(2):
            net, params = build_unet(UnetConfig(**TINY))
            data = tiny_dataset(2)
            cfg = TrainConfig(max_epochs=2, patience=5, patch_size=8, seed=7)
            best, history = train(net, params, data, data, cfg)
            results.append((history, best))
        h1, h2 = results[0][0], results[1][0]
        assert h1 == h2
        for name in results[0][1].names():
            np.testing.assert_array_equal(
                results[0][1][name], results[1][1][name]
            )

    def test_empty_dataset_rejected(self):
        net, params = build_unet(UnetConfig(**TINY))
        with pytest.raises(ValueError):
            train(net, params, [], tiny_dataset(1), TrainConfig(patch_size=8))


class TestPredictVolume:
    def test_single_patch_equals_forward_argmax(self):
        net, params = build_unet(UnetConfig(**TINY))
        vol, _ = tiny_dataset(1, n=8, seed=5)[0]
        pred = predict_volume(net, params, vol, patch_size=8, stride=8)
        logits = forward(net, params, vol)
        np.testing.assert_array_equal(pred.data, np.argmax(logits.data, axis=0))

    def test_constant_network_gives_constant_labels(self):
        net, params = build_unet(UnetConfig(**TINY))
        for a in params.arrays.values():
            a[:] = 0
        params.arrays["final.self.l0"][1] = 1.0  # bias class 1 via mixing row
        vol, _ = tiny_dataset(1, n=12, seed=6)[0]
        pred = predict_volume(net, params, vol, patch_size=8, stride=4)
        # zero conv weights make logits constant; class argmax is uniform
        assert len(np.unique(pred.data)) == 1

    def test_overlapping_coverage_and_determinism(self):
        net, params = build_unet(UnetConfig(**TINY))
        vol, _ = tiny_dataset(1, n=12, seed=7)[0]
        p1 = predict_volume(net, params, vol, patch_size=8, stride=3)
        p2 = predict_volume(net, params, vol, patch_size=8, stride=3)
        np.testing.assert_array_equal(p1.data, p2.data)
        assert p1.dims == (12, 12, 12)

    def test_padding_path(self):
        net, params = build_unet(UnetConfig(**TINY))
        vol, _ = tiny_dataset(1, n=6, seed=8)[0]  # smaller than the patch
        pred = predict_volume(net, params, vol, patch_size=8, stride=8)
        assert pred.dims == (6, 6, 6)

    def test_bad_stride_rejected(self):
        net, params = build_unet(UnetConfig(**TINY))
        vol, _ = tiny_dataset(1, n=8)[0]
        with pytest.raises(ValueError):
            predict_volume(net, params, vol, patch_size=8, stride=0)
        with pytest.raises(ValueError):
            predict_volume(net, params, vol, patch_size=8, stride=9)
