import numpy as np
import pytest

from equivox.data import (
    SyntheticSpec,
    generate_synthetic_case,
    load_checkpoint,
    load_dataset,
    read_volume,
    save_checkpoint,
    save_dataset,
    write_volume,
    zscore,
)
from equivox.field import LabelVolume, VoxelField, rotate_field_exact, rotate_labels_exact
from equivox.net import UnetConfig, build_unet, forward
from equivox.so3 import RepLayout, cube_rotations, scalar_layout

TINY = dict(levels=2, top_mults=(2, 1, 1), kernel_size=3, radial_count=2,
            in_channels=1, n_classes=3, seed=3)


class TestSyntheticGenerator:
    def test_deterministic(self):
        a_vol, a_lab = generate_synthetic_case(11)
        b_vol, b_lab = generate_synthetic_case(11)
        np.testing.assert_array_equal(a_vol.data, b_vol.data)
        np.testing.assert_array_equal(a_lab.data, b_lab.data)

    def test_all_classes_present(self):
        for seed in range(5):
            _, lab = generate_synthetic_case(seed)
            assert set(np.unique(lab.data)) == {0, 1, 2}

    def test_joint_rotation_preserves_class_counts(self):
        vol, lab = generate_synthetic_case(4)
        for rot in cube_rotations()[::6]:
            rlab = rotate_labels_exact(lab, rot)
            for c in (0, 1, 2):
                assert (rlab.data == c).sum() == (lab.data == c).sum()
            rvol = rotate_field_exact(vol, rot)
            assert rvol.data.sum() == pytest.approx(vol.data.sum(), rel=1e-5)

    def test_intensity_blind_to_class(self):
        # mean foreground intensity must not differ between the classes
        vol, lab = generate_synthetic_case(9, SyntheticSpec(noise_sigma=0.0))
        m1 = vol.data[0][lab.data == 1].mean()
        m2 = vol.data[0][lab.data == 2].mean()
        assert m1 == pytest.approx(m2)

    def test_objects_inside_grid(self):
        for seed in range(5):
            _, lab = generate_synthetic_case(seed)
            fg = lab.data > 0
            assert not fg[0].any() and not fg[-1].any()
            assert not fg[:, 0].any() and not fg[:, -1].any()
            assert not fg[:, :, 0].any() and not fg[:, :, -1].any()

    def test_impossible_geometry_rejected(self):
        with pytest.raises(ValueError):
            generate_synthetic_case(0, SyntheticSpec(grid=16, long_axis=8.0))


class TestZscore:
    def test_normalizes(self):
        rng = np.random.default_rng(0)
        v = VoxelField(scalar_layout(2), 5 + 3 * rng.normal(size=(2, 6, 6, 6)))
        z = zscore(v)
        assert z.data.mean(axis=(1, 2, 3)) == pytest.approx([0, 0], abs=1e-6)
        assert z.data.std(axis=(1, 2, 3)) == pytest.approx([1, 1], rel=1e-4)


class TestVolumeFiles:
    def test_field_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        layout = RepLayout.parse("2x0e+1x1e")
        v = VoxelField(layout, rng.normal(size=(5, 4, 6, 5)).astype(np.float32))
        path = tmp_path / "vol.vol"
        write_volume(path, v)
        back = read_volume(path)
        assert isinstance(back, VoxelField)
        assert str(back.layout) == "2x0e+1x1e"
        np.testing.assert_array_equal(back.data, v.data)

    def test_label_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        lab = LabelVolume(rng.integers(0, 3, size=(4, 5, 6)), 3)
        path = tmp_path / "lab.vol"
        write_volume(path, lab)
        back = read_volume(path, n_classes=3)
        assert isinstance(back, LabelVolume)
        np.testing.assert_array_equal(back.data, lab.data)

    def test_payload_index_convention(self, tmp_path):
        # index = ((c*Z + z)*Y + y)*X + x, i.e. x varies fastest
        v = VoxelField(
            scalar_layout(1), np.arange(24, dtype=np.float32).reshape(1, 2, 3, 4)
        )
        path = tmp_path / "conv.vol"
        write_volume(path, v)
        raw = path.read_bytes().split(b"\n", 1)[1]
        flat = np.frombuffer(raw, dtype="<f4")
        X, Y, Z = 2, 3, 4
        for x in range(X):
            for y in range(Y):
                for z in range(Z):
                    assert flat[(z * Y + y) * X + x] == v.data[0, x, y, z]

    def test_truncated_payload_reports_sizes(self, tmp_path):
        v = VoxelField(scalar_layout(1), np.zeros((1, 4, 4, 4), dtype=np.float32))
        path = tmp_path / "trunc.vol"
        write_volume(path, v)
        full = path.read_bytes()
        path.write_bytes(full[:-8])
        with pytest.raises(ValueError, match="expected 256 bytes, got 248"):
            read_volume(path)

    def test_zero_channels_rejected(self, tmp_path):
        path = tmp_path / "zero.vol"
        path.write_bytes(b'{"dims": [2, 2, 2], "channels": 0, "dtype": "f32"}\n')
        with pytest.raises(ValueError, match="positive"):
            read_volume(path)

    def test_malformed_header_rejected(self, tmp_path):
        path = tmp_path / "bad.vol"
        path.write_bytes(b"not json\n\x00\x00")
        with pytest.raises(ValueError, match="malformed header"):
            read_volume(path)

    def test_unknown_dtype_rejected(self, tmp_path):
        path = tmp_path / "dt.vol"
        path.write_bytes(b'{"dims": [1,1,1], "channels": 1, "dtype": "f64"}\n' + b"0" * 8)
        with pytest.raises(ValueError, match="dtype"):
            read_volume(path)

    def test_dataset_roundtrip(self, tmp_path):
        dataset = [generate_synthetic_case(s) for s in range(2)]
        save_dataset(tmp_path / "ds", dataset)
        back = load_dataset(tmp_path / "ds")
        assert len(back) == 2
        for (v1, l1), (v2, l2) in zip(dataset, back):
            np.testing.assert_array_equal(v1.data, v2.data)
            np.testing.assert_array_equal(l1.data, l2.data)


class TestCheckpoints:
    def test_roundtrip_preserves_forward_bits(self, tmp_path):
        cfg = UnetConfig(**TINY)
        net, params = build_unet(cfg)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, cfg)
        loaded, cfg2 = load_checkpoint(path)
        assert cfg2 == cfg
        rng = np.random.default_rng(3)
        x = VoxelField(
            scalar_layout(1), rng.normal(size=(1, 8, 8, 8)).astype(np.float32)
        )
        a = forward(net, params, x)
        b = forward(net, loaded, x)
        np.testing.assert_array_equal(a.data, b.data)

    def test_size_mismatch_detected(self, tmp_path):
        cfg = UnetConfig(**TINY)
        _, params = build_unet(cfg)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, cfg)
        blob = path.read_bytes()
        path.write_bytes(blob[:-4])
        with pytest.raises(ValueError, match="payload length mismatch"):
            load_checkpoint(path)

    def test_wrong_config_rejected_with_diff(self, tmp_path):
        cfg = UnetConfig(**TINY)
        _, params = build_unet(cfg)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, cfg)
        other = UnetConfig(**{**TINY, "kernel_size": 5, "seed": 9})
        with pytest.raises(ValueError) as err:
            load_checkpoint(path, expect_config=other)
        assert "kernel_size" in str(err.value)
        assert "seed" in str(err.value)

    def test_tampered_manifest_shape_rejected(self, tmp_path):
        cfg = UnetConfig(**TINY)
        _, params = build_unet(cfg)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, cfg)
        import json

        header, payload = path.read_bytes().split(b"\n", 1)
        manifest = json.loads(header)
        manifest["params"][0]["shape"] = [1, 1]
        path.write_bytes(json.dumps(manifest).encode() + b"\n" + payload)
        with pytest.raises(ValueError, match="shape"):
            load_checkpoint(path)
