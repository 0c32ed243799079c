"""Geometry derivation, HOG behavior, feature-map files, and pyramids."""

import json
import math
import os

import numpy as np
import pytest

import whodet as wd
from whodet.errors import FormatError, ValidationError

CAFFENET_CONV5 = [
    wd.LayerParam("convolution", 11, 4, 0),
    wd.LayerParam("pooling", 3, 2, 0),
    wd.LayerParam("convolution", 5, 1, 2),
    wd.LayerParam("pooling", 3, 2, 0),
    wd.LayerParam("convolution", 3, 1, 1),
    wd.LayerParam("convolution", 3, 1, 1),
    wd.LayerParam("convolution", 3, 1, 1),
]


class TestDeriveGeometry:
    def test_conv5_stack_gives_16px_cells(self):
        geom = wd.derive_geometry(CAFFENET_CONV5)
        assert (geom.cell_width, geom.cell_height) == (16, 16)

    def test_pool5_stack_gives_32px_cells(self):
        layers = CAFFENET_CONV5 + [wd.LayerParam("pooling", 3, 2, 0)]
        geom = wd.derive_geometry(layers)
        assert (geom.cell_width, geom.cell_height) == (32, 32)

    def test_empty_stack_is_identity(self):
        geom = wd.derive_geometry([])
        assert geom == wd.CellGeometry(1, 1, 0, 0)

    def test_single_unpadded_conv(self):
        # offset = (11 - 1) / 2 * 1 = 5, jump = 4
        geom = wd.derive_geometry([wd.LayerParam("convolution", 11, 4, 0)])
        assert (geom.cell_width, geom.border_x) == (4, 5)

    def test_cell_size_is_stride_product(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            layers = [
                wd.LayerParam("convolution" if rng.integers(2) else "pooling",
                              kernel_size=int(rng.integers(1, 8)),
                              stride=int(rng.integers(1, 4)),
                              pad=int(rng.integers(0, 4)))
                for _ in range(rng.integers(1, 7))
            ]
            product = math.prod(l.stride for l in layers)
            geom = wd.derive_geometry(layers)
            assert geom.cell_width == geom.cell_height == product

    def test_negative_offset_clamps_to_zero(self):
        geom = wd.derive_geometry([wd.LayerParam("convolution", 3, 1, 5)])
        assert geom.border_x == 0

    def test_fractional_offset_rounds_half_up(self):
        # (4 - 1) / 2 = 1.5 -> border 2
        geom = wd.derive_geometry([wd.LayerParam("convolution", 4, 2, 0)])
        assert geom.border_x == 2


class TestHog:
    def test_uniform_image_has_zero_features(self):
        gray = np.full((64, 64, 3), 128, dtype=np.uint8)
        fmap = wd.extract_hog(gray)
        assert float(np.abs(fmap.data).max()) == 0.0

    def test_grid_size_and_channels(self):
        fmap = wd.extract_hog(np.zeros((64, 64, 3), dtype=np.uint8))
        assert (fmap.width, fmap.height, fmap.channels) == (8, 8, 32)
        assert fmap.geometry == wd.CellGeometry(8, 8)

    def test_uneven_size_floors_cells(self):
        fmap = wd.extract_hog(np.zeros((71, 66), dtype=np.uint8))
        assert (fmap.width, fmap.height) == (8, 8)

    def test_vertical_edge_concentrates_horizontal_gradient_bin(self):
        img = np.full((64, 64), 50.0)
        img[:, 32:] = 200.0
        fmap = wd.extract_hog(img)
        insensitive = fmap.data[4, 3, 18:27]  # cell adjacent to the edge
        assert np.argmax(insensitive) == 0
        assert insensitive[0] > 10 * (np.sum(insensitive) - insensitive[0] + 1e-12)

    def test_last_channel_always_zero(self):
        rng = np.random.default_rng(4)
        fmap = wd.extract_hog(rng.uniform(0, 255, (48, 40, 3)))
        assert np.all(fmap.data[:, :, 31] == 0)

    def test_values_bounded(self):
        rng = np.random.default_rng(5)
        fmap = wd.extract_hog(rng.uniform(0, 255, (64, 64, 3)))
        assert float(fmap.data.min()) >= 0.0
        assert float(fmap.data.max()) <= 1.0

    def test_smaller_than_one_cell_raises(self):
        with pytest.raises(ValidationError):
            wd.extract_hog(np.zeros((5, 64), dtype=np.uint8))

    def test_rotation_180_permutes_orientations(self):
        rng = np.random.default_rng(6)
        img = rng.uniform(0, 255, (64, 64, 3))
        base = wd.extract_hog(img).data
        rotated = wd.extract_hog(np.rot90(img, 2).copy()).data
        flipped = rotated[::-1, ::-1, :]
        # directions flip sign: sensitive bins shift by 9, insensitive stay,
        # the four block-energy channels mirror corner-wise
        perm = np.concatenate([
            flipped[:, :, [(o + 9) % 18 for o in range(18)]],
            flipped[:, :, 18:27],
            flipped[:, :, [30, 29, 28, 27]],
            flipped[:, :, 31:32],
        ], axis=2)
        np.testing.assert_allclose(perm, base, atol=1e-12)

    def test_rotation_90_permutes_orientations_on_ramp(self):
        # a linear ramp has one gradient direction everywhere, so interior
        # cells must hold the same channel multiset after rotation, with the
        # dominant orientation moved to the predicted bin; angles stay clear
        # of orientation-bin boundaries before and after rotation
        for angle in (35.0, 75.0, 155.0):
            ys, xs = np.mgrid[0:64, 0:64]
            rad = np.deg2rad(angle)
            ramp = (np.cos(rad) * xs + np.sin(rad) * ys) * 2.0
            base = wd.extract_hog(ramp).data
            rotated = wd.extract_hog(np.rot90(ramp).copy()).data
            np.testing.assert_allclose(np.sort(base[3, 3, :31]),
                                       np.sort(rotated[3, 3, :31]), atol=1e-12)
            want = round(((angle - 90.0) % 180.0) / 20.0) % 9
            assert int(np.argmax(rotated[3, 3, 18:27])) == want


class TestFeatureMapFile:
    def test_roundtrip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        fmap = wd.FeatureMap(rng.normal(size=(3, 4, 5)).astype(np.float32),
                             wd.CellGeometry(16, 16, 3, 2), scale=0.25)
        path = tmp_path / "map.wfm"
        wd.save_feature_map(fmap, path)
        loaded = wd.load_feature_map(path)
        assert np.array_equal(loaded.data, fmap.data)
        assert loaded.geometry == fmap.geometry
        assert loaded.scale == fmap.scale

    def test_truncated_payload_reports_mismatch(self, tmp_path):
        fmap = wd.FeatureMap(np.zeros((2, 2, 3), dtype=np.float32),
                             wd.CellGeometry(8, 8))
        path = tmp_path / "map.wfm"
        wd.save_feature_map(fmap, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-4])  # drop one value of twelve
        with pytest.raises(FormatError, match="11"):
            wd.load_feature_map(path)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.wfm"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(FormatError, match="magic"):
            wd.load_feature_map(path)

    def test_non_finite_payload_rejected(self, tmp_path):
        fmap = wd.FeatureMap(np.ones((1, 1, 2), dtype=np.float32),
                             wd.CellGeometry(8, 8))
        path = tmp_path / "map.wfm"
        wd.save_feature_map(fmap, path)
        blob = bytearray(path.read_bytes())
        blob[-8:-4] = np.array([np.nan], dtype="<f4").tobytes()
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="finite"):
            wd.load_feature_map(path)


def _save_levels(tmp_path, scales, channels=3, base_cells=16):
    entries = []
    rng = np.random.default_rng(8)
    for i, scale in enumerate(scales):
        size = max(2, round(base_cells * scale))
        ch = channels if not isinstance(channels, list) else channels[i]
        fmap = wd.FeatureMap(rng.normal(size=(size, size, ch)).astype(np.float32),
                             wd.CellGeometry(8, 8), scale=scale)
        name = f"level_{i}.wfm"
        wd.save_feature_map(fmap, tmp_path / name)
        entries.append({"scale": scale, "file": name})
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps({"image": "src.png", "levels": entries}))
    return manifest


class TestBuildPyramid:
    def test_oversized_image_downscaled_to_limit(self):
        img = np.zeros((1024, 2048, 3), dtype=np.uint8)
        pyramid = wd.build_pyramid(img, wd.FeatureExtractorConfig(),
                                   intervals_per_octave=5)
        base = pyramid.levels[0]
        # base level computed from a 1024x512 image
        assert (base.width, base.height) == (1024 // 8, 512 // 8)
        assert base.scale == pytest.approx(0.5)
        assert pyramid.image_size == (2048, 1024)

    def test_single_interval_gives_power_of_two_scales(self):
        img = np.zeros((256, 256, 3), dtype=np.uint8)
        pyramid = wd.build_pyramid(img, wd.FeatureExtractorConfig(),
                                   intervals_per_octave=1)
        scales = [lv.scale for lv in pyramid.levels]
        assert scales == [1.0, 0.5, 0.25, 0.125]

    def test_stopping_rule_yields_four_levels(self):
        # 256px, cell 8, min 4 cells, intervals 1: 32, 16, 8, 4 cells
        img = np.zeros((256, 256, 3), dtype=np.uint8)
        pyramid = wd.build_pyramid(img, wd.FeatureExtractorConfig(),
                                   intervals_per_octave=1, min_level_cells=4)
        assert [lv.width for lv in pyramid.levels] == [32, 16, 8, 4]

    def test_octave_scale_is_exactly_half(self):
        img = np.zeros((512, 512, 3), dtype=np.uint8)
        pyramid = wd.build_pyramid(img, wd.FeatureExtractorConfig(),
                                   intervals_per_octave=3)
        intervals = pyramid.intervals_per_octave
        for i in range(len(pyramid.levels) - intervals):
            assert pyramid.levels[i + intervals].scale == pyramid.levels[i].scale / 2

    def test_channels_constant_across_levels(self):
        rng = np.random.default_rng(9)
        img = rng.uniform(0, 255, (200, 150, 3)).astype(np.uint8)
        pyramid = wd.build_pyramid(img, wd.FeatureExtractorConfig())
        assert {lv.channels for lv in pyramid.levels} == {32}

    def test_precomputed_manifest_roundtrip(self, tmp_path):
        scales = [2.0 ** (-(i % 2) / 2) / 2 ** (i // 2) for i in range(4)]
        manifest = _save_levels(tmp_path, scales)
        config = wd.FeatureExtractorConfig(kind="precomputed", channels=3)
        pyramid = wd.build_pyramid(manifest, config, intervals_per_octave=2)
        assert len(pyramid.levels) == 4
        assert pyramid.levels[2].scale == pyramid.levels[0].scale / 2

    def test_precomputed_channel_mismatch_rejected(self, tmp_path):
        scales = [1.0, 2.0 ** -0.5]
        manifest = _save_levels(tmp_path, scales, channels=[3, 4])
        config = wd.FeatureExtractorConfig(kind="precomputed")
        with pytest.raises(ValidationError, match="channels"):
            wd.build_pyramid(manifest, config, intervals_per_octave=2)

    def test_precomputed_off_schedule_rejected(self, tmp_path):
        manifest = _save_levels(tmp_path, [1.0, 0.9])
        config = wd.FeatureExtractorConfig(kind="precomputed")
        with pytest.raises(ValidationError, match="schedule"):
            wd.build_pyramid(manifest, config, intervals_per_octave=2)


class TestInvariants:
    def test_feature_map_validates_length_and_finiteness(self):
        with pytest.raises(ValidationError):
            wd.FeatureMap(np.full((2, 2, 1), np.inf), wd.CellGeometry(8, 8))
        with pytest.raises(ValidationError):
            wd.FeatureMap(np.zeros((2, 2)), wd.CellGeometry(8, 8))

    def test_feature_map_is_immutable(self):
        fmap = wd.extract_hog(np.zeros((16, 16), dtype=np.uint8))
        with pytest.raises(ValueError):
            fmap.data[0, 0, 0] = 1.0

    def test_pyramid_rejects_increasing_scales(self):
        maps = [wd.FeatureMap(np.zeros((4, 4, 2), dtype=np.float32),
                              wd.CellGeometry(8, 8), scale=s)
                for s in (0.5, 1.0)]
        with pytest.raises(ValidationError):
            wd.FeaturePyramid(levels=tuple(maps), intervals_per_octave=1)
