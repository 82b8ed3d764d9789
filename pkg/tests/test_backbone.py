import numpy as np
import pytest

from sebre import nn
from sebre.backbone import (
    BackboneConfig,
    ConfigError,
    assign_roi_level,
    assign_roi_levels,
    build_backbone,
)

DESK = BackboneConfig()


def desk_param_count(cfg: BackboneConfig) -> int:
    """Closed-form parameter count from the layer shapes."""

    def conv(c_in, c_out, k):
        return c_out * c_in * k * k + c_out

    def norm(c):
        return 2 * c

    total = conv(3, cfg.channels[0], 7) + norm(cfg.channels[0])
    c_in = cfg.channels[0]
    for s, (blocks, c_out) in enumerate(zip(cfg.stage_blocks, cfg.channels)):
        for b in range(blocks):
            stride = 2 if (b == 0 and s > 0) else 1
            total += conv(c_in, c_out, 3) + norm(c_out)
            total += conv(c_out, c_out, 3) + norm(c_out)
            if stride != 1 or c_in != c_out:
                total += conv(c_in, c_out, 1) + norm(c_out)
            c_in = c_out
    for c in cfg.channels:
        total += conv(c, cfg.fpn_channels, 1)
    total += cfg.num_levels * conv(cfg.fpn_channels, cfg.fpn_channels, 3)
    return total


class TestBuild:
    def test_same_seed_bit_identical(self):
        a = build_backbone(DESK, seed=11)
        b = build_backbone(DESK, seed=11)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert pa.name == pb.name
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_different_seed_differs(self):
        a = build_backbone(DESK, seed=1)
        b = build_backbone(DESK, seed=2)
        assert any(
            not np.array_equal(pa.data, pb.data)
            for pa, pb in zip(a.parameters(), b.parameters())
        )

    def test_parameter_count_closed_form(self):
        model = build_backbone(DESK, seed=0)
        got = sum(p.data.size for p in model.parameters())
        assert got == desk_param_count(DESK)

    def test_zero_blocks_rejected(self):
        with pytest.raises(ConfigError):
            BackboneConfig(stage_blocks=(2, 0, 2, 2))

    def test_single_stage_rejected(self):
        with pytest.raises(ConfigError):
            BackboneConfig(stage_blocks=(2,), channels=(16,))

    def test_names_carry_stage_and_block(self):
        model = build_backbone(DESK, seed=0)
        names = {p.name for p in model.parameters()}
        assert "backbone.stage0.block0.conv1.weight" in names
        assert "backbone.stage3.block1.conv2.bias" in names
        assert any(n.startswith("fpn.lateral0") for n in names)

    def test_paper_preset_shape(self):
        cfg = BackboneConfig.paper_preset()
        assert cfg.stage_blocks == (3, 4, 23, 3)
        assert cfg.strides == (4, 8, 16, 32)


class TestPyramid:
    def test_level_extents_256(self):
        model = build_backbone(DESK, seed=3)
        image = nn.Tensor(np.random.default_rng(0).normal(size=(3, 256, 256)))
        with nn.no_grad():
            levels = model.extract_pyramid(image)
        assert [lv.shape for lv in levels] == [
            (32, 64, 64),
            (32, 32, 32),
            (32, 16, 16),
            (32, 8, 8),
        ]

    def test_doubling_height_doubles_p2(self):
        model = build_backbone(DESK, seed=3)
        rng = np.random.default_rng(1)
        with nn.no_grad():
            a = model.extract_pyramid(nn.Tensor(rng.normal(size=(3, 64, 64))))
            b = model.extract_pyramid(nn.Tensor(rng.normal(size=(3, 128, 64))))
        assert b[0].shape[1] == 2 * a[0].shape[1]

    def test_zero_image_zero_biases_gives_zero_features(self):
        model = build_backbone(DESK, seed=4)
        image = nn.Tensor(np.zeros((3, 64, 64), dtype=np.float32))
        with nn.no_grad():
            levels = model.extract_pyramid(image)
        for lv in levels:
            np.testing.assert_array_equal(lv.data, 0.0)

    def test_indivisible_extent_instructs_padding(self):
        model = build_backbone(DESK, seed=4)
        with pytest.raises(ConfigError, match="pad"):
            model.extract_pyramid(nn.Tensor(np.zeros((3, 100, 64))))

    def test_deterministic(self):
        model = build_backbone(DESK, seed=5)
        image = nn.Tensor(np.random.default_rng(2).normal(size=(3, 64, 64)))
        with nn.no_grad():
            one = model.extract_pyramid(image)
            two = model.extract_pyramid(image)
        for a, b in zip(one, two):
            np.testing.assert_array_equal(a.data, b.data)

    def test_end_to_end_gradient(self):
        model = build_backbone(
            BackboneConfig(stage_blocks=(1, 1, 1, 1), channels=(4, 4, 8, 8), fpn_channels=4),
            seed=6,
        )
        image = nn.Tensor(np.random.default_rng(3).normal(size=(3, 32, 32)).astype(np.float32))

        def fn(img):
            levels = model.extract_pyramid(img)
            return nn.total(nn.concat([nn.reshape(nn.square(lv), (1, -1)) for lv in levels], axis=1))

        err = nn.grad_check(fn, [image], eps=1e-5)
        assert err < 1e-3


class TestRoiLevel:
    def test_canonical_extent_maps_to_stride16(self):
        # 224x224 RoI in a 448x448 image, normalized extent 0.5
        assert assign_roi_level([0.0, 0.0, 0.5, 0.5], 448, 448, 4) == 2

    def test_large_roi_tops_out(self):
        assert assign_roi_level([0.0, 0.0, 1.0, 1.0], 512, 512, 4) == 3

    def test_small_roi_bottoms_out(self):
        assert assign_roi_level([0.0, 0.0, 0.05, 0.05], 256, 256, 4) == 0

    def test_zero_area_goes_lowest(self):
        assert assign_roi_level([0.3, 0.3, 0.3, 0.3], 256, 256, 4) == 0

    def test_monotone_in_area(self):
        h = w = 1024
        sizes = np.linspace(0.01, 1.0, 60)
        levels = [assign_roi_level([0, 0, s, s], h, w, 4) for s in sizes]
        assert all(b >= a for a, b in zip(levels, levels[1:]))

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(4)
        y1 = rng.uniform(0, 0.5, 50)
        x1 = rng.uniform(0, 0.5, 50)
        boxes = np.stack([y1, x1, y1 + rng.uniform(0, 0.5, 50), x1 + rng.uniform(0, 0.5, 50)], axis=1)
        vec = assign_roi_levels(boxes, 640, 480, 4)
        scal = [assign_roi_level(b, 640, 480, 4) for b in boxes]
        assert vec.tolist() == scal
