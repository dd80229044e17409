from pathlib import Path

import numpy as np
import pytest

from densepoint import networks as N
from densepoint.layers import EPConv
from densepoint.tensor import ConfigError

GOLDEN = Path(__file__).parent / "golden"


def read_golden(name, k_value):
    rows = []
    for line in (GOLDEN / name).read_text().splitlines():
        if line.startswith("#"):
            continue
        layer, c_in, shape = line.split("\t")
        dims = tuple(int(k_value) if d == "K" else int(d) for d in shape.split(","))
        rows.append((layer, None if c_in == "-" else int(c_in), dims))
    return rows


def check_against_golden(net, golden):
    trace = dict(net.trace_shapes())
    modules = dict(net.named_modules())
    for layer, c_in, shape in golden:
        assert trace[layer] == shape, layer
        if c_in is not None:
            assert modules[layer].in_channels == c_in, layer
    assert [name for name, _ in net.trace_shapes()] == [g[0] for g in golden]


@pytest.fixture(scope="module")
def cls_net():
    return N.build_classification()


class TestShapes:
    def test_classification_golden(self, cls_net):
        check_against_golden(cls_net, read_golden("classification_shapes.tsv", 40))

    def test_segmentation_golden(self):
        net = N.build_segmentation(num_parts=50)
        check_against_golden(net, read_golden("segmentation_shapes.tsv", 50))

    def test_normal_golden(self):
        check_against_golden(N.build_normal_estimation(), read_golden("normal_shapes.tsv", 3))

    @pytest.mark.parametrize(
        "build",
        [
            N.build_classification,
            lambda: N.build_classification(connectivity="layer_by_layer"),
            lambda: N.build_segmentation(num_parts=50),
            N.build_normal_estimation,
            lambda: N.Network(N.depth_preset(6)),
        ],
    )
    def test_inferred_shapes_match_trace(self, build):
        net = build()
        assert net.infer_shapes() == net.trace_shapes()

    def test_layer_count(self, cls_net):
        convs = sum(1 + (len(s.block.layers) if s.block else 0) for s in cls_net.stages)
        assert convs == 11
        assert convs + len(cls_net.fcs) == 14

    def test_segmentation_needs_one_hot(self):
        net = N.build_segmentation(num_parts=4)
        with pytest.raises(ConfigError):
            net(np.zeros((1, 3, 2048)), N.Context())

    def test_custom_classes(self):
        net = N.build_classification(num_classes=7)
        assert net.trace_shapes()[-1] == ("fc3", (7,))


class TestParams:
    @pytest.mark.parametrize("groups,millions", [(1, 0.73), (2, 0.67), (4, 0.62), (6, 0.61), (12, 0.60)])
    def test_group_sweep(self, groups, millions):
        total = N.count_params(N.build_classification(k=24, groups=groups)).total_params
        assert abs(total / 1e6 - millions) <= 0.05 * millions

    @pytest.mark.parametrize("k,millions", [(12, 0.56), (24, 0.67), (36, 0.76), (48, 0.88)])
    def test_narrowness_sweep(self, k, millions):
        total = N.count_params(N.build_classification(k=k, groups=2)).total_params
        assert abs(total / 1e6 - millions) <= 0.05 * millions

    def test_exact_default(self, cls_net):
        # regression value for the default network; the published figure is 0.67M
        assert N.count_params(cls_net).total_params == 652376

    def test_totals_equal_sum_of_parts(self, cls_net):
        report = N.count_params(cls_net)
        assert sum(report.by_category().values()) == report.total_params
        assert sum(report.weight_bias_bn().values()) == report.total_params
        assert report.total_params == sum(p.data.size for p in cls_net.parameters())

    def test_grouped_phi_weights_scale(self):
        ungrouped = N.count_params(N.build_classification(groups=1))
        for g in (2, 4, 6, 12):
            grouped = N.count_params(N.build_classification(groups=g))
            phi_1 = sum(r.params["phi_weight"] for r in ungrouped.rows if r.kind == "epconv")
            phi_g = sum(r.params["phi_weight"] for r in grouped.rows if r.kind == "epconv")
            assert phi_g * g == phi_1

    def test_dense_fewer_than_full_width_layer_by_layer(self, cls_net):
        full_width = N.Network(N.classification_config(connectivity="layer_by_layer"))
        assert N.count_params(cls_net).total_params < N.count_params(full_width).total_params

    def test_uniform_4k_baseline_is_smaller(self, cls_net):
        # With every layer at 4k wide the next PPool sees 96 channels instead
        # of 168/264, so this baseline ends up lighter than the dense network.
        cfg = N.classification_config(connectivity="layer_by_layer")
        for st in cfg.stages[:2]:
            st.layer_width = 4 * cfg.k
        assert N.count_params(N.Network(cfg)).total_params == 551960 < N.count_params(cls_net).total_params

    def test_invalid_groups(self):
        with pytest.raises(ConfigError):
            N.build_classification(k=24, groups=5)


class TestFlops:
    def test_group_ratio(self):
        f1 = N.count_flops(N.build_classification(groups=1)).total_flops
        f2 = N.count_flops(N.build_classification(groups=2)).total_flops
        assert abs(f1 / f2 - 1030 / 651) <= 0.10 * 1030 / 651

    def test_decreasing_in_groups(self):
        flops = [N.count_flops(N.build_classification(groups=g)).total_flops for g in (1, 2, 4, 6, 12)]
        assert all(a > b for a, b in zip(flops, flops[1:]))

    def test_depth_ratio(self):
        f6 = N.count_flops(N.Network(N.depth_preset(6))).total_flops
        f11 = N.count_flops(N.Network(N.depth_preset(11))).total_flops
        assert abs(f6 / f11 - 148 / 651) <= 0.15 * 148 / 651

    def test_epconv_hand_count(self):
        # one ePConv on 512 points, 32 neighbors: phi SLP + BN/ReLU + max, then psi SLP + BN/ReLU
        layer = EPConv(96, 24, groups=2)
        layer.spec = N.NeighborhoodSpec(neighbor_count=32)
        _, flops = N._epconv_cost(layer, 512)
        pos = 512 * 32
        expect = 2 * 96 * 48 * pos + 96 * pos + 3 * 96 * pos + 96 * pos + 2 * 96 * 24 * 512 + 24 * 512 + 3 * 24 * 512
        assert flops == expect

    def test_scales_with_points(self, cls_net):
        assert N.count_flops(cls_net, 2048).total_flops > N.count_flops(cls_net, 1024).total_flops


class TestDepthPresets:
    def test_eleven_is_default(self, cls_net):
        assert N.depth_preset(11).to_dict() == N.classification_config().to_dict()

    @pytest.mark.parametrize("depth,millions", [(6, 0.53), (23, 1.03)])
    def test_param_totals(self, depth, millions):
        total = N.count_params(N.Network(N.depth_preset(depth))).total_params
        assert abs(total / 1e6 - millions) <= 0.10 * millions

    @pytest.mark.parametrize("depth", sorted(N.DEPTH_PRESETS))
    def test_layer_count(self, depth):
        cfg = N.depth_preset(depth)
        assert len(cfg.stages) + sum(s.dense_layers for s in cfg.stages) == depth

    def test_unknown_depth(self):
        with pytest.raises(ConfigError):
            N.depth_preset(7)


class TestBuilders:
    def test_pure(self):
        a, b = N.build_classification(), N.build_classification()
        assert [n for n, _ in a.named_parameters()] == [n for n, _ in b.named_parameters()]
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_config_not_aliased(self):
        cfg = N.classification_config()
        net = N.Network(cfg)
        cfg.stages[0].dense_layers = 9
        assert net.config.stages[0].dense_layers == 3

    def test_config_round_trip(self):
        for cfg in (N.classification_config(), N.segmentation_config(), N.normal_estimation_config()):
            assert N.NetworkConfig.from_dict(cfg.to_dict()) == cfg

    def test_validation(self):
        with pytest.raises(ConfigError):
            N.Network(N.NetworkConfig(task="regression"))
        with pytest.raises(ConfigError):
            N.build_classification(num_classes=1)
        with pytest.raises(ConfigError):
            N.build_classification(connectivity="sparse")

    def test_concat_at_end_widths(self):
        net = N.Network(N.classification_config(connectivity="concat_at_end"))
        trace = dict(net.trace_shapes())
        assert trace["stage1"][0] > 96 and trace["stage2"][0] > 144

    def test_normal_output_not_softmaxed(self):
        net = N.build_normal_estimation()
        assert net.output_channels == 3 and net.fcs[-1].terminal

    def test_cost_table_lists_every_layer(self, cls_net):
        table = N.count_params(cls_net).table().splitlines()
        assert table[0].startswith("layer\t")
        assert table[-1].startswith("total\t")
        assert len(table) == 2 + 16 - 2  # the two block summaries are not separate rows
