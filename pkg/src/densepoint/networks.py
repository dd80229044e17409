"""Declarative network configs, builders, and the parameter/FLOP accountant."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .geometry import NeighborhoodSpec
from .layers import (
    FC,
    Context,
    DensePointBlock,
    EPConv,
    FPLayer,
    LayerByLayerBlock,
    Module,
    PConv,
    PPool,
    densepoint_block_forward,
    fc_forward,
    feature_propagate,
    layer_by_layer_forward,
    ppool_forward,
)
from .tensor import ConfigError, Tensor, concat_channels, make_rng, reshape

TASKS = ("classification", "part_segmentation", "normal_estimation", "custom")
CONNECTIVITY = ("dense", "layer_by_layer", "concat_at_end")

# FLOP convention: one multiply-accumulate = 2 FLOPs; BN = 2 per element,
# ReLU = 1, aggregation = 1 per aggregated input element. Geometry (FPS,
# neighbor search) and dropout are not counted.
FLOPS_PER_MAC = 2
FLOPS_BN = 2
FLOPS_RELU = 1
FLOPS_RHO = 1


@dataclass
class PPoolConfig:
    out_channels: int
    ratio: Optional[float] = None
    is_global: bool = False
    radius: float = 0.2
    neighbor_count: int = 32


@dataclass
class StageConfig:
    ppool: PPoolConfig
    dense_layers: int = 0
    radius: float = 0.2
    neighbor_count: int = 32
    dropout: float = 0.2
    connectivity: Optional[str] = None
    layer_width: Optional[int] = None
    conv: Optional[str] = None


@dataclass
class NetworkConfig:
    task: str = "classification"
    input_points: int = 1024
    stages: List[StageConfig] = field(default_factory=list)
    k: int = 24
    groups: int = 2
    num_classes: int = 40
    one_hot_dim: Optional[int] = None
    connectivity: str = "dense"
    fc: List[Tuple[int, float]] = field(default_factory=list)
    fp: List[List[int]] = field(default_factory=list)
    in_channels: int = 3
    rho: str = "max"
    neighborhood: str = "sphere"
    preactivation: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.task == "classification" and self.num_classes < 2:
            raise ConfigError("classification needs at least 2 classes")
        if self.k < 1 or self.groups < 1:
            raise ConfigError("k and groups must be positive")
        if (4 * self.k) % self.groups:
            raise ConfigError(f"4k={4 * self.k} is not divisible by groups={self.groups}")
        for st in self.stages:
            conn = st.connectivity or self.connectivity
            if conn not in CONNECTIVITY:
                raise ConfigError(f"unknown connectivity {conn!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["stages"] = [
            StageConfig(**{**s, "ppool": PPoolConfig(**s["ppool"])}) for s in d.get("stages", [])
        ]
        d["fc"] = [tuple(x) for x in d.get("fc", [])]
        d["fp"] = [list(x) for x in d.get("fp", [])]
        return cls(**d)


# ---------------------------------------------------------------------------
# network modules
# ---------------------------------------------------------------------------


class Stage(Module):
    """One PPool plus the layers that run on its output point set."""

    def __init__(self, cfg: StageConfig, net: NetworkConfig, c_in: int, coord_channels: int, rng):
        super().__init__()
        p = cfg.ppool
        pool_spec = NeighborhoodSpec(net.neighborhood, p.radius, p.neighbor_count)
        self.ppool = PPool(
            c_in, p.out_channels, ratio=p.ratio, is_global=p.is_global,
            spec=pool_spec, rho=net.rho, coord_channels=coord_channels, rng=rng,
        )
        self.connectivity = cfg.connectivity or net.connectivity
        self.block = None
        if cfg.dense_layers:
            spec = NeighborhoodSpec(net.neighborhood, cfg.radius, cfg.neighbor_count)
            c0 = p.out_channels
            if self.connectivity == "dense":
                self.block = DensePointBlock(
                    c0, net.k, cfg.dense_layers, net.groups, spec, cfg.dropout, net.rho,
                    preactivation=net.preactivation, rng=rng,
                )
            else:
                width = cfg.layer_width or c0 + cfg.dense_layers * net.k
                self.block = LayerByLayerBlock(
                    c0, width, cfg.dense_layers, spec, conv=cfg.conv or "pconv",
                    concat_at_end=self.connectivity == "concat_at_end",
                    groups=net.groups, dropout=cfg.dropout, rho=net.rho, rng=rng,
                )

    @property
    def out_channels(self) -> int:
        return self.block.out_channels if self.block is not None else self.ppool.out_channels

    def __call__(self, coords: np.ndarray, features: Tensor, ctx: Context):
        coords, h = ppool_forward(self.ppool, coords, features, ctx)
        ctx.record(self.ppool.name, _table_shape(h.shape), h.data)
        if self.block is not None:
            if isinstance(self.block, DensePointBlock):
                h = densepoint_block_forward(self.block, h, coords, ctx)
            else:
                h = layer_by_layer_forward(self.block, h, coords, ctx)
            ctx.record(self.name, _table_shape(h.shape), h.data)
        return coords, h


def _table_shape(shape: tuple) -> tuple:
    """(B, C, N) -> (C, N); global features (B, C, 1) -> (C,)."""
    if len(shape) == 3 and shape[2] == 1:
        return (shape[1],)
    return tuple(shape[1:])


class Network(Module):
    """Hierarchical point network: stages, optional FP decoder, FC head."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        config.validate()
        self.config = copy.deepcopy(config)
        rng = make_rng(config.seed)
        self.stages: List[Stage] = []
        c = config.in_channels
        coord_channels = 3
        level_channels = [c]
        for i, st in enumerate(config.stages):
            stage = Stage(st, config, c, coord_channels, rng)
            self.stages.append(self.add(f"stage{i + 1}", stage))
            c = stage.out_channels
            coord_channels = 0
            level_channels.append(c)
        self.per_point = bool(config.fp)
        self.fps: List[FPLayer] = []
        if self.per_point:
            if len(config.fp) != len(config.stages):
                raise ConfigError("per-point networks need one FP layer per stage")
            for j, mlp in enumerate(config.fp):
                skip = level_channels[len(config.stages) - 1 - j]
                fp = FPLayer(c + skip, mlp, rng=rng)
                self.fps.append(self.add(f"fp{j + 1}", fp))
                c = fp.out_channels
        if config.one_hot_dim:
            c += config.one_hot_dim
        self.fcs: List[FC] = []
        for j, (co, ratio) in enumerate(config.fc):
            self.fcs.append(self.add(f"fc{j + 1}", FC(c, co, ratio, rng=rng)))
            c = co
        self.fcs.append(self.add(f"fc{len(config.fc) + 1}", FC(c, self.output_channels, terminal=True, rng=rng)))
        self.assign_names()

    @property
    def output_channels(self) -> int:
        return 3 if self.config.task == "normal_estimation" else self.config.num_classes

    def __call__(self, coords: np.ndarray, ctx: Context, one_hot: Optional[np.ndarray] = None) -> Tensor:
        """Forward a (B, 3, N) batch; returns (B, K) or per-point (B, K, N)."""
        coords = np.asarray(coords, dtype=np.float64)
        h = Tensor(coords)
        levels = [(coords, h)]
        for stage in self.stages:
            coords, h = stage(coords, h, ctx)
            levels.append((coords, h))
        if self.per_point:
            for j, fp in enumerate(self.fps):
                fine_coords, skip = levels[len(self.stages) - 1 - j]
                h = feature_propagate(fp, coords, h, fine_coords, skip, ctx.training)
                coords = fine_coords
                ctx.record(fp.name, _table_shape(h.shape), h.data)
        else:
            h = reshape(h, h.shape[:2])
        if self.config.one_hot_dim:
            if one_hot is None:
                raise ConfigError(f"{self.config.task} network needs a one-hot object label")
            oh = np.asarray(one_hot, dtype=np.float64)
            if self.per_point:
                oh = np.broadcast_to(oh[:, :, None], oh.shape + (h.shape[2],))
            h = concat_channels([h, Tensor(oh)], axis=1)
        for fc in self.fcs:
            h = fc_forward(fc, h, ctx)
            ctx.record(fc.name, _table_shape(h.shape) if self.per_point else tuple(h.shape[1:]), h.data)
        return h

    def trace_shapes(self, batch: int = 1, seed: int = 0, one_hot: Optional[np.ndarray] = None) -> list:
        """Run an eval-mode forward on random input and return recorded shapes."""
        from .tensor import no_grad

        rng = make_rng(seed)
        coords = rng.uniform(-1, 1, (batch, 3, self.config.input_points))
        if self.config.one_hot_dim and one_hot is None:
            one_hot = np.zeros((batch, self.config.one_hot_dim))
            one_hot[:, 0] = 1.0
        ctx = Context(training=False, rng=rng, trace=[])
        with no_grad():
            self(coords, ctx, one_hot)
        return ctx.trace

    def infer_shapes(self) -> list:
        """Same records as ``trace_shapes`` from channel and point arithmetic alone."""
        n = self.config.input_points
        out = []
        levels = [n]
        for stage in self.stages:
            pool = stage.ppool
            n = pool.output_points(n)
            out.append((pool.name, (pool.out_channels,) if pool.is_global else (pool.out_channels, n)))
            if stage.block is not None:
                for layer in stage.block.layers:
                    out.append((layer.name, (layer.out_channels, n)))
                out.append((stage.name, (stage.out_channels, n)))
            levels.append(n)
        if self.per_point:
            for j, fp in enumerate(self.fps):
                n = levels[len(self.stages) - 1 - j]
                out.append((fp.name, (fp.out_channels, n)))
        for fc in self.fcs:
            out.append((fc.name, (fc.out_channels, n) if self.per_point else (fc.out_channels,)))
        return out


# ---------------------------------------------------------------------------
# published configurations
# ---------------------------------------------------------------------------


def classification_config(
    k: int = 24, groups: int = 2, num_classes: int = 40, connectivity: str = "dense", input_points: int = 1024
) -> NetworkConfig:
    """Shape classification network: 3 PPools, dense blocks of 3 and 5 ePConvs, 3 FCs."""
    return NetworkConfig(
        task="classification",
        input_points=input_points,
        k=k,
        groups=groups,
        num_classes=num_classes,
        connectivity=connectivity,
        stages=[
            StageConfig(PPoolConfig(96, ratio=1 / 2, radius=0.25, neighbor_count=64), 3, 0.2, 32),
            StageConfig(PPoolConfig(144, ratio=1 / 4, radius=0.3, neighbor_count=64), 5, 0.4, 16),
            StageConfig(PPoolConfig(512, is_global=True, neighbor_count=128)),
        ],
        fc=[(512, 0.5), (256, 0.5)],
    )


def _per_point_stages(first_ratio: float, first_radius: float, second_radius: float, second_count: int):
    return [
        StageConfig(PPoolConfig(64, ratio=first_ratio, radius=first_radius, neighbor_count=32)),
        StageConfig(PPoolConfig(128, ratio=1 / 4, radius=second_radius, neighbor_count=second_count), 4, 0.3, 32),
        StageConfig(PPoolConfig(192, ratio=1 / 4, radius=0.3, neighbor_count=32), 6, 0.5, 16),
        StageConfig(PPoolConfig(360, ratio=1 / 4, radius=0.8, neighbor_count=32), 3, 0.8, 8),
    ]


def segmentation_config(k: int = 24, groups: int = 2, num_parts: int = 50, one_hot_dim: int = 16) -> NetworkConfig:
    """Part segmentation network: 4 PPools, dense blocks of 4/6/3, 4 FP layers, 2 FCs."""
    return NetworkConfig(
        task="part_segmentation",
        input_points=2048,
        k=k,
        groups=groups,
        num_classes=num_parts,
        one_hot_dim=one_hot_dim,
        stages=_per_point_stages(1 / 2, 0.1, 0.2, 64),
        fp=[[512, 512], [384, 384], [256, 256], [128, 128]],
        fc=[(128, 0.5)],
    )


def normal_estimation_config(k: int = 24, groups: int = 2, one_hot_dim: int = 40) -> NetworkConfig:
    """Normal estimation: the segmentation layout on 1024 points, stage 1 keeps every point."""
    return NetworkConfig(
        task="normal_estimation",
        input_points=1024,
        k=k,
        groups=groups,
        num_classes=3,
        one_hot_dim=one_hot_dim,
        stages=_per_point_stages(1.0, 0.2, 0.2, 32),
        fp=[[512, 512], [384, 384], [256, 256], [128, 128]],
        fc=[(128, 0.5)],
    )


def build_classification(k: int = 24, groups: int = 2, num_classes: int = 40, connectivity: str = "dense", **kw) -> Network:
    return Network(classification_config(k, groups, num_classes, connectivity, **kw))


def build_segmentation(k: int = 24, groups: int = 2, num_parts: int = 50, one_hot_dim: int = 16) -> Network:
    return Network(segmentation_config(k, groups, num_parts, one_hot_dim))


def build_normal_estimation(k: int = 24, groups: int = 2, one_hot_dim: int = 40) -> Network:
    return Network(normal_estimation_config(k, groups, one_hot_dim))


def build(config: NetworkConfig) -> Network:
    return Network(config)


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------


@dataclass
class LayerCost:
    name: str
    kind: str
    output_shape: tuple
    params: Dict[str, int]
    flops: int

    @property
    def total_params(self) -> int:
        return sum(self.params.values())


@dataclass
class CostReport:
    """Per-layer and total parameters/FLOPs for one input size (batch 1)."""

    n_points: int
    rows: List[LayerCost]

    @property
    def total_params(self) -> int:
        return sum(r.total_params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    def by_category(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for r in self.rows:
            for key, v in r.params.items():
                out[key] = out.get(key, 0) + v
        return out

    def weight_bias_bn(self) -> Dict[str, int]:
        """Sub-tallies: linear weights, linear biases, BN scale/shift."""
        cats = self.by_category()
        return {
            "weights": sum(v for k, v in cats.items() if k.endswith("_weight")),
            "biases": sum(v for k, v in cats.items() if k.endswith("_bias")),
            "bn": cats.get("bn", 0),
        }

    def table(self) -> str:
        lines = ["layer\tkind\toutput_shape\tparams\tflops"]
        for r in self.rows:
            shape = ",".join(str(s) for s in r.output_shape)
            lines.append(f"{r.name}\t{r.kind}\t({shape})\t{r.total_params}\t{r.flops}")
        lines.append(f"total\t-\t-\t{self.total_params}\t{self.total_flops}")
        return "\n".join(lines)


def _slp_cost(lin, positions: int, category: str) -> Tuple[Dict[str, int], int]:
    params = {f"{category}_weight": lin.weight_count()}
    flops = FLOPS_PER_MAC * lin.weight_count() * positions
    if lin.bias is not None:
        params[f"{category}_bias"] = lin.out_channels
        flops += lin.out_channels * positions
    return params, flops


def _bn_relu_cost(channels: int, positions: int) -> Tuple[int, int]:
    return 2 * channels, (FLOPS_BN + FLOPS_RELU) * channels * positions


def _merge(*dicts) -> Dict[str, int]:
    out: Dict[str, int] = {}
    for d in dicts:
        for k, v in d.items():
            out[k] = out.get(k, 0) + v
    return out


def _pconv_cost(layer: PConv, centroids: int, neighbors: int) -> Tuple[Dict[str, int], int]:
    positions = centroids * neighbors
    p, f = _slp_cost(layer.slp_phi, positions, "phi")
    bn_p, bn_f = _bn_relu_cost(layer.out_channels, positions)
    f += bn_f + FLOPS_RHO * layer.out_channels * positions
    return _merge(p, {"bn": bn_p}), f


def _epconv_cost(layer: EPConv, points: int) -> Tuple[Dict[str, int], int]:
    m = layer.spec.neighbor_count
    positions = points * m
    p_phi, f = _slp_cost(layer.slp_phi, positions, "phi")
    bn1_p, bn1_f = _bn_relu_cost(layer.wide, positions)
    f += bn1_f + FLOPS_RHO * layer.wide * positions
    p_psi, f_psi = _slp_cost(layer.slp_psi, points, "psi")
    bn2_p, bn2_f = _bn_relu_cost(layer.k, points)
    f += f_psi + bn2_f
    bn_total = bn1_p + bn2_p
    if layer.preactivation:
        pre_p, pre_f = _bn_relu_cost(layer.in_channels, points)
        bn_total += pre_p
        f += pre_f
    return _merge(p_phi, p_psi, {"bn": bn_total}), f


def layer_costs(network: Network, n_points: Optional[int] = None) -> CostReport:
    """Walk the network in forward order with symbolic point counts."""
    cfg = network.config
    n = n_points or cfg.input_points
    rows: List[LayerCost] = []
    level_points = [n]
    for stage in network.stages:
        pool = stage.ppool
        n_out = pool.output_points(n)
        params, flops = _pconv_cost(pool.pconv, n_out, pool.neighbors_per_centroid(n))
        shape = (pool.out_channels,) if pool.is_global else (pool.out_channels, n_out)
        rows.append(LayerCost(pool.name, "ppool", shape, params, flops))
        n = n_out
        if stage.block is not None:
            for layer in stage.block.layers:
                if isinstance(layer, EPConv):
                    params, flops = _epconv_cost(layer, n)
                else:
                    params, flops = _pconv_cost(layer, n, layer.spec.neighbor_count)
                rows.append(LayerCost(layer.name, type(layer).__name__.lower(), (layer.out_channels, n), params, flops))
        level_points.append(n)
    if network.per_point:
        for j, fp in enumerate(network.fps):
            fine = level_points[len(network.stages) - 1 - j]
            coarse_c = fp.in_channels - _skip_channels(network, j)
            flops = FLOPS_PER_MAC * min(fp.neighbors, n) * coarse_c * fine
            params: Dict[str, int] = {}
            for slp, bn in zip(fp.slps, fp.bns):
                p, f = _slp_cost(slp, fine, "fp")
                bn_p, bn_f = _bn_relu_cost(slp.out_channels, fine)
                params = _merge(params, p, {"bn": bn_p})
                flops += f + bn_f
            rows.append(LayerCost(fp.name, "fp", (fp.out_channels, fine), params, flops))
            n = fine
    positions = n if network.per_point else 1
    for fc in network.fcs:
        p, f = _slp_cost(fc.linear, positions, "fc")
        if not fc.terminal:
            bn_p, bn_f = _bn_relu_cost(fc.out_channels, positions)
            p = _merge(p, {"bn": bn_p})
            f += bn_f
        shape = (fc.out_channels, n) if network.per_point else (fc.out_channels,)
        rows.append(LayerCost(fc.name, "fc", shape, p, f))
    return CostReport(n_points or cfg.input_points, rows)


def _skip_channels(network: Network, j: int) -> int:
    level = len(network.stages) - 1 - j
    if level == 0:
        return network.config.in_channels
    return network.stages[level - 1].out_channels


def count_params(network: Network) -> CostReport:
    return layer_costs(network)


def count_flops(network: Network, n_points: Optional[int] = None) -> CostReport:
    return layer_costs(network, n_points)


# ---------------------------------------------------------------------------
# depth presets
# ---------------------------------------------------------------------------

# Dense-layer allocation (stage 1, stage 2) and stage-2 PPool neighbor count
# per depth L = 3 PPools + dense layers. L=11 is the published network; the
# others were chosen to match the published parameter and FLOP totals.
DEPTH_PRESETS: Dict[int, Tuple[int, int, int]] = {
    6: (0, 3, 32),
    9: (3, 3, 32),
    11: (3, 5, 64),
    15: (3, 9, 64),
    19: (5, 11, 64),
    23: (5, 15, 64),
}


def depth_preset(depth: int, k: int = 24, groups: int = 2, num_classes: int = 40) -> NetworkConfig:
    if depth not in DEPTH_PRESETS:
        raise ConfigError(f"no depth preset for L={depth}; available: {sorted(DEPTH_PRESETS)}")
    a, b, pool_nbrs = DEPTH_PRESETS[depth]
    cfg = classification_config(k, groups, num_classes)
    cfg.stages[0].dense_layers = a
    cfg.stages[1].dense_layers = b
    cfg.stages[1].ppool.neighbor_count = pool_nbrs
    return cfg
