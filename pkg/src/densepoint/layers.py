"""Point convolution operators and the dense block built from them.

Tensors are channel-first: per-point features are ``(B, C, N)``, gathered
neighborhoods ``(B, C, N_o, M)``. Every transform is a shared single-layer
perceptron (SLP) followed by BN and ReLU.

Because an SLP acts on each point independently it commutes with neighbor
gathering, so the fast path transforms the N source points once and gathers
afterwards; centroid subtraction on the XYZ channels is applied to the
transformed values through linearity. ``fast=False`` runs the literal
gather -> normalise -> SLP order and is used to cross-check the fast path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import geometry
from .geometry import NeighborhoodIndex, NeighborhoodSpec
from .tensor import (
    BNState,
    ConfigError,
    Parameter,
    ShapeError,
    Tensor,
    batch_norm,
    concat_channels,
    dropout,
    gather_points,
    grouped_linear,
    mul,
    neighborhood_bn_relu_max,
    reduce_max,
    reduce_mean,
    reduce_sum,
    relu,
    sub,
)

RHO = ("max", "sum", "avg")


@dataclass
class Context:
    """Per-forward settings threaded through every layer.

    ``deterministic`` switches neighborhoods to the all-in-radius mode and
    seeds FPS with an order-independent point. ``trace`` collects
    ``(layer name, output shape)`` pairs when it is a list.
    """

    training: bool = False
    rng: Optional[np.random.Generator] = None
    deterministic: bool = False
    trace: Optional[list] = None
    watch_finite: bool = False
    first_nonfinite: Optional[str] = None

    def record(self, name: str, shape: tuple, value: Optional[np.ndarray] = None) -> None:
        if self.trace is not None:
            self.trace.append((name, tuple(shape)))
        if (
            self.watch_finite
            and self.first_nonfinite is None
            and value is not None
            and not np.all(np.isfinite(value))
        ):
            self.first_nonfinite = name


# ---------------------------------------------------------------------------
# module plumbing
# ---------------------------------------------------------------------------


class Module:
    """Named container of parameters, BN states and sub-modules."""

    def __init__(self):
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "name", "")

    def __setattr__(self, key, value):
        if isinstance(value, (Module, Parameter, BNState)):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def add(self, key: str, value):
        setattr(self, key, value)
        return value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, child in self._children.items():
            full = f"{prefix}{key}"
            if isinstance(child, Parameter):
                yield full, child
            elif isinstance(child, Module):
                yield from child.named_parameters(full + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_bn_states(self, prefix: str = "") -> Iterator[Tuple[str, BNState]]:
        for key, child in self._children.items():
            full = f"{prefix}{key}"
            if isinstance(child, BNState):
                yield full, child
            elif isinstance(child, Module):
                yield from child.named_bn_states(full + ".")

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for key, child in self._children.items():
            if isinstance(child, Module):
                yield from child.named_modules(f"{prefix}{key}.")

    def assign_names(self, prefix: str = "") -> None:
        for name, mod in self.named_modules(prefix):
            object.__setattr__(mod, "name", name)

    def state_dict(self) -> "dict[str, np.ndarray]":
        out = {name: p.data for name, p in self.named_parameters()}
        for name, st in self.named_bn_states():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def load_state_dict(self, arrays: "dict[str, np.ndarray]") -> None:
        """Copy arrays in; the first missing or mis-shaped entry raises."""
        own = self.state_dict()
        for name, current in own.items():
            if name not in arrays:
                raise ShapeError(f"checkpoint lacks parameter {name}")
            if tuple(arrays[name].shape) != current.shape:
                raise ShapeError(
                    f"parameter {name}: checkpoint shape {tuple(arrays[name].shape)} != network shape {current.shape}"
                )
        extra = set(arrays) - set(own)
        if extra:
            raise ShapeError(f"checkpoint has unknown parameter {sorted(extra)[0]}")
        for name, p in self.named_parameters():
            p.data[...] = arrays[name]
        for name, st in self.named_bn_states():
            st.running_mean = np.array(arrays[f"{name}.running_mean"], dtype=np.float64)
            st.running_var = np.array(arrays[f"{name}.running_var"], dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    """Shared (optionally grouped) SLP weights, init uniform in +-sqrt(1/fan_in)."""

    def __init__(self, in_channels: int, out_channels: int, groups: int = 1, rng=None, bias: bool = True):
        super().__init__()
        if groups < 1 or in_channels % groups or out_channels % groups:
            raise ConfigError(
                f"channels ({in_channels} in, {out_channels} out) must be divisible by groups={groups}"
            )
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels // groups
        bound = math.sqrt(1.0 / fan_in)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.groups = groups
        self.weight = Parameter(rng.uniform(-bound, bound, (out_channels, fan_in)))
        self.bias = Parameter(rng.uniform(-bound, bound, out_channels)) if bias else None

    def __call__(self, x: Tensor, with_bias: bool = True) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"{self.name or 'linear'}: expected {self.in_channels} channels, got {x.shape[1]}")
        return grouped_linear(x, self.weight, self.bias if with_bias else None, self.groups)

    def weight_count(self) -> int:
        return self.in_channels * self.out_channels // self.groups


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.state = BNState(channels, momentum, eps)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.state, training)


def aggregate(x: Tensor, rho: str, axis: int = -1) -> Tensor:
    """Symmetric aggregation over the neighbor axis."""
    if rho == "max":
        return reduce_max(x, axis)
    if rho == "sum":
        return reduce_sum(x, axis)
    if rho == "avg":
        return reduce_mean(x, axis)
    raise ConfigError(f"unknown aggregation {rho!r}; expected one of {RHO}")


def _batched_index(index: NeighborhoodIndex) -> Tuple[np.ndarray, np.ndarray]:
    if index.neighbors.ndim == 2:
        return index.centroids[None], index.neighbors[None]
    return index.centroids, index.neighbors


def _transform_neighborhoods(
    linear: Linear,
    features: Tensor,
    index: NeighborhoodIndex,
    coord_channels: int,
    normalize: bool,
    fast: bool = True,
) -> Tensor:
    """SLP applied to every gathered neighbor: (B, Ci, N) -> (B, Co, N_o, M)."""
    cent, nbrs = _batched_index(index)
    if not fast:
        grouped = geometry.gather_and_normalize(features, index, coord_channels, normalize)
        return linear(grouped)
    grouped = gather_points(linear(features), nbrs)
    if not (normalize and coord_channels):
        return grouped
    mask = np.zeros((1, features.shape[1], 1))
    mask[:, :coord_channels] = 1.0
    centre = mul(gather_points(features, cent), Tensor(mask))
    centre_term = linear(centre, with_bias=False)
    return sub(grouped, centre_term.reshape(centre_term.shape + (1,)))


def _conv_aggregate(
    linear: Linear,
    bn: BatchNorm,
    rho: str,
    features: Tensor,
    index: NeighborhoodIndex,
    coord_channels: int,
    normalize: bool,
    training: bool,
    fast: bool = True,
) -> Tensor:
    """rho over neighbors of relu(bn(SLP(gathered features))): (B, Co, N_o)."""
    if fast and rho == "max":
        cent, nbrs = _batched_index(index)
        centre_term = None
        if normalize and coord_channels:
            mask = np.zeros((1, features.shape[1], 1))
            mask[:, :coord_channels] = 1.0
            centre_term = linear(mul(gather_points(features, cent), Tensor(mask)), with_bias=False)
        return neighborhood_bn_relu_max(
            linear(features), nbrs, centre_term, bn.gamma, bn.beta, bn.state, training
        )
    h = _transform_neighborhoods(linear, features, index, coord_channels, normalize, fast)
    return aggregate(relu(bn(h, training)), rho)


# ---------------------------------------------------------------------------
# PConv / ePConv
# ---------------------------------------------------------------------------


class PConv(Module):
    """Shared SLP -> BN -> ReLU on each neighbor, then symmetric aggregation."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rho: str = "max",
        coord_channels: int = 0,
        spec: Optional[NeighborhoodSpec] = None,
        rng=None,
    ):
        super().__init__()
        if rho not in RHO:
            raise ConfigError(f"unknown aggregation {rho!r}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.rho = rho
        self.coord_channels = coord_channels
        self.spec = spec
        self.slp_phi = Linear(in_channels, out_channels, rng=rng)
        self.bn_phi = BatchNorm(out_channels)


def pconv_forward(
    layer: PConv,
    features: Tensor,
    index: NeighborhoodIndex,
    training: bool,
    normalize: bool = True,
    fast: bool = True,
) -> Tensor:
    """Returns (B, Co, N_o): aggregated SLP responses of each neighborhood."""
    if features.shape[1] != layer.in_channels:
        raise ShapeError(f"{layer.name or 'pconv'}: expected {layer.in_channels} channels, got {features.shape[1]}")
    return _conv_aggregate(
        layer.slp_phi, layer.bn_phi, layer.rho, features, index, layer.coord_channels, normalize, training, fast
    )


class EPConv(Module):
    """Grouped SLP widened to 4k, aggregation, dropout, then an SLP back to k."""

    def __init__(
        self,
        in_channels: int,
        k: int,
        groups: int = 2,
        spec: Optional[NeighborhoodSpec] = None,
        dropout: float = 0.2,
        rho: str = "max",
        coord_channels: int = 0,
        preactivation: bool = False,
        bottleneck: int = 4,
        rng=None,
    ):
        super().__init__()
        if rho not in RHO:
            raise ConfigError(f"unknown aggregation {rho!r}")
        if not 0.0 <= dropout < 1.0:
            raise ConfigError(f"dropout ratio must lie in [0, 1), got {dropout}")
        self.in_channels = in_channels
        self.k = k
        self.groups = groups
        self.spec = spec or NeighborhoodSpec()
        self.dropout = dropout
        self.rho = rho
        self.coord_channels = coord_channels
        self.preactivation = preactivation
        self.wide = bottleneck * k
        if preactivation:
            self.bn_in = BatchNorm(in_channels)
        self.slp_phi = Linear(in_channels, self.wide, groups=groups, rng=rng)
        self.bn_phi = BatchNorm(self.wide)
        self.slp_psi = Linear(self.wide, k, rng=rng)
        self.bn_psi = BatchNorm(k)

    @property
    def out_channels(self) -> int:
        return self.k


def epconv_forward(
    layer: EPConv,
    features: Tensor,
    index: NeighborhoodIndex,
    ctx: Context,
    fast: bool = True,
    return_pooled: bool = False,
):
    """Returns (B, k, N_o); with ``return_pooled`` also the pre-psi f_N(x)."""
    if features.shape[1] != layer.in_channels:
        raise ShapeError(f"{layer.name or 'epconv'}: expected {layer.in_channels} channels, got {features.shape[1]}")
    if layer.preactivation:
        features = relu(layer.bn_in(features, ctx.training))
    pooled = _conv_aggregate(
        layer.slp_phi, layer.bn_phi, layer.rho, features, index,
        layer.coord_channels, layer.spec.normalize, ctx.training, fast,
    )
    dropped = dropout(pooled, layer.dropout, ctx.training, ctx.rng)
    out = relu(layer.bn_psi(layer.slp_psi(dropped), ctx.training))
    return (out, pooled) if return_pooled else out


def _local_index(coords: np.ndarray, spec: NeighborhoodSpec, ctx: Context) -> NeighborhoodIndex:
    """Neighborhoods centred on every point of ``coords`` (no downsampling)."""
    b, _, n = coords.shape
    cent = np.broadcast_to(np.arange(n), (b, n))
    if ctx.deterministic and spec.method == "sphere":
        spec = NeighborhoodSpec(spec.method, spec.radius, spec.neighbor_count, spec.normalize, "all")
    return geometry.query_neighborhood(coords, cent, spec, ctx.rng)


# ---------------------------------------------------------------------------
# PPool
# ---------------------------------------------------------------------------


class PPool(Module):
    """FPS downsampling followed by a PConv over each retained centroid.

    Exactly one of ``ratio`` / ``num_out`` / ``is_global`` selects the output
    size. Global pooling convolves all points into a single feature vector.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        ratio: Optional[float] = None,
        num_out: Optional[int] = None,
        is_global: bool = False,
        spec: Optional[NeighborhoodSpec] = None,
        rho: str = "max",
        coord_channels: int = 0,
        rng=None,
    ):
        super().__init__()
        if not is_global and ratio is None and num_out is None:
            raise ConfigError("PPool needs a ratio, an absolute output size, or is_global")
        if ratio is not None and not 0 < ratio <= 1:
            raise ConfigError(f"PPool ratio must lie in (0, 1], got {ratio}")
        self.ratio = ratio
        self.num_out = num_out
        self.is_global = is_global
        self.spec = spec or NeighborhoodSpec()
        self.pconv = PConv(in_channels, out_channels, rho, coord_channels, self.spec, rng=rng)

    @property
    def in_channels(self) -> int:
        return self.pconv.in_channels

    @property
    def out_channels(self) -> int:
        return self.pconv.out_channels

    def output_points(self, n_in: int) -> int:
        if self.is_global:
            return 1
        n_out = self.num_out if self.num_out is not None else int(round(n_in * self.ratio))
        if not 1 <= n_out <= n_in:
            raise ConfigError(f"PPool cannot produce {n_out} centroids from {n_in} points")
        return n_out

    def neighbors_per_centroid(self, n_in: int) -> int:
        return n_in if self.is_global else self.spec.neighbor_count


def ppool_forward(
    layer: PPool, coords: np.ndarray, features: Tensor, ctx: Context, fast: bool = True
) -> Tuple[np.ndarray, Tensor]:
    """Returns (centroid coords (B, 3, N_o), pooled features (B, Co, N_o))."""
    b, _, n = coords.shape
    n_out = layer.output_points(n)
    if layer.is_global:
        cent = np.zeros((b, 1), dtype=np.int64)
        index = NeighborhoodIndex(cent, np.broadcast_to(np.arange(n), (b, 1, n)))
        out = pconv_forward(layer.pconv, features, index, ctx.training, normalize=False, fast=fast)
        return np.zeros((b, 3, 1)), out
    seed = geometry.invariant_seed_index(coords) if ctx.deterministic else 0
    cent = geometry.farthest_point_sample(coords, n_out, seed)
    spec = layer.spec
    if ctx.deterministic and spec.method == "sphere":
        spec = NeighborhoodSpec(spec.method, spec.radius, spec.neighbor_count, spec.normalize, "all")
    index = geometry.query_neighborhood(coords, cent, spec, ctx.rng)
    out = pconv_forward(layer.pconv, features, index, ctx.training, spec.normalize, fast)
    new_coords = np.take_along_axis(coords, cent[:, None, :], axis=2)
    return new_coords, out


# ---------------------------------------------------------------------------
# stage blocks
# ---------------------------------------------------------------------------


class DensePointBlock(Module):
    """ePConv stack where layer l sees [f0, f1, ..., f_{l-1}] (input c0 + (l-1)k)."""

    def __init__(
        self,
        c0: int,
        k: int,
        num_layers: int,
        groups: int = 2,
        spec: Optional[NeighborhoodSpec] = None,
        dropout: float = 0.2,
        rho: str = "max",
        preactivation: bool = False,
        rng=None,
    ):
        super().__init__()
        self.c0 = c0
        self.k = k
        self.layers: List[EPConv] = []
        for i in range(num_layers):
            layer = EPConv(c0 + i * k, k, groups, spec, dropout, rho, preactivation=preactivation, rng=rng)
            self.layers.append(self.add(f"epconv{i + 1}", layer))

    @property
    def out_channels(self) -> int:
        return self.c0 + len(self.layers) * self.k


def densepoint_block_forward(
    block: DensePointBlock, features: Tensor, coords: np.ndarray, ctx: Context
) -> Tensor:
    if features.shape[1] != block.c0:
        raise ShapeError(f"{block.name or 'block'}: expected {block.c0} channels, got {features.shape[1]}")
    running = features
    for layer in block.layers:
        index = _local_index(coords, layer.spec, ctx)
        out = epconv_forward(layer, running, index, ctx)
        ctx.record(layer.name, out.shape[1:], out.data)
        running = concat_channels([running, out], axis=1)
    return running


class LayerByLayerBlock(Module):
    """Classic chaining (each layer sees only its predecessor).

    ``concat_at_end`` additionally returns [input, out_1, ..., out_L] as the
    stage output. ``conv`` picks plain PConv layers or ePConv layers.
    """

    def __init__(
        self,
        c0: int,
        width: int,
        num_layers: int,
        spec: Optional[NeighborhoodSpec] = None,
        conv: str = "pconv",
        concat_at_end: bool = False,
        groups: int = 2,
        dropout: float = 0.2,
        rho: str = "max",
        rng=None,
    ):
        super().__init__()
        if conv not in ("pconv", "epconv"):
            raise ConfigError(f"unknown conv kind {conv!r}")
        self.c0 = c0
        self.width = width
        self.concat_at_end = concat_at_end
        self.spec = spec or NeighborhoodSpec()
        self.layers: list = []
        ci = c0
        for i in range(num_layers):
            if conv == "pconv":
                layer = PConv(ci, width, rho, spec=self.spec, rng=rng)
            else:
                if width % 4:
                    raise ConfigError(f"ePConv width {width} must be divisible by the 4:1 bottleneck")
                layer = EPConv(ci, width, groups, self.spec, dropout, rho, bottleneck=4, rng=rng)
            self.layers.append(self.add(f"{conv}{i + 1}", layer))
            ci = width

    @property
    def out_channels(self) -> int:
        if not self.layers:
            return self.c0
        if self.concat_at_end:
            return self.c0 + len(self.layers) * self.width
        return self.width


def layer_by_layer_forward(
    block: LayerByLayerBlock, features: Tensor, coords: np.ndarray, ctx: Context
) -> Tensor:
    outputs = [features]
    h = features
    for layer in block.layers:
        spec = layer.spec
        index = _local_index(coords, spec, ctx)
        if isinstance(layer, EPConv):
            h = epconv_forward(layer, h, index, ctx)
        else:
            if h.shape[1] != layer.in_channels:
                raise ShapeError(
                    f"{layer.name or 'layer'}: expected {layer.in_channels} channels, got {h.shape[1]}"
                )
            h = pconv_forward(layer, h, index, ctx.training, spec.normalize)
        ctx.record(layer.name, h.shape[1:], h.data)
        outputs.append(h)
    if block.concat_at_end and block.layers:
        return concat_channels(outputs, axis=1)
    return h


# ---------------------------------------------------------------------------
# feature propagation and fully connected layers
# ---------------------------------------------------------------------------


class FPLayer(Module):
    """Inverse-distance interpolation from coarse to fine points, skip concat, MLP."""

    def __init__(self, in_channels: int, mlp: Sequence[int], neighbors: int = 3, rng=None):
        super().__init__()
        self.in_channels = in_channels
        self.mlp_channels = list(mlp)
        self.neighbors = neighbors
        self.slps: list = []
        self.bns: list = []
        ci = in_channels
        for i, co in enumerate(self.mlp_channels):
            self.slps.append(self.add(f"slp{i + 1}", Linear(ci, co, rng=rng)))
            self.bns.append(self.add(f"bn{i + 1}", BatchNorm(co)))
            ci = co

    @property
    def out_channels(self) -> int:
        return self.mlp_channels[-1] if self.mlp_channels else self.in_channels


def interpolation_weights(
    fine: np.ndarray, coarse: np.ndarray, neighbors: int = 3, eps: float = 1e-10
) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest coarse indices and normalised 1/d^2 weights for each fine point.

    A coarse point at distance exactly 0 takes the full weight.
    """
    b, _, nf = fine.shape
    nc = coarse.shape[2]
    if nc == 0:
        raise ShapeError("feature propagation from an empty coarse set")
    k = min(neighbors, nc)
    d2 = np.zeros((b, nf, nc))
    for axis in range(3):
        diff = fine[:, axis, :, None] - coarse[:, axis, None, :]
        d2 += diff * diff
    idx = np.argsort(d2, axis=2, kind="stable")[:, :, :k]
    d = np.take_along_axis(d2, idx, axis=2)
    w = 1.0 / (d + eps)
    exact = d[:, :, :1] == 0.0
    w = np.where(exact, (np.arange(k) == 0).astype(float), w)
    w = w / w.sum(axis=2, keepdims=True)
    return idx, w


def feature_propagate(
    layer: FPLayer,
    coarse_coords: np.ndarray,
    coarse_feats: Tensor,
    fine_coords: np.ndarray,
    skip_feats: Optional[Tensor],
    training: bool,
) -> Tensor:
    """Returns (B, C_out, N_fine)."""
    if coarse_coords.shape[2] > fine_coords.shape[2]:
        raise ShapeError("coarse point set is larger than the fine one")
    idx, w = interpolation_weights(fine_coords, coarse_coords, layer.neighbors)
    gathered = gather_points(coarse_feats, idx)
    interp = reduce_sum(mul(gathered, Tensor(w[:, None])), axis=3)
    h = interp if skip_feats is None else concat_channels([interp, skip_feats], axis=1)
    if h.shape[1] != layer.in_channels:
        raise ShapeError(f"{layer.name or 'fp'}: expected {layer.in_channels} channels, got {h.shape[1]}")
    for slp, bn in zip(layer.slps, layer.bns):
        h = relu(bn(slp(h), training))
    return h


class FC(Module):
    """Linear -> BN -> ReLU -> dropout, or a bare linear map when ``terminal``."""

    def __init__(self, in_channels: int, out_channels: int, dropout: float = 0.0, terminal: bool = False, rng=None):
        super().__init__()
        if not 0.0 <= dropout < 1.0:
            raise ConfigError(f"dropout ratio must lie in [0, 1), got {dropout}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.dropout = dropout
        self.terminal = terminal
        self.linear = Linear(in_channels, out_channels, rng=rng)
        if not terminal:
            self.bn = BatchNorm(out_channels)


def fc_forward(layer: FC, x: Tensor, ctx: Context) -> Tensor:
    """x is (B, C) or per-point (B, C, N)."""
    h = layer.linear(x)
    if layer.terminal:
        return h
    h = relu(layer.bn(h, ctx.training))
    return dropout(h, layer.dropout, ctx.training, ctx.rng)
