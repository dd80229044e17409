"""Central finite-difference checks for every differentiable op and layer.

Each case builds a tiny problem and returns ``(fn, inputs)``; ``fn()``
recomputes the output from the current contents of ``inputs``. The check
compares analytic gradients of ``sum(fn() * w)`` for a fixed random ``w``
against central differences. Ops are looked up on their modules at call
time, so tests can swap in a broken implementation as a negative control.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import geometry as G
from . import layers as L
from . import networks as NW
from . import tensor as T
from . import training as TR

DEFAULT_TOL = 1e-4
Case = Callable[[np.random.Generator], Tuple[Callable[[], T.Tensor], List[T.Tensor]]]


@dataclass
class GradResult:
    name: str
    max_rel_error: float
    entries: int
    passed: bool


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| scaled by the largest magnitude of either gradient."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check(
    fn: Callable[[], T.Tensor],
    inputs: Sequence[T.Tensor],
    rng: np.random.Generator,
    step: float = 1e-5,
    max_entries: int = 24,
) -> Tuple[float, int]:
    """Worst relative error over (a sample of) the entries of every input."""
    out = fn()
    weight = T.Tensor(rng.normal(size=out.shape))
    for x in inputs:
        x.requires_grad = True
        x.grad = np.zeros_like(x.data)
    T.backward(T.reduce_sum(T.mul(fn(), weight)))
    analytic, numeric = [], []
    with T.no_grad():
        for x in inputs:
            flat = x.data.reshape(-1)
            picks = np.arange(flat.size)
            if flat.size > max_entries:
                picks = rng.choice(flat.size, max_entries, replace=False)
            for i in picks:
                orig = flat[i]
                flat[i] = orig + step
                up = float((fn().data * weight.data).sum())
                flat[i] = orig - step
                down = float((fn().data * weight.data).sum())
                flat[i] = orig
                numeric.append((up - down) / (2 * step))
                analytic.append(x.grad.reshape(-1)[i])
    return relative_error(np.array(analytic), np.array(numeric)), len(numeric)


# ---------------------------------------------------------------------------
# cases
# ---------------------------------------------------------------------------


def _t(rng, *shape, low=None, high=None):
    if low is not None:
        return T.Tensor(rng.uniform(low, high, shape))
    return T.Tensor(rng.normal(size=shape))


def _params(module: L.Module) -> List[T.Tensor]:
    return list(module.parameters())


def _cloud(rng, b=2, n=24):
    return rng.uniform(-1, 1, (b, 3, n))


def _ops() -> Dict[str, Case]:
    def binary(name):
        def case(rng):
            a, b = _t(rng, 2, 3, 4), _t(rng, 1, 3, 1)
            if name == "div":
                b = _t(rng, 1, 3, 1, low=0.5, high=2.0)
            return (lambda: getattr(T, name)(a, b)), [a, b]

        return case

    def unary(name, low=None, high=None):
        def case(rng):
            x = _t(rng, 2, 3, 5, low=low, high=high)
            return (lambda: getattr(T, name)(x)), [x]

        return case

    def reshape(rng):
        x = _t(rng, 2, 3, 4)
        return (lambda: T.reshape(x, (6, 4))), [x]

    def transpose(rng):
        x = _t(rng, 2, 3, 4)
        return (lambda: T.transpose(x, (2, 0, 1))), [x]

    def getitem(rng):
        x = _t(rng, 2, 5, 4)
        return (lambda: T.getitem(x, (slice(None), slice(1, 4)))), [x]

    def reduce(name):
        def case(rng):
            x = _t(rng, 2, 3, 6)
            return (lambda: getattr(T, name)(x, axis=2)), [x]

        return case

    def concat(rng):
        a, b = _t(rng, 2, 3, 4), _t(rng, 2, 2, 4)
        return (lambda: T.concat_channels([a, b], axis=1)), [a, b]

    def matmul(rng):
        a, b = _t(rng, 3, 4), _t(rng, 4, 5)
        return (lambda: T.matmul(a, b)), [a, b]

    def grouped_linear(rng):
        x, w, bias = _t(rng, 2, 6, 5), _t(rng, 4, 3), _t(rng, 4)
        return (lambda: T.grouped_linear(x, w, bias, groups=2)), [x, w, bias]

    def gather(rng):
        x = _t(rng, 2, 3, 7)
        idx = rng.integers(0, 7, (2, 4, 3))
        return (lambda: T.gather_points(x, idx)), [x]

    def batch_norm(training):
        def case(rng):
            x, g, b = _t(rng, 3, 4, 5), _t(rng, 4, low=0.5, high=1.5), _t(rng, 4)
            state = T.BNState(4)
            state.running_mean = rng.normal(size=4)
            state.running_var = rng.uniform(0.5, 2.0, 4)
            return (lambda: T.batch_norm(x, g, b, state, training)), [x, g, b]

        return case

    def dropout(rng):
        x = _t(rng, 2, 4, 5)
        return (lambda: T.dropout(x, 0.3, True, T.make_rng(5))), [x]

    def log_softmax(rng):
        x = _t(rng, 3, 5)
        return (lambda: T.log_softmax(x, axis=1)), [x]

    def pick(rng):
        x = _t(rng, 3, 5, 2)
        labels = rng.integers(0, 5, (3, 2))
        return (lambda: T.pick(x, labels, axis=1)), [x]

    def fused(rng):
        y, c = _t(rng, 2, 4, 9), _t(rng, 2, 4, 5)
        g = T.Tensor(np.array([1.2, -0.7, 0.9, 1.1]))
        b = _t(rng, 4)
        nbrs = rng.integers(0, 9, (2, 5, 4))
        state = T.BNState(4)
        return (lambda: T.neighborhood_bn_relu_max(y, nbrs, c, g, b, state, True)), [y, c, g, b]

    def cross_entropy(rng):
        x = _t(rng, 2, 4, 3)
        labels = rng.integers(0, 4, (2, 3))
        return (lambda: TR.softmax_cross_entropy(x, labels)), [x]

    def cosine(rng):
        x = _t(rng, 2, 3, 6)
        gt = rng.normal(size=(2, 3, 6))
        gt /= np.linalg.norm(gt, axis=1, keepdims=True)
        return (lambda: TR.cosine_normal_loss(x, gt)), [x]

    return {
        "add": binary("add"),
        "sub": binary("sub"),
        "mul": binary("mul"),
        "div": binary("div"),
        "sqrt": unary("sqrt", 0.5, 2.0),
        "exp": unary("exp"),
        "log": unary("log", 0.5, 2.0),
        "relu": unary("relu"),
        "reshape": reshape,
        "transpose": transpose,
        "getitem": getitem,
        "reduce_sum": reduce("reduce_sum"),
        "reduce_mean": reduce("reduce_mean"),
        "reduce_max": reduce("reduce_max"),
        "concat_channels": concat,
        "matmul": matmul,
        "grouped_linear": grouped_linear,
        "gather_points": gather,
        "batch_norm_train": batch_norm(True),
        "batch_norm_eval": batch_norm(False),
        "dropout": dropout,
        "log_softmax": log_softmax,
        "pick": pick,
        "neighborhood_bn_relu_max": fused,
        "softmax_cross_entropy": cross_entropy,
        "cosine_normal_loss": cosine,
    }


def _layers() -> Dict[str, Case]:
    spec = G.NeighborhoodSpec(radius=0.9, neighbor_count=6)

    def local_index(coords):
        b, _, n = coords.shape
        return G.ball_query(coords, np.broadcast_to(np.arange(n), (b, n)), spec, T.make_rng(3))

    def linear(rng):
        layer = L.Linear(6, 4, groups=2, rng=rng)
        x = _t(rng, 2, 6, 5)
        return (lambda: layer(x)), [x] + _params(layer)

    def pconv(fast):
        def case(rng):
            coords = _cloud(rng)
            layer = L.PConv(5, 6, coord_channels=3, spec=spec, rng=rng)
            x = T.Tensor(np.concatenate([coords, rng.normal(size=(2, 2, 24))], axis=1))
            index = local_index(coords)
            return (lambda: L.pconv_forward(layer, x, index, True, fast=fast)), [x] + _params(layer)

        return case

    def epconv(fast):
        def case(rng):
            coords = _cloud(rng)
            layer = L.EPConv(6, 4, groups=2, spec=spec, coord_channels=3, rng=rng)
            x = T.Tensor(np.concatenate([coords, rng.normal(size=(2, 3, 24))], axis=1))
            index = local_index(coords)

            def fn():
                ctx = L.Context(training=True, rng=T.make_rng(4))
                return L.epconv_forward(layer, x, index, ctx, fast=fast)

            return fn, [x] + _params(layer)

        return case

    def ppool(is_global):
        def case(rng):
            coords = _cloud(rng)
            kw = {"is_global": True} if is_global else {"ratio": 0.5}
            layer = L.PPool(3, 5, spec=spec, coord_channels=3, rng=rng, **kw)
            x = T.Tensor(coords.copy())

            def fn():
                ctx = L.Context(training=True, rng=T.make_rng(4))
                return L.ppool_forward(layer, coords, x, ctx)[1]

            return fn, [x] + _params(layer)

        return case

    def block(kind):
        def case(rng):
            coords = _cloud(rng)
            x = _t(rng, 2, 6, 24)
            if kind == "dense":
                blk = L.DensePointBlock(6, 4, 2, groups=2, spec=spec, rng=rng)
                forward = L.densepoint_block_forward
            else:
                blk = L.LayerByLayerBlock(6, 4, 2, spec=spec, conv="epconv", concat_at_end=(kind == "concat"), rng=rng)
                forward = L.layer_by_layer_forward

            def fn():
                return forward(blk, x, coords, L.Context(training=True, rng=T.make_rng(4)))

            return fn, [x] + _params(blk)

        return case

    def fp_layer(rng):
        fine = _cloud(rng, n=12)
        coarse = fine[:, :, :5].copy()
        coarse += 0.01  # avoid exact coincidences
        layer = L.FPLayer(7, [6, 5], rng=rng)
        cf, skip = _t(rng, 2, 4, 5), _t(rng, 2, 3, 12)
        return (lambda: L.feature_propagate(layer, coarse, cf, fine, skip, True)), [cf, skip] + _params(layer)

    def fc(rng):
        layer = L.FC(6, 5, dropout=0.3, rng=rng)
        x = _t(rng, 4, 6)
        return (lambda: L.fc_forward(layer, x, L.Context(training=True, rng=T.make_rng(4)))), [x] + _params(layer)

    def network(rng):
        cfg = NW.NetworkConfig(
            task="classification",
            input_points=32,
            k=4,
            groups=2,
            num_classes=3,
            stages=[
                NW.StageConfig(NW.PPoolConfig(8, ratio=0.5, radius=0.8, neighbor_count=6), 2, 1.0, 6),
                NW.StageConfig(NW.PPoolConfig(12, is_global=True)),
            ],
            fc=[(8, 0.5)],
        )
        net = NW.Network(cfg)
        coords = _cloud(rng, n=32)
        labels = rng.integers(0, 3, 2)

        def fn():
            out = net(coords, L.Context(training=True, rng=T.make_rng(4)))
            return TR.softmax_cross_entropy(out, labels)

        return fn, _params(net)

    return {
        "linear": linear,
        "pconv": pconv(True),
        "pconv_literal": pconv(False),
        "epconv": epconv(True),
        "epconv_literal": epconv(False),
        "ppool": ppool(False),
        "ppool_global": ppool(True),
        "densepoint_block": block("dense"),
        "layer_by_layer_block": block("layer"),
        "concat_at_end_block": block("concat"),
        "fp_layer": fp_layer,
        "fc": fc,
        "network": network,
    }


def all_cases() -> Dict[str, Case]:
    cases = _ops()
    cases.update(_layers())
    return cases


def run(
    names: Optional[Sequence[str]] = None,
    seed: int = 0,
    tol: float = DEFAULT_TOL,
    max_entries: int = 24,
) -> List[GradResult]:
    cases = all_cases()
    names = list(cases) if names is None else list(names)
    unknown = [n for n in names if n not in cases]
    if unknown:
        raise T.ConfigError(f"unknown gradcheck cases: {unknown}")
    results = []
    for name in names:
        # keyed by name so a case draws the same data whatever else runs
        rng = T.make_rng(seed * 2**32 + zlib.crc32(name.encode("utf-8")))
        fn, inputs = cases[name](rng)
        err, entries = check(fn, inputs, rng, max_entries=max_entries)
        results.append(GradResult(name, err, entries, err <= tol))
    return results


def report(results: Sequence[GradResult]) -> str:
    lines = ["op\tmax_rel_error\tentries\tstatus"]
    for r in results:
        lines.append(f"{r.name}\t{r.max_rel_error:.3e}\t{r.entries}\t{'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)
