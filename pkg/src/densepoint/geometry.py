"""Sampling, neighborhood construction, normalisation and augmentation.

All coordinate arrays are channel-first: ``(3, N)`` for one cloud or
``(B, 3, N)`` for a batch. Index-producing functions accept either and
return matching batched/unbatched index arrays. Distances are compared
squared; sphere membership is the strict test ``d < r``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .tensor import ConfigError, ShapeError, Tensor, gather_points, mul, sub


@dataclass
class PointCloud:
    """One sample. ``features`` of None means the coordinates are the features."""

    coords: np.ndarray
    features: Optional[np.ndarray] = None
    point_labels: Optional[np.ndarray] = None
    label: Optional[int] = None
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[0] != 3 or self.coords.shape[1] < 1:
            raise ShapeError(f"coords must be (3, N>=1), got {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coords must be finite")

    @property
    def num_points(self) -> int:
        return self.coords.shape[1]

    def input_features(self) -> np.ndarray:
        return self.coords if self.features is None else self.features


@dataclass(frozen=True)
class NeighborhoodSpec:
    """How to build a local neighborhood around each centroid.

    ``sampling="all"`` is the deterministic mode: every in-radius point is
    kept, sorted by index, and rows are padded with the centroid up to the
    largest in-radius count.
    """

    method: str = "sphere"
    radius: float = 0.2
    neighbor_count: int = 32
    normalize: bool = True
    sampling: str = "random"

    def __post_init__(self):
        if self.method not in ("sphere", "knn"):
            raise ConfigError(f"unknown neighborhood method {self.method!r}")
        if self.sampling not in ("random", "all"):
            raise ConfigError(f"unknown neighbor sampling {self.sampling!r}")
        if self.method == "sphere" and not self.radius > 0:
            raise ConfigError(f"sphere radius must be > 0, got {self.radius}")
        if self.neighbor_count < 1:
            raise ConfigError(f"neighbor_count must be >= 1, got {self.neighbor_count}")


@dataclass
class NeighborhoodIndex:
    centroids: np.ndarray
    neighbors: np.ndarray = field(repr=False)

    @property
    def width(self) -> int:
        return self.neighbors.shape[-1]


def _batched(coords: np.ndarray):
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 2:
        return coords[None], True
    if coords.ndim != 3 or coords.shape[1] != 3:
        raise ShapeError(f"coords must be (3, N) or (B, 3, N), got {coords.shape}")
    return coords, False


def _sq_dists(coords: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """(B, No, N) squared distances from each centroid to every point."""
    c = np.take_along_axis(coords, centroids[:, None, :], axis=2)
    d2 = np.zeros((coords.shape[0], centroids.shape[1], coords.shape[2]))
    for axis in range(coords.shape[1]):
        diff = coords[:, axis, None, :] - c[:, axis, :, None]
        d2 += diff * diff
    return d2


def normalize_unit_sphere(coords: np.ndarray) -> np.ndarray:
    """Center at the mean and scale so the farthest point has norm 1."""
    coords = np.asarray(coords, dtype=np.float64)
    centered = coords - coords.mean(axis=-1, keepdims=True)
    radius = np.sqrt((centered**2).sum(axis=-2, keepdims=True)).max(axis=-1, keepdims=True)
    return centered / np.where(radius > 0, radius, 1.0)


def invariant_seed_index(coords: np.ndarray) -> np.ndarray:
    """FPS seed that does not depend on point order: the point farthest from the mean."""
    c, single = _batched(coords)
    d = ((c - c.mean(axis=2, keepdims=True)) ** 2).sum(axis=1)
    seed = np.argmax(d, axis=1)
    return seed[0] if single else seed


def farthest_point_sample(coords: np.ndarray, count: int, seed_index=0) -> np.ndarray:
    """Greedy max-min subset selection.

    Args:
        coords: (3, N) or (B, 3, N).
        count: number of indices to return, 1 <= count <= N.
        seed_index: first pick, an int or one int per batch element.

    Returns:
        (count,) or (B, count) distinct int64 indices in pick order. Ties go
        to the lowest index.
    """
    c, single = _batched(coords)
    b, _, n = c.shape
    if not 1 <= count <= n:
        raise ConfigError(f"cannot sample {count} of {n} points")
    out = np.empty((b, count), dtype=np.int64)
    out[:, 0] = np.broadcast_to(np.asarray(seed_index, dtype=np.int64), (b,))
    rows = np.arange(b)
    mind = np.full((b, n), np.inf)
    for i in range(count):
        if i:
            out[:, i] = np.argmax(mind, axis=1)
        last = c[rows, :, out[:, i]][:, :, None]
        d = ((c - last) ** 2).sum(axis=1)
        np.minimum(mind, d, out=mind)
        # exclude picked points even when duplicates make every distance zero
        mind[rows, out[:, i]] = -1.0
    return out[0] if single else out


def ball_query(
    coords: np.ndarray,
    centroid_indices: np.ndarray,
    spec: NeighborhoodSpec,
    rng: Optional[np.random.Generator] = None,
) -> NeighborhoodIndex:
    """Random-in-sphere neighborhoods padded with the centroid.

    Points with ``d < radius`` (the centroid always qualifies) are sampled
    uniformly without replacement up to ``neighbor_count``; empty slots hold
    the centroid index. In ``sampling="all"`` mode every in-radius point is
    listed in index order and the width is the largest in-radius count in
    the batch.
    """
    if spec.method != "sphere":
        raise ConfigError("ball_query needs a sphere neighborhood spec")
    c, single = _batched(coords)
    cent = np.asarray(centroid_indices, dtype=np.int64)
    cent = cent[None] if single else cent
    b, _, n = c.shape
    d2 = _sq_dists(c, cent)
    inside = d2 < spec.radius**2
    if spec.sampling == "all":
        width = max(int(inside.sum(axis=2).max(initial=1)), 1)
        keys = np.broadcast_to(np.arange(n, dtype=np.float64), d2.shape).copy()
    else:
        if rng is None:
            raise ConfigError("random neighbor sampling needs an rng")
        width = min(spec.neighbor_count, n)
        keys = rng.random(d2.shape)
    keys[~inside] = np.inf
    if spec.sampling == "all":
        order = np.argsort(keys, axis=2, kind="stable")[:, :, :width]
    elif width < n:
        order = np.argpartition(keys, width - 1, axis=2)[:, :, :width]
    else:
        order = np.argsort(keys, axis=2, kind="stable")
    picked_keys = np.take_along_axis(keys, order, axis=2)
    nbrs = np.where(np.isfinite(picked_keys), order, cent[:, :, None])
    if spec.sampling == "random" and spec.neighbor_count > width:
        pad = np.repeat(cent[:, :, None], spec.neighbor_count - width, axis=2)
        nbrs = np.concatenate([nbrs, pad], axis=2)
    if single:
        return NeighborhoodIndex(cent[0], nbrs[0])
    return NeighborhoodIndex(cent, nbrs)


def knn_query(coords: np.ndarray, centroid_indices: np.ndarray, k: int) -> NeighborhoodIndex:
    """k nearest points of each centroid (itself included), ties by lowest index."""
    c, single = _batched(coords)
    n = c.shape[2]
    if not 1 <= k <= n:
        raise ConfigError(f"k={k} must lie in [1, {n}]")
    cent = np.asarray(centroid_indices, dtype=np.int64)
    cent = cent[None] if single else cent
    d2 = _sq_dists(c, cent)
    nbrs = np.argsort(d2, axis=2, kind="stable")[:, :, :k]
    if single:
        return NeighborhoodIndex(cent[0], nbrs[0])
    return NeighborhoodIndex(cent, nbrs)


def query_neighborhood(
    coords: np.ndarray,
    centroid_indices: np.ndarray,
    spec: NeighborhoodSpec,
    rng: Optional[np.random.Generator] = None,
) -> NeighborhoodIndex:
    if spec.method == "knn":
        return knn_query(coords, centroid_indices, spec.neighbor_count)
    return ball_query(coords, centroid_indices, spec, rng)


def gather_and_normalize(
    features: Tensor,
    index: NeighborhoodIndex,
    coord_channels: int = 3,
    normalize: bool = True,
) -> Tensor:
    """Gather (B, C, N) features into a (B, C, N_o, M) neighborhood block.

    With ``normalize`` the first ``coord_channels`` channels (the XYZ
    channels) have their centroid's values subtracted.
    """
    nbrs = index.neighbors
    cent = index.centroids
    if nbrs.ndim == 2:
        nbrs, cent = nbrs[None], cent[None]
    if features.shape[0] != nbrs.shape[0]:
        raise ShapeError(f"features batch {features.shape[0]} vs index batch {nbrs.shape[0]}")
    grouped = gather_points(features, nbrs)
    if not normalize or coord_channels == 0:
        return grouped
    centre = gather_points(features, cent[:, :, None])
    mask = np.zeros((1, features.shape[1], 1, 1))
    mask[:, :coord_channels] = 1.0
    return sub(grouped, mul(centre, Tensor(mask)))


def augment(
    cloud: PointCloud,
    rng: np.random.Generator,
    scale_low: float = 0.66,
    scale_high: float = 1.5,
    translate_range: float = 0.2,
) -> PointCloud:
    """Random anisotropic scaling then translation, drawn independently per axis."""
    if not 0 < scale_low <= scale_high:
        raise ConfigError(f"need 0 < scale_low <= scale_high, got {scale_low}, {scale_high}")
    scale = rng.uniform(scale_low, scale_high, size=3)
    shift = rng.uniform(-translate_range, translate_range, size=3)
    coords = cloud.coords * scale[:, None] + shift[:, None]
    return replace(cloud, coords=coords)


def augment_batch(
    coords: np.ndarray,
    rng: np.random.Generator,
    scale_low: float = 0.66,
    scale_high: float = 1.5,
    translate_range: float = 0.2,
) -> np.ndarray:
    """Batched :func:`augment` over (B, 3, N) coordinates."""
    if not 0 < scale_low <= scale_high:
        raise ConfigError(f"need 0 < scale_low <= scale_high, got {scale_low}, {scale_high}")
    b = coords.shape[0]
    scale = rng.uniform(scale_low, scale_high, size=(b, 3, 1))
    shift = rng.uniform(-translate_range, translate_range, size=(b, 3, 1))
    return coords * scale + shift
