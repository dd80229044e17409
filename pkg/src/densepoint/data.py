"""Datasets: synthetic shape families and a plain-text XYZ directory format.

Directory layout: ``manifest.tsv`` lists ``relative_path<TAB>label<TAB>split``
per line; each point file holds one ``x y z[ nx ny nz][ part]`` row per point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy.spatial.transform import Rotation

from . import checkpoint
from .geometry import PointCloud, normalize_unit_sphere
from .tensor import ConfigError, make_rng

FAMILIES = ("sphere", "box", "torus", "plane")
SPLITS = ("train", "test")
TORUS_MAJOR, TORUS_MINOR = 0.7, 0.3


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    samples: List[PointCloud]
    class_names: List[str]
    splits: List[str]
    task: str = "classification"
    sample_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.samples) != len(self.splits):
            raise DataError("one split assignment per sample is required")
        if not self.sample_ids:
            self.sample_ids = [f"s{i:05d}" for i in range(len(self.samples))]
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise DataError("sample ids must be unique")
        for s, sp in zip(self.samples, self.splits):
            if sp not in SPLITS:
                raise DataError(f"unknown split {sp!r}")
            if s.label is not None and not 0 <= s.label < len(self.class_names):
                raise DataError(f"label {s.label} outside {len(self.class_names)} classes")

    def indices(self, split: str) -> List[int]:
        return [i for i, sp in enumerate(self.splits) if sp == split]

    def subset(self, split: str) -> "Dataset":
        idx = self.indices(split)
        return Dataset(
            [self.samples[i] for i in idx], list(self.class_names), [split] * len(idx),
            self.task, [self.sample_ids[i] for i in idx],
        )

    def __len__(self) -> int:
        return len(self.samples)

    def coords(self) -> np.ndarray:
        """(S, 3, N) stacked coordinates; all samples must share N."""
        return np.stack([s.coords for s in self.samples])

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)


def one_hot(label: int, dim: int) -> np.ndarray:
    if not 0 <= label < dim:
        raise ConfigError(f"label {label} outside one-hot dimension {dim}")
    out = np.zeros(dim)
    out[label] = 1.0
    return out


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------


@dataclass
class SyntheticShapeSpec:
    families: Sequence[str] = FAMILIES
    points_per_sample: int = 256
    jitter: float = 0.01
    train_per_class: int = 200
    test_per_class: int = 80
    seed: int = 0
    rotate: bool = False

    def __post_init__(self):
        if self.points_per_sample < 64:
            raise ConfigError("points_per_sample must be >= 64")
        unknown = set(self.families) - set(FAMILIES)
        if unknown:
            raise ConfigError(f"unknown shape families {sorted(unknown)}")


def clipped_jitter(shape, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian offsets whose per-point norm is truncated at 3 sigma."""
    noise = rng.normal(scale=sigma, size=shape)
    norm = np.linalg.norm(noise, axis=0, keepdims=True)
    return noise * np.minimum(1.0, 3 * sigma / np.maximum(norm, 1e-300))


def sample_surface(family: str, n: int, rng: np.random.Generator):
    """Points, unit normals and part labels on an analytic surface, all (.., n).

    Every family fits inside the unit ball.
    """
    if family == "sphere":
        v = rng.normal(size=(3, n))
        p = v / np.linalg.norm(v, axis=0)
        return p, p.copy(), (p[2] >= 0).astype(np.int64)
    if family == "box":
        h = 1.0 / np.sqrt(3.0)
        face = rng.integers(0, 6, n)
        axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
        p = rng.uniform(-h, h, (3, n))
        p[axis, np.arange(n)] = sign * h
        nrm = np.zeros((3, n))
        nrm[axis, np.arange(n)] = sign
        return p, nrm, face
    if family == "torus":
        # area-weighted rejection on the tube angle
        u = rng.uniform(0, 2 * np.pi, n)
        v = np.empty(n)
        filled = 0
        while filled < n:
            cand = rng.uniform(0, 2 * np.pi, 2 * n)
            keep = rng.uniform(0, 1, 2 * n) < (TORUS_MAJOR + TORUS_MINOR * np.cos(cand)) / (TORUS_MAJOR + TORUS_MINOR)
            cand = cand[keep][: n - filled]
            v[filled : filled + cand.size] = cand
            filled += cand.size
        nrm = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)])
        ring = np.stack([np.cos(u), np.sin(u), np.zeros(n)]) * TORUS_MAJOR
        p = ring + TORUS_MINOR * nrm
        return p, nrm, (np.cos(v) >= 0).astype(np.int64)
    if family == "plane":
        h = 1.0 / np.sqrt(2.0)
        p = np.stack([rng.uniform(-h, h, n), rng.uniform(-h, h, n), np.zeros(n)])
        nrm = np.zeros((3, n))
        nrm[2] = 1.0
        return p, nrm, (p[0] >= 0).astype(np.int64)
    raise ConfigError(f"unknown shape family {family!r}")


def make_synthetic(spec: SyntheticShapeSpec, task: str = "classification") -> Dataset:
    """Deterministic (under ``spec.seed``) labelled clouds of each family."""
    rng = make_rng(spec.seed)
    samples, splits, ids = [], [], []
    for split, per_class in (("train", spec.train_per_class), ("test", spec.test_per_class)):
        for label, family in enumerate(spec.families):
            for i in range(per_class):
                p, nrm, parts = sample_surface(family, spec.points_per_sample, rng)
                if spec.rotate:
                    rot = Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()
                    p, nrm = rot @ p, rot @ nrm
                if spec.jitter:
                    p = p + clipped_jitter(p.shape, spec.jitter, rng)
                samples.append(PointCloud(p, point_labels=parts, label=label, normals=nrm))
                splits.append(split)
                ids.append(f"{family}-{split}-{i:04d}")
    return Dataset(samples, list(spec.families), splits, task, ids)


# ---------------------------------------------------------------------------
# plain-text directories
# ---------------------------------------------------------------------------


def resample(coords: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Indices choosing ``n`` points: a random subset, or all plus random repeats."""
    m = coords.shape[1]
    if m >= n:
        return np.sort(rng.choice(m, n, replace=False))
    extra = rng.choice(m, n - m, replace=True)
    return np.concatenate([np.arange(m), extra])


def _parse_points(path: Path):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) not in (3, 4, 6, 7):
                raise DataError(f"{path}:{lineno}: expected 3, 4, 6 or 7 columns, got {len(parts)}")
            try:
                rows.append([float(x) for x in parts])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if len(rows[-1]) != len(rows[0]):
                raise DataError(f"{path}:{lineno}: column count changed from {len(rows[0])}")
    if not rows:
        raise DataError(f"{path}: no points")
    arr = np.array(rows).T
    coords = arr[:3]
    normals = arr[3:6] if arr.shape[0] >= 6 else None
    parts = arr[-1].astype(np.int64) if arr.shape[0] in (4, 7) else None
    return coords, normals, parts


def load_xyz_dir(
    path: Union[str, Path],
    manifest: str = "manifest.tsv",
    class_names: Optional[Sequence[str]] = None,
    n_points: Optional[int] = None,
    normalize: bool = True,
    seed: int = 0,
    task: str = "classification",
) -> Dataset:
    """Load a manifest-described directory of point files.

    Clouds are unit-sphere normalised and, when ``n_points`` is given,
    resampled to that count.
    """
    root = Path(path)
    entries = []
    with open(root / manifest) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise DataError(f"{root / manifest}:{lineno}: expected path<TAB>label<TAB>split")
            entries.append((lineno, *cols))
    names = list(class_names) if class_names is not None else sorted({e[2] for e in entries})
    lookup = {c: i for i, c in enumerate(names)}
    rng = make_rng(seed)
    samples, splits, ids = [], [], []
    for lineno, rel, label, split in entries:
        if label not in lookup:
            raise DataError(f"{root / manifest}:{lineno}: unknown label {label!r}")
        if split not in SPLITS:
            raise DataError(f"{root / manifest}:{lineno}: unknown split {split!r}")
        coords, normals, parts = _parse_points(root / rel)
        if normalize:
            coords = normalize_unit_sphere(coords)
        if n_points is not None:
            pick = resample(coords, n_points, rng)
            coords = coords[:, pick]
            normals = normals[:, pick] if normals is not None else None
            parts = parts[pick] if parts is not None else None
        samples.append(PointCloud(coords, point_labels=parts, label=lookup[label], normals=normals))
        splits.append(split)
        ids.append(rel)
    return Dataset(samples, names, splits, task, ids)


def save_xyz_dir(dataset: Dataset, path: Union[str, Path], manifest: str = "manifest.tsv") -> None:
    """Write every sample as a text file (17 significant digits) plus the manifest."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for sample, split, sid in zip(dataset.samples, dataset.splits, dataset.sample_ids):
        rel = sid if sid.endswith(".xyz") else f"{sid}.xyz"
        cols = [sample.coords]
        if sample.normals is not None:
            cols.append(sample.normals)
        if sample.point_labels is not None:
            cols.append(sample.point_labels[None].astype(np.float64))
        table = np.concatenate(cols, axis=0).T
        fmt = ["%.17g"] * (table.shape[1] - (sample.point_labels is not None)) + (
            ["%d"] if sample.point_labels is not None else []
        )
        target = root / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(target, table, fmt=fmt)
        lines.append(f"{rel}\t{dataset.class_names[sample.label]}\t{split}")
    (root / manifest).write_text("\n".join(lines) + "\n")


def save_cache(dataset: Dataset, path: Union[str, Path]) -> None:
    """Binary cache in the checkpoint layout: coords (S,3,N), labels (S,), is_test (S,)."""
    checkpoint.save(
        {
            "coords": dataset.coords(),
            "labels": dataset.labels().astype(np.float64),
            "is_test": np.array([sp == "test" for sp in dataset.splits], dtype=np.float64),
        },
        path,
    )


def load_cache(path: Union[str, Path], class_names: Sequence[str], task: str = "classification") -> Dataset:
    arrays = checkpoint.load(path)
    samples = [
        PointCloud(c, label=int(l)) for c, l in zip(arrays["coords"], arrays["labels"])
    ]
    splits = ["test" if t else "train" for t in arrays["is_test"]]
    return Dataset(samples, list(class_names), splits, task)
