"""Losses, the training loop, test-time voting and segmentation metrics."""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from . import checkpoint
from .data import Dataset
from .geometry import augment_batch
from .layers import Context
from .networks import Network
from .optim import Adam
from .tensor import (
    ConfigError,
    ShapeError,
    Tensor,
    backward,
    div,
    log_softmax,
    make_rng,
    mul,
    no_grad,
    pick,
    reduce_mean,
    reduce_sum,
    sqrt,
    sub,
)

LOG_HEADER = "epoch\ttrain_loss\ttrain_acc\ttest_acc\twall_seconds"


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over (B, K) or per-point (B, K, N) logits.

    ``labels`` has the logits' shape with the class axis (axis 1) removed.
    """
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ConfigError("labels must be integers")
    expected = logits.shape[:1] + logits.shape[2:]
    if labels.shape != expected:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ConfigError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return -reduce_mean(pick(log_softmax(logits, axis=1), labels, axis=1))


def cosine_normal_loss(pred: Tensor, target: np.ndarray, eps: float = 1e-12) -> Tensor:
    """Mean of ``1 - cos`` between predicted (B, 3, N) vectors and unit targets."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    # eps enters squared so it only matters for (near-)zero predictions
    norm = sqrt(reduce_sum(mul(pred, pred), axis=1, keepdims=True) + eps * eps)
    cos = reduce_sum(mul(div(pred, norm), Tensor(target)), axis=1)
    return reduce_mean(sub(Tensor(np.ones(cos.shape)), cos))


# ---------------------------------------------------------------------------
# batching helpers
# ---------------------------------------------------------------------------


def _one_hot_rows(network: Network, labels: np.ndarray) -> Optional[np.ndarray]:
    dim = network.config.one_hot_dim
    if not dim:
        return None
    if labels.max() >= dim:
        raise ConfigError(f"object label {labels.max()} outside one-hot dimension {dim}")
    out = np.zeros((labels.size, dim))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _targets(task: str, dataset: Dataset) -> np.ndarray:
    if task == "classification":
        return dataset.labels()
    if task == "part_segmentation":
        if any(s.point_labels is None for s in dataset.samples):
            raise ConfigError("part segmentation needs per-point labels on every sample")
        return np.stack([s.point_labels for s in dataset.samples]).astype(np.int64)
    if task == "normal_estimation":
        if any(s.normals is None for s in dataset.samples):
            raise ConfigError("normal estimation needs normals on every sample")
        return np.stack([s.normals for s in dataset.samples])
    raise ConfigError(f"no training targets defined for task {task!r}")


def _loss_and_score(task: str, out: Tensor, target: np.ndarray) -> Tuple[Tensor, float]:
    """Loss plus a batch score: accuracy, or mean cosine for normals."""
    if task == "normal_estimation":
        loss = cosine_normal_loss(out, target)
        return loss, 1.0 - loss.item()
    loss = softmax_cross_entropy(out, target)
    return loss, float(np.mean(out.data.argmax(axis=1) == target))


def _augment_normals(normals: np.ndarray, scale: np.ndarray) -> np.ndarray:
    # normals transform by the inverse of a diagonal scaling
    n = normals / scale
    return n / np.linalg.norm(n, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    augment: bool = True
    scale_low: float = 0.66
    scale_high: float = 1.5
    translate: float = 0.2
    seed: int = 0
    eval_every: int = 1
    checkpoint_path: Optional[str] = None

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("need epochs >= 1 and batch_size >= 2")
        if not self.lr >= 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    wall_seconds: float

    def line(self) -> str:
        return (
            f"{self.epoch}\t{self.train_loss:.6f}\t{self.train_acc:.4f}\t"
            f"{self.test_acc:.4f}\t{self.wall_seconds:.2f}"
        )


def _clone_rng(rng: np.random.Generator) -> np.random.Generator:
    bg = type(rng.bit_generator)()
    bg.state = rng.bit_generator.state
    return np.random.Generator(bg)


def _diagnose_nonfinite(network: Network, coords, one_hot, rng_snapshot, epoch: int, batch: int) -> TrainingError:
    ctx = Context(training=True, rng=rng_snapshot, watch_finite=True)
    with no_grad():
        network(coords, ctx, one_hot)
    where = ctx.first_nonfinite or "loss"
    return TrainingError(
        f"non-finite loss at epoch {epoch}, batch {batch}; first non-finite output: {where}"
    )


def train(
    network: Network,
    dataset: Dataset,
    cfg: TrainConfig,
    log: Optional[TextIO] = None,
) -> List[EpochRecord]:
    """Train on the ``train`` split, scoring the ``test`` split after each epoch.

    Deterministic for a fixed ``cfg.seed`` and network seed. Writes one
    tab-separated line per epoch to ``log`` and saves a checkpoint at the
    end when ``cfg.checkpoint_path`` is set.
    """
    cfg.validate()
    task = network.config.task
    train_set, test_set = dataset.subset("train"), dataset.subset("test")
    if len(train_set) < 2:
        raise ConfigError("need at least two training samples")
    coords = train_set.coords()
    if coords.shape[2] != network.config.input_points:
        raise ShapeError(f"samples have {coords.shape[2]} points, network expects {network.config.input_points}")
    targets = _targets(task, train_set)
    one_hot = _one_hot_rows(network, train_set.labels())
    rng = make_rng(cfg.seed)
    opt = Adam(network.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    history: List[EpochRecord] = []
    if log is not None:
        print(LOG_HEADER, file=log, flush=True)
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        losses, scores, weights = [], [], []
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[lo : lo + cfg.batch_size]
            if idx.size < 2:
                continue  # batch statistics need two samples
            x, y = coords[idx], targets[idx]
            if cfg.augment:
                scale = rng.uniform(cfg.scale_low, cfg.scale_high, size=(idx.size, 3, 1))
                shift = rng.uniform(-cfg.translate, cfg.translate, size=(idx.size, 3, 1))
                x = x * scale + shift
                if task == "normal_estimation":
                    y = _augment_normals(y, scale)
            oh = one_hot[idx] if one_hot is not None else None
            snapshot = _clone_rng(rng)
            opt.zero_grad()
            out = network(x, Context(training=True, rng=rng), oh)
            loss, score = _loss_and_score(task, out, y)
            if not np.isfinite(loss.item()):
                raise _diagnose_nonfinite(network, x, oh, snapshot, epoch, b + 1)
            backward(loss)
            opt.step()
            losses.append(loss.item())
            scores.append(score)
            weights.append(idx.size)
        test_score = float("nan")
        if len(test_set) and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            test_score = batch_score(network, test_set, cfg.batch_size, seed=cfg.seed)
        record = EpochRecord(
            epoch,
            float(np.average(losses, weights=weights)),
            float(np.average(scores, weights=weights)),
            test_score,
            time.perf_counter() - start,
        )
        history.append(record)
        if log is not None:
            print(record.line(), file=log, flush=True)
    if cfg.checkpoint_path:
        checkpoint.save(network.state_dict(), cfg.checkpoint_path)
    return history


def batch_score(network: Network, dataset: Dataset, batch_size: int = 32, seed: int = 0) -> float:
    """Fast eval-mode score over a dataset (accuracy, or mean cosine for normals)."""
    task = network.config.task
    coords, targets = dataset.coords(), _targets(task, dataset)
    one_hot = _one_hot_rows(network, dataset.labels())
    rng = make_rng(seed)
    total, count = 0.0, 0
    with no_grad():
        for lo in range(0, len(dataset), batch_size):
            sl = slice(lo, lo + batch_size)
            out = network(coords[sl], Context(training=False, rng=rng), None if one_hot is None else one_hot[sl])
            _, score = _loss_and_score(task, out, targets[sl])
            n = coords[sl].shape[0]
            total += score * n
            count += n
    return total / count


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class Metrics:
    task: str
    count: int
    accuracy: Optional[float] = None
    mean_class_accuracy: Optional[float] = None
    per_class_accuracy: Dict[int, float] = field(default_factory=dict)
    class_miou: Optional[float] = None
    instance_miou: Optional[float] = None
    normal_cosine_error: Optional[float] = None
    normal_angle_deg: Optional[float] = None

    def summary(self) -> str:
        parts = [f"samples={self.count}"]
        for key in ("accuracy", "mean_class_accuracy", "class_miou", "instance_miou", "normal_cosine_error", "normal_angle_deg"):
            v = getattr(self, key)
            if v is not None:
                parts.append(f"{key}={v:.4f}")
        return " ".join(parts)


def sample_rng(seed: int, sample_id: str) -> np.random.Generator:
    """Generator keyed by (seed, sample id), so results ignore dataset order."""
    key = zlib.crc32(sample_id.encode("utf-8"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, key])))


def _softmax(x: np.ndarray, axis: int = 1) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def predict_voting(
    network: Network,
    dataset: Dataset,
    votes: int = 10,
    seed: int = 0,
    scale_low: float = 0.66,
    scale_high: float = 1.5,
) -> List[np.ndarray]:
    """Per-sample averaged predictions over ``votes`` randomly scaled copies.

    Classification gives class probabilities (K,), segmentation (K, N), and
    normal estimation the mean of unit predictions (3, N). Every sample uses
    its own generator keyed by its id.
    """
    if votes < 1:
        raise ConfigError(f"votes must be >= 1, got {votes}")
    task = network.config.task
    dim = network.config.one_hot_dim
    out: List[np.ndarray] = []
    with no_grad():
        for sample, sid in zip(dataset.samples, dataset.sample_ids):
            rng = sample_rng(seed, sid)
            x = np.repeat(sample.coords[None], votes, axis=0)
            if scale_low != 1.0 or scale_high != 1.0:
                x = augment_batch(x, rng, scale_low, scale_high, translate_range=0.0)
            oh = None
            if dim:
                oh = np.zeros((votes, dim))
                oh[:, sample.label] = 1.0
            y = network(x, Context(training=False, rng=rng), oh).data
            if task == "normal_estimation":
                y = y / np.maximum(np.linalg.norm(y, axis=1, keepdims=True), 1e-12)
                out.append(y.mean(axis=0))
            else:
                out.append(_softmax(y, axis=1).mean(axis=0))
    return out


def compute_miou(
    pred_parts: Sequence[np.ndarray],
    gt_parts: Sequence[np.ndarray],
    object_labels: Sequence[int],
    parts_of_class: Optional[Dict[int, Sequence[int]]] = None,
) -> Tuple[float, float]:
    """Class-averaged and instance-averaged part IoU.

    Each instance's IoU is the mean over its object class's parts; a part
    absent from both prediction and ground truth scores 1. When
    ``parts_of_class`` is None the part set of a class is every part label
    seen in its ground truth.
    """
    if not (len(pred_parts) == len(gt_parts) == len(object_labels)):
        raise ShapeError("pred_parts, gt_parts and object_labels must have equal length")
    if not len(pred_parts):
        raise ConfigError("no instances to score")
    if parts_of_class is None:
        parts_of_class = {}
        for gt, c in zip(gt_parts, object_labels):
            parts_of_class.setdefault(int(c), set()).update(np.unique(gt).tolist())
    per_class: Dict[int, List[float]] = {}
    instance = []
    for pred, gt, c in zip(pred_parts, gt_parts, object_labels):
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
        ious = []
        for part in sorted(parts_of_class[int(c)]):
            p, g = pred == part, gt == part
            union = np.logical_or(p, g).sum()
            ious.append(1.0 if union == 0 else np.logical_and(p, g).sum() / union)
        iou = float(np.mean(ious))
        instance.append(iou)
        per_class.setdefault(int(c), []).append(iou)
    class_miou = float(np.mean([np.mean(v) for v in per_class.values()]))
    return class_miou, float(np.mean(instance))


def evaluate_voting(
    network: Network,
    dataset: Dataset,
    votes: int = 10,
    seed: int = 0,
    scale_low: float = 0.66,
    scale_high: float = 1.5,
    parts_of_class: Optional[Dict[int, Sequence[int]]] = None,
) -> Tuple[Metrics, List[np.ndarray]]:
    """Score ``dataset`` with voting; returns the metrics and the raw predictions."""
    task = network.config.task
    preds = predict_voting(network, dataset, votes, seed, scale_low, scale_high)
    metrics = Metrics(task, len(dataset))
    labels = dataset.labels()
    if task == "classification":
        guess = np.array([p.argmax() for p in preds])
        hit = guess == labels
        metrics.accuracy = float(hit.mean())
        metrics.per_class_accuracy = {int(c): float(hit[labels == c].mean()) for c in np.unique(labels)}
        metrics.mean_class_accuracy = float(np.mean(list(metrics.per_class_accuracy.values())))
    elif task == "part_segmentation":
        gts = [s.point_labels for s in dataset.samples]
        guesses = []
        for p, c in zip(preds, labels):
            if parts_of_class is not None:
                allowed = np.array(sorted(parts_of_class[int(c)]))
                guesses.append(allowed[p[allowed].argmax(axis=0)])
            else:
                guesses.append(p.argmax(axis=0))
        metrics.accuracy = float(np.mean([np.mean(g == t) for g, t in zip(guesses, gts)]))
        metrics.class_miou, metrics.instance_miou = compute_miou(guesses, gts, labels, parts_of_class)
    elif task == "normal_estimation":
        cos = []
        for p, s in zip(preds, dataset.samples):
            unit = p / np.maximum(np.linalg.norm(p, axis=0, keepdims=True), 1e-12)
            cos.append((unit * s.normals).sum(axis=0))
        cos = np.clip(np.concatenate(cos), -1.0, 1.0)
        metrics.normal_cosine_error = float(np.mean(1.0 - cos))
        metrics.normal_angle_deg = float(np.degrees(np.arccos(cos)).mean())
    else:
        raise ConfigError(f"no evaluation defined for task {task!r}")
    return metrics, preds


def evaluate(network: Network, dataset: Dataset, seed: int = 0) -> Metrics:
    """Plain evaluation: one unscaled pass per sample."""
    return evaluate_voting(network, dataset, votes=1, seed=seed, scale_low=1.0, scale_high=1.0)[0]
