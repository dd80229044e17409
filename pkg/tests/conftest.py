import sys

import pytest

from densepoint import networks as N
from densepoint.data import SyntheticShapeSpec, make_synthetic


def tiny_classifier(num_classes=4, points=64, connectivity="dense", seed=0):
    return N.NetworkConfig(
        task="classification",
        input_points=points,
        k=4,
        groups=2,
        num_classes=num_classes,
        connectivity=connectivity,
        seed=seed,
        stages=[
            N.StageConfig(N.PPoolConfig(8, ratio=0.5, radius=0.6, neighbor_count=8), 2, 0.8, 8),
            N.StageConfig(N.PPoolConfig(16, is_global=True)),
        ],
        fc=[(16, 0.5)],
    )


def tiny_per_point(task, num_classes, one_hot_dim, points=64):
    return N.NetworkConfig(
        task=task,
        input_points=points,
        k=4,
        groups=2,
        num_classes=num_classes,
        one_hot_dim=one_hot_dim,
        stages=[
            N.StageConfig(N.PPoolConfig(8, ratio=0.5, radius=0.6, neighbor_count=8), 1, 0.8, 8),
            N.StageConfig(N.PPoolConfig(12, ratio=0.5, radius=0.9, neighbor_count=8)),
        ],
        fp=[[12], [8]],
        fc=[(8, 0.5)],
    )


def tiny_dataset(task="classification", seed=0, train=4, test=2, points=64):
    spec = SyntheticShapeSpec(points_per_sample=points, train_per_class=train, test_per_class=test, seed=seed)
    return make_synthetic(spec, task)


@pytest.fixture
def tiny_data():
    return tiny_dataset()


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[number])
