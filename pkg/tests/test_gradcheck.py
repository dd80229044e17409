import inspect
import re

import numpy as np
import pytest

from densepoint import gradcheck as GC
from densepoint import tensor as T


def differentiable_ops():
    src = inspect.getsource(T)
    names = re.findall(r"^def ([a-z]\w*)\(", src, re.M)
    return sorted(n for n in names if "_make(" in inspect.getsource(getattr(T, n)))


def test_relative_error():
    a = np.array([1.0, -2.0, 3.0])
    assert GC.relative_error(a, a) == 0.0
    assert GC.relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert GC.relative_error(a, a + np.array([0.0, 0.0, 0.3])) == pytest.approx(0.3 / 3.3)


def test_check_detects_wrong_gradient():
    x = T.Tensor(np.array([0.3, -1.2, 2.0]))

    def fn():
        return T._make(x.data**2, (x,), lambda g: (g * x.data,), "square")  # should be 2x

    err, entries = GC.check(fn, [x], T.make_rng(0))
    assert entries == 3 and err > 0.4


def test_check_accepts_correct_gradient():
    x = T.Tensor(np.array([0.3, -1.2, 2.0]))
    err, _ = GC.check(lambda: T.mul(x, x), [x], T.make_rng(0))
    assert err < 1e-9


def test_every_differentiable_op_has_a_case():
    cases = set(GC.all_cases())
    for op in differentiable_ops():
        assert op in cases or f"{op}_train" in cases, op


@pytest.mark.parametrize("name", sorted(GC.all_cases()))
def test_case_passes(name):
    (result,) = GC.run([name])
    assert result.passed, f"{name}: {result.max_rel_error:.3e}"
    assert result.entries > 0


def test_subset_matches_full_run():
    a = GC.run(["relu", "epconv"])
    b = GC.run(["epconv"])
    assert a[1] == b[0]


def test_report_lists_each_once():
    results = GC.run(["add", "relu", "fc"])
    lines = GC.report(results).splitlines()
    assert lines[0] == "op\tmax_rel_error\tentries\tstatus"
    assert [line.split("\t")[0] for line in lines[1:]] == ["add", "relu", "fc"]


def test_unknown_case():
    with pytest.raises(T.ConfigError):
        GC.run(["nope"])
