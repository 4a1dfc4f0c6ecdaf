import os
import subprocess
import sys

import numpy as np
import pytest

from moeroute import _kernels

pytestmark = pytest.mark.skipif(_kernels.numba_kernels is None, reason="numba not installed")
NP, NB = _kernels.numpy_kernels, _kernels.numba_kernels


@pytest.mark.parametrize("seed", range(5))
def test_gather_bitwise(seed):
    r = np.random.default_rng(seed)
    src = r.normal(size=(30, 7))
    idx = r.integers(0, 30, size=55)
    assert np.array_equal(NP.gather_rows(src, idx), NB.gather_rows(src, idx))


@pytest.mark.parametrize("seed", range(5))
def test_scatter_bitwise(seed):
    r = np.random.default_rng(seed)
    src = r.normal(size=(60, 5))
    idx = r.integers(0, 9, size=60)
    w = r.random(60)
    a = NP.scatter_add_rows(np.zeros((9, 5)), src, idx, w)
    b = NB.scatter_add_rows(np.zeros((9, 5)), src, idx, w)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("seed", range(5))
def test_count_distinct_and_capacity(seed):
    r = np.random.default_rng(seed)
    vals = r.integers(-1, 4, size=(40, 6))
    assert np.array_equal(NP.count_distinct_per_row(vals), NB.count_distinct_per_row(vals))
    expected = [len({v for v in row if v >= 0}) for row in vals.tolist()]
    assert NP.count_distinct_per_row(vals).tolist() == expected
    experts = r.integers(0, 5, size=80)
    for cap in (1, 3, 100):
        a = NP.capacity_keep(experts, 5, cap)
        assert np.array_equal(a, NB.capacity_keep(experts, 5, cap))
        for e in range(5):
            assert a[experts == e].sum() == min(cap, (experts == e).sum())


def test_empty_inputs():
    for k in (NP, NB):
        assert k.gather_rows(np.zeros((3, 2)), np.array([], dtype=np.int64)).shape == (0, 2)
        assert k.count_distinct_per_row(np.zeros((0, 3), dtype=np.int64)).shape == (0,)


@pytest.mark.parametrize("flag, name", [("1", "numpy"), ("0", "numba")])
def test_env_flag_selects_backend(flag, name):
    env = dict(os.environ, MOEROUTE_DISABLE_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c",
                          "from moeroute import _kernels; print(_kernels.active.name)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == name
