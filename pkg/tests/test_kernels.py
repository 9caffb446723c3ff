import numpy as np
import pytest

from signdiff import kernels


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")


@pytest.mark.skipif(kernels.compiled_kernels is None, reason="extension not built")
def test_compiled_matches_python():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n, m = (int(x) for x in rng.integers(1, 40, size=2))
        cost = rng.random((n, m))
        if rng.random() < 0.3:
            cost = np.round(cost * 3) / 3  # force ties
        assert kernels.compiled_kernels.dtw_accumulate(cost) == kernels.python_kernels.dtw_accumulate(cost)


def test_tie_prefers_longer_path():
    cost = np.zeros((3, 3))
    total, length = kernels.python_kernels.dtw_accumulate(cost)
    assert total == 0 and length == 5
    if kernels.compiled_kernels is not None:
        assert kernels.compiled_kernels.dtw_accumulate(cost) == (0.0, 5)


def test_empty_rejected():
    with pytest.raises(ValueError):
        kernels.python_kernels.dtw_accumulate(np.zeros((0, 3)))
    if kernels.compiled_kernels is not None:
        with pytest.raises(ValueError):
            kernels.compiled_kernels.dtw_accumulate(np.zeros((0, 3)))
