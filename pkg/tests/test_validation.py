import numpy as np
import pytest

from boneshape.exceptions import ArgumentError, ValidationError
from boneshape.validation import check_point, check_points, check_positive_int, frozen


def test_check_points_accepts_lists():
    out = check_points([[0, 1, 2], [3, 4, 5]])
    assert out.dtype == np.float64 and out.shape == (2, 3)


@pytest.mark.parametrize("bad", [np.zeros((4, 2)), [[0, 0, np.nan]], np.zeros((0, 3))])
def test_check_points_rejects(bad):
    with pytest.raises(ValidationError):
        check_points(bad)


def test_check_point():
    assert check_point((1, 2, 3)).tolist() == [1.0, 2.0, 3.0]
    for bad in ([1, 2], [0, np.inf, 0]):
        with pytest.raises(ValidationError):
            check_point(bad)


def test_check_positive_int():
    assert check_positive_int(3.0, "n") == 3
    for bad in (0, 2.5, True):
        with pytest.raises(ArgumentError):
            check_positive_int(bad, "n")


def test_frozen_is_read_only_copy():
    a = np.arange(6.0)
    f = frozen(a)
    a[0] = 99
    assert f[0] == 0 and not f.flags.writeable
    with pytest.raises(ValueError):
        f[1] = 1
