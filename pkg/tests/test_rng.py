import numpy as np

from imsm.rng import stream


def test_same_path_reproduces():
    a = stream(7, 10, 2).standard_normal(100)
    b = stream(7, 10, 2).standard_normal(100)
    np.testing.assert_array_equal(a, b)


def test_creation_order_does_not_matter():
    first = [stream(3, 0, r).random(5) for r in range(4)]
    second = [stream(3, 0, r).random(5) for r in reversed(range(4))][::-1]
    np.testing.assert_array_equal(first, second)


def test_paths_and_seeds_give_distinct_streams():
    draws = {
        "seed": stream(1, 0, 0).random(8),
        "other_seed": stream(2, 0, 0).random(8),
        "other_path": stream(1, 0, 1).random(8),
        "prefix": stream(1, 0).random(8),
    }
    values = list(draws.values())
    for i in range(len(values)):
        for j in range(i + 1, len(values)):
            assert not np.array_equal(values[i], values[j])


def test_streams_are_uncorrelated():
    a = stream(0, 40, 0).standard_normal(20000)
    b = stream(0, 40, 1).standard_normal(20000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.03
