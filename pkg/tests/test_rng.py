import numpy as np

from lowthrust_dm.rng import stream, torch_seed


def test_substreams_deterministic_and_distinct():
    a = stream(1, 2, 3).random(5)
    np.testing.assert_array_equal(a, stream(1, 2, 3).random(5))
    assert not np.array_equal(a, stream(1, 2, 4).random(5))
    assert not np.array_equal(a, stream(2, 2, 3).random(5))


def test_uniform_mean_z_scores():
    n = 10_000
    z = np.array([(stream(s).random((n, 6)).mean(axis=0) - 0.5) / np.sqrt(1 / (12 * n))
                  for s in range(100)])
    assert abs(z.std() - 1.0) < 0.1
    assert np.mean(np.abs(z) > 3) < 0.01


def test_torch_seed_range():
    s = torch_seed(5, 1)
    assert 0 <= s < 2**63 and s == torch_seed(5, 1) and s != torch_seed(5, 2)
