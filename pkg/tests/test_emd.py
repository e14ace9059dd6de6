import itertools

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from gigpc.emd import auction_assignment, cost_matrix, emd, exact_assignment


def permutation_oracle(a, b):
    """Minimum mean matching cost over every permutation."""
    C = cost_matrix(a, b)
    n = len(a)
    perms = np.array(list(itertools.permutations(range(n))))
    return float((C[np.arange(n), perms].sum(axis=1) / n).min())


def test_exact_matches_all_permutations():
    rng = np.random.default_rng(0)
    for trial in range(60):
        n = 1 + trial % 8
        a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        assert abs(emd(a, b, method="exact") - permutation_oracle(a, b)) < 1e-9


def test_worked_examples():
    assert emd([[0.0, 0, 0]], [[1.0, 0, 0]]) == 1.0
    assert emd([[0.0, 0, 0], [2.0, 0, 0]], [[1.0, 0, 0], [3.0, 0, 0]]) == 1.0


def test_identical_is_zero_and_sizes_must_match(rng):
    a = rng.normal(size=(10, 3))
    assert emd(a, a) == 0.0
    with pytest.raises(ValueError, match="size"):
        emd(a, a[:5])
    with pytest.raises(ValueError, match="method"):
        emd(a, a, method="sinkhorn")


@pytest.mark.parametrize("method", ["exact", "auction"])
def test_symmetric_and_permutation_invariant(method):
    rng = np.random.default_rng(1)
    for _ in range(10):
        a, b = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
        d = emd(a, b, method=method)
        if method == "exact":
            assert emd(b, a, method=method) == d
            assert emd(a[rng.permutation(20)], b[rng.permutation(20)], method=method) == d
        else:
            assert emd(b, a, method=method) == pytest.approx(d, rel=1e-3)


def test_bounded_by_random_permutations(rng):
    a, b = rng.normal(size=(16, 3)), rng.normal(size=(16, 3))
    C = cost_matrix(a, b)
    d = emd(a, b)
    for _ in range(100):
        assert d <= C[np.arange(16), rng.permutation(16)].mean() + 1e-15


def test_rotation_invariant(rng):
    a, b = rng.normal(size=(30, 3)), rng.normal(size=(30, 3))
    R = Rotation.random(random_state=7).as_matrix()
    assert abs(emd(a @ R.T, b @ R.T) - emd(a, b)) < 1e-9


def test_auction_within_one_percent_of_exact():
    rng = np.random.default_rng(2)
    for trial in range(50):
        n = int(rng.integers(2, 65))
        a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        exact = emd(a, b, method="exact")
        approx = emd(a, b, method="auction")
        assert exact - 1e-12 <= approx <= exact * 1.01


def test_auction_bound_holds_on_structured_clouds():
    # points on a grid produce many equal costs
    g = np.stack(np.meshgrid(*[np.arange(4.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
    rng = np.random.default_rng(3)
    for tol in (1e-2, 1e-3):
        b = g[rng.permutation(len(g))] + 0.5
        C = cost_matrix(g, b)
        opt = C[np.arange(len(g)), exact_assignment(C)].sum()
        got = C[np.arange(len(g)), auction_assignment(C, tol)].sum()
        assert opt - 1e-9 <= got <= opt * (1 + tol)


def test_auction_returns_a_permutation(rng):
    C = rng.random((40, 40))
    assign = auction_assignment(C)
    assert sorted(assign) == list(range(40))


def test_auto_switches_to_auction_above_threshold(rng):
    a, b = rng.normal(size=(140, 3)), rng.normal(size=(140, 3))
    assert emd(a, b) == emd(a, b, method="auction")
    assert emd(a, b, exact_max=200) == emd(a, b, method="exact")
