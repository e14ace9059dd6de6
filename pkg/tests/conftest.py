import numpy as np
import pytest

from gigpc import autodiff as ad

SEEDS = list(range(20))


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(build, arrays, h=1e-6, weights_seed=0):
    """Largest relative error between backprop and central differences.

    ``build`` maps tensors to a tensor; non-scalar outputs are contracted with
    fixed random weights so every output entry contributes.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = build(*[ad.Tensor(a) for a in arrays])
    W = np.random.default_rng(weights_seed).normal(size=probe.shape)

    def scalar(ts):
        out = build(*ts)
        return ad.sum(ad.mul(out, ad.Tensor(W))) if out.shape else out

    leaves = [ad.Tensor(a, requires_grad=True) for a in arrays]
    ad.backward(scalar(leaves))
    worst = 0.0
    for leaf, a in zip(leaves, arrays):
        num = ad.numerical_gradient(lambda: scalar([ad.Tensor(x) for x in arrays]).item(), a, h)
        ana = np.zeros_like(a) if leaf.grad is None else leaf.grad
        worst = max(worst, rel_err(ana, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
