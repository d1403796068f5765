import numpy as np
import pytest

from cbmi_nmt.tensor import Tape, Tensor


def eval_loss(make_loss, arrays):
    """Evaluate a loss builder on plain (non-tracked) tensors."""
    return make_loss(*[Tensor(a) for a in arrays]).item()


def fd_check(
    make_loss,
    arrays,
    rng,
    samples_per_tensor=8,
    h=1e-5,
    tol=1e-3,
    min_pass_rate=0.99,
):
    """Compare tape gradients of a scalar loss against central finite
    differences on randomly sampled coordinates of each input array.

    Returns the pass rate; asserts it meets ``min_pass_rate``. Inputs must be
    float64 for the tolerance to be meaningful.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = make_loss(*tensors)
        tape.backward(loss)

    checks = []
    for t_idx, tensor in enumerate(tensors):
        grad = tensor.grad
        assert grad is not None, f"input {t_idx} received no gradient"
        flat_size = grad.size
        n = min(samples_per_tensor, flat_size)
        coords = rng.choice(flat_size, size=n, replace=False)
        for coord in coords:
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[t_idx].reshape(-1)[coord] += h
            minus[t_idx].reshape(-1)[coord] -= h
            fd = (eval_loss(make_loss, plus) - eval_loss(make_loss, minus)) / (2 * h)
            g = grad.reshape(-1)[coord]
            rel = abs(g - fd) / max(abs(g), abs(fd), 1e-6)
            checks.append(rel < tol)
    rate = float(np.mean(checks))
    assert rate >= min_pass_rate, f"finite-difference pass rate {rate:.3f} < {min_pass_rate}"
    return rate


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
