import numpy as np
import pytest
import torch

torch.set_num_threads(2)


def central_difference_grads(loss_fn, tensor: torch.Tensor, coords, eps: float = 1e-5):
    """Finite-difference gradient of ``loss_fn()`` w.r.t. selected coords of ``tensor``.

    ``loss_fn`` must recompute the scalar from the tensor's current values.
    """
    flat = tensor.data.reshape(-1)
    grads = np.empty(len(coords), dtype=np.float64)
    for n, i in enumerate(coords):
        orig = flat[i].item()
        flat[i] = orig + eps
        plus = loss_fn()
        flat[i] = orig - eps
        minus = loss_fn()
        flat[i] = orig
        grads[n] = (plus - minus) / (2.0 * eps)
    return grads


def sample_coords(numel: int, limit: int, seed: int):
    if numel <= limit:
        return list(range(numel))
    rng = np.random.default_rng(seed)
    return sorted(rng.choice(numel, size=limit, replace=False).tolist())


def assert_grads_match(analytic: torch.Tensor, loss_fn, tensor: torch.Tensor,
                       coord_limit: int = 48, seed: int = 0, rtol: float = 1e-3):
    coords = sample_coords(tensor.numel(), coord_limit, seed)
    fd = central_difference_grads(loss_fn, tensor, coords)
    got = analytic.detach().reshape(-1).numpy()[coords]
    np.testing.assert_allclose(got, fd, rtol=rtol, atol=1e-8)


@pytest.fixture
def grad_checker():
    return assert_grads_match
