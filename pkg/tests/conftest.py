import numpy as np
import pytest
import torch

from mugv.dit import DiTConfig

torch.set_num_threads(1)


def finite_difference_error(fn, tensors, h=1e-6, max_coords=24, seed=0):
    """Max relative error between autograd and central differences of scalar ``fn()``.

    ``tensors`` are double-precision leaves with requires_grad; up to
    ``max_coords`` random coordinates of each are probed.
    """
    for t in tensors:
        t.grad = None
    fn().backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        grad = t.grad.detach().reshape(-1).clone()
        flat = t.data.reshape(-1)
        idx = rng.choice(flat.numel(), size=min(max_coords, flat.numel()), replace=False)
        fd = torch.empty(len(idx), dtype=torch.float64)
        with torch.no_grad():
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                flat[i] = orig
                fd[j] = (up - down) / (2 * h)
        ana = grad[idx]
        err = float((ana - fd).norm() / max(float(fd.norm()), float(ana.norm()), 1e-12))
        worst = max(worst, err)
    return worst


@pytest.fixture
def fd_error():
    return finite_difference_error


@pytest.fixture
def tiny_dit_config():
    return DiTConfig(depth=2, hidden=16, heads=2, head_dim=8, text_dim=8, c_z=4, rope_split=(2, 2, 4),
                     freq_dim=16, vocab=64, max_text_len=8)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    setattr(item, f"rep_{rep.when}", rep)
