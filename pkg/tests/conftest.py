import numpy as np
import pytest
import torch

from createrec.data import InteractionLog, temporal_split


def central_difference(fn, tensor: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``fn()`` w.r.t. every entry of ``tensor`` (float64)."""
    grad = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    g = grad.view(-1)
    for k in range(flat.numel()):
        orig = flat[k].item()
        flat[k] = orig + h
        plus = float(fn().detach())
        flat[k] = orig - h
        minus = float(fn().detach())
        flat[k] = orig
        g[k] = (plus - minus) / (2 * h)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def autograd_of(fn, tensor: torch.Tensor) -> torch.Tensor:
    tensor.grad = None
    fn().backward()
    return tensor.grad.detach().clone()


@pytest.fixture
def tiny_log():
    # 6 users, 8 items, timestamps spread so every split is non-empty
    rng = np.random.default_rng(7)
    picks = [rng.choice(8, size=6, replace=False) for _ in range(6)]
    users, items, stamps = [], [], []
    t = 0
    for step in range(6):
        for u in range(6):
            users.append(u)
            items.append(int(picks[u][step]))
            stamps.append(t)
            t += 1
    order = rng.permutation(len(users))
    return InteractionLog(
        np.array(users)[order], np.array(items)[order], np.array(stamps)[order]
    )


@pytest.fixture
def tiny_bundle(tiny_log):
    return temporal_split(tiny_log, 0.6, 0.8)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
