import numpy as np
import pytest

from psfedpalm.model import ArchitectureDescriptor, ParamVector, forward, init_params
from psfedpalm.specdata import build_federation_dataset


def central_diff(f, x, h=1e-5, idx=None):
    """Central finite-difference gradient of scalar f at x (optionally only at idx)."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = {}
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def activation_pattern(arch, values, images):
    """ReLU signs and max-pool winners of a train-mode forward."""
    out = forward(ParamVector(arch, values), images, "train")
    parts = []
    for lay in out.cache.layers:
        y, pooled = lay["y"], lay["pooled"]
        parts.append((pooled > 0).tobytes())
        B, H, W, C = y.shape
        win = y.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, H // 2, W // 2, C, 4)
        parts.append(win.argmax(axis=-1).tobytes())
    return b"".join(parts)


def network_fd(f, arch, values, images, idx, steps=(1e-5, 1e-6, 1e-7)):
    """Central differences that never straddle a ReLU or pooling kink.

    Uses the first step at which the activation pattern at values +/- h
    equals the one at values; returns ({index: derivative}, {index: h}).
    """
    values = np.array(values, dtype=np.float64)
    base = activation_pattern(arch, values, images)
    grads, used = {}, {}
    for i in idx:
        for h in steps:
            plus, minus = values.copy(), values.copy()
            plus[i] += h
            minus[i] -= h
            if (activation_pattern(arch, plus, images) == base
                    and activation_pattern(arch, minus, images) == base):
                grads[i] = (f(plus) - f(minus)) / (2 * h)
                used[i] = h
                break
    return grads, used


def rel_err(a, b, floor=1e-7):
    """Elementwise relative error with an absolute floor for near-zero entries."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@pytest.fixture
def small_arch():
    return ArchitectureDescriptor(num_classes=5)


@pytest.fixture
def small_params(small_arch):
    return init_params(small_arch, 0)


@pytest.fixture(scope="session")
def tiny_dataset():
    return build_federation_dataset(num_identities=6, train_per_identity=2, test_per_identity=2, seed=3)


# criterion number -> (name, passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {num:2d}. {name}: {detail}")
