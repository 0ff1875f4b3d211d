import numpy as np
import pytest

from setner import autodiff as ad


@pytest.fixture(autouse=True)
def finite_checks():
    ad.set_check_finite(True)
    yield
    ad.set_check_finite(False)


def finite_diff(fn, arrays, step=1e-5):
    """Central finite differences of scalar fn w.r.t. each array in-place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn()
            flat[i] = orig - step
            lo = fn()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def rel_err(a, b, floor=1e-7):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def grad_close(analytic, numeric, rtol=1e-4, atol=1e-8):
    """Relative error below rtol, with an absolute floor for entries that
    sit under the finite-difference noise level."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return bool(np.all(np.abs(a - n) <= atol + rtol * np.maximum(np.abs(a), np.abs(n))))
