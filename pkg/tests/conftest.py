import numpy as np
import pytest

from loclic import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def numeric_grad(f, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar f w.r.t. every entry of x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = f()
        flat[i] = keep - step
        lo = f()
        flat[i] = keep
        gf[i] = (hi - lo) / (2.0 * step)
    return g


def analytic_vs_numeric(build_loss, leaves, step=1e-4, rtol=1e-5):
    """Gradient-check helper.

    build_loss() must construct the loss from the given leaf tensors inside
    an active tape. Compares tape gradients against central differences for
    every leaf; returns the worst relative error seen.
    """
    with T.GradTape() as tape:
        loss = build_loss()
    grads = T.backward(loss, tape)
    worst = 0.0
    for leaf in leaves:
        ana = grads.get(leaf)

        def scalar_loss():
            return build_loss().item()

        num = numeric_grad(scalar_loss, leaf.data, step=step)
        denom = np.maximum(np.abs(ana) + np.abs(num), 1e-8)
        rel = np.abs(ana - num) / denom
        worst = max(worst, float(rel.max()))
        assert rel.max() < rtol, f"gradient mismatch: rel err {rel.max():.3e}"
    return worst
