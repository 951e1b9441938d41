"""Central finite-difference oracles shared by the gradient tests."""

import numpy as np

from fgn import diffcore as dc

STEP = 1e-5


def numeric_grad(f, arrays, i, h=STEP):
    """d f / d arrays[i] by central differences, entry by entry."""
    base = [np.array(a, dtype=float) for a in arrays]
    x = base[i]
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(*base)
        x[idx] = old - h
        down = f(*base)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def analytic_grads(build, arrays):
    """Gradients of the scalar ``build(*leaves)`` w.r.t. every input."""
    tape = dc.Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = build(*leaves)
    return float(out.data), tape.gradient(out, leaves)


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_all(build, arrays, tol=1e-4):
    """Largest relative error over all inputs of a scalar-valued composition."""

    def value(*xs):
        return float(build(*[dc.Tensor(x) for x in xs]).data)

    _, grads = analytic_grads(build, arrays)
    return max(rel_err(g, numeric_grad(value, arrays, i)) for i, g in enumerate(grads))


def directional_err(f_value, grads, arrays, rng, n_dirs=3, h=STEP):
    """Compare <grad, v> with a central difference along random directions ``v``."""
    worst = 0.0
    for _ in range(n_dirs):
        vs = [rng.standard_normal(np.shape(a)) for a in arrays]
        up = f_value([a + h * v for a, v in zip(arrays, vs)])
        down = f_value([a - h * v for a, v in zip(arrays, vs)])
        fd = (up - down) / (2 * h)
        ad = sum(float(np.sum(g * v)) for g, v in zip(grads, vs))
        worst = max(worst, abs(fd - ad) / max(abs(fd), abs(ad), 1e-10))
    return worst
