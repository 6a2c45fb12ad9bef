"""Central finite-difference oracle, independent of the analytic backward code."""

import numpy as np

H = 1e-3


def rel_err(a, b, floor=1e-6):
    return np.abs(a - b) / np.maximum(floor, np.abs(a) + np.abs(b))


def numeric_param_grads(loss_fn, model, h=H):
    """d loss / d theta for every parameter entry, by central differences."""
    out = []
    base = [p.copy() for p in model.params]
    for k, p in enumerate(base):
        g = np.zeros_like(p)
        for i in range(p.size):
            params = [q.copy() for q in base]
            params[k].flat[i] += h
            up = loss_fn(model.with_params(params))
            params[k].flat[i] -= 2 * h
            down = loss_fn(model.with_params(params))
            g.flat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def numeric_input_grad(f, x, h=H):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp.flat[i] += h
        xm = x.copy()
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def max_rel_err(analytic, numeric):
    return max(float(np.max(rel_err(a, n))) for a, n in zip(analytic, numeric))
