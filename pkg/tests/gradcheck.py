"""Central finite-difference gradient checks shared by the test modules."""
import numpy as np

from dagaf.diffcore import Tape


def analytic_grads(build, params):
    for p in params:
        p.zero_grad()
    tape = Tape()
    out = build(tape)
    tape.backward(out)
    return float(out.value), [p.grad.copy() for p in params]


def numeric_grads(build, params, eps=1e-6):
    grads = []
    for p in params:
        g = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(build(Tape()).value)
            flat[i] = orig - eps
            down = float(build(Tape()).value)
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def max_rel_error(a, b, floor=1e-8):
    """Largest elementwise error, relative where both values exceed ``floor``."""
    worst = 0.0
    for x, y in zip(a, b):
        diff = np.abs(x - y)
        scale = np.maximum(np.abs(x), np.abs(y))
        rel = np.where(diff <= floor, 0.0, diff / np.maximum(scale, floor))
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
    return worst


def check(build, params, eps=1e-6):
    _, ana = analytic_grads(build, params)
    num = numeric_grads(build, params, eps)
    return max_rel_error(ana, num)
