"""Pure-numpy twin of the compiled kernels in ``_kernels.pyx``."""
import numpy as np


def gaussian_kernel_sum(A, B, gamma, exclude_diag=False, grad_a=False, grad_b=False):
    """Sum of exp(-gamma * |a_i - b_j|^2) over all (i, j), optionally i != j.

    Returns ``(s, dA, dB)`` where ``dA``/``dB`` are the gradients of ``s``
    (or ``None`` when not requested).
    """
    a = np.asarray(A, dtype=np.float64)
    b = np.asarray(B, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError("A and B must have the same number of columns")
    if exclude_diag and a.shape[0] != b.shape[0]:
        raise ValueError("exclude_diag needs A and B with equal row counts")
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    np.maximum(sq, 0.0, out=sq)
    k = np.exp(-gamma * sq)
    if exclude_diag:
        np.fill_diagonal(k, 0.0)
    total = float(k.sum())
    da = db = None
    if grad_a:
        da = -2.0 * gamma * (k.sum(1)[:, None] * a - k @ b)
    if grad_b:
        db = -2.0 * gamma * (k.sum(0)[:, None] * b - k.T @ a)
    return total, da, db
