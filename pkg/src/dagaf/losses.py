"""Training objectives: adversarial, reconstruction, MMD, PNL and the
augmented-Lagrangian composition.

Every loss takes and returns tape vars so gradients flow through
:mod:`dagaf.diffcore`. :func:`mmd_numeric` evaluates the MMD statistic
without a tape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
from scipy.spatial.distance import pdist

from . import diffcore as dc
from . import kernels
from .diffcore import ConfigError
from .models import critic_forward


@dataclass(frozen=True)
class LossWeights:
    adv: float = 1.0
    mse: float = 1.0
    kld: float = 0.1
    mmd: float = 1.0
    pnl: float = 1.0
    gp: float = 10.0
    recon: str = "mse"

    def __post_init__(self):
        for f in fields(self):
            if f.name == "recon":
                continue
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"loss weight {f.name} must be finite and >= 0, got {v}")
        if self.recon not in ("mse", "nll"):
            raise ConfigError(f"recon must be 'mse' or 'nll', got {self.recon!r}")

    def for_assumption(self, assumption):
        """The KL term is dropped under the non-Gaussian (LiNGAM) assumption."""
        if str(getattr(assumption, "value", assumption)) == "lingam" and self.kld:
            return LossWeights(self.adv, self.mse, 0.0, self.mmd, self.pnl, self.gp, self.recon)
        return self


@dataclass
class LossBreakdown:
    adv: float = 0.0
    mse: float = 0.0
    kld: float = 0.0
    mmd: float = 0.0
    pnl: float = 0.0
    h: float = 0.0
    acyc_penalty: float = 0.0
    total: float = 0.0
    critic: float = 0.0

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


# -- adversarial -------------------------------------------------------------

def wgan_gp_critic_loss(critic, x_real, x_fake, gp_coeff, rng, tape):
    """mean D(fake) - mean D(real) + gp * mean((|grad D(x_hat)| - 1)^2).

    ``x_hat`` interpolates real and fake rows with one uniform weight per
    row. Fake rows are constants here, so only the critic gets gradients.
    Dropout is active (masks drawn from ``rng``).
    """
    x_real = np.asarray(x_real)
    x_fake = np.asarray(x_fake)
    if x_real.shape != x_fake.shape:
        raise ValueError(f"real/fake batch shapes differ: {x_real.shape} vs {x_fake.shape}")
    eps = rng.random((x_real.shape[0], 1))
    d_real = critic_forward(critic, x_real, tape, rng)
    d_fake = critic_forward(critic, x_fake, tape, rng)
    loss = dc.sub(dc.mean(d_fake), dc.mean(d_real))
    if gp_coeff:
        x_hat = tape.const(eps * x_real + (1.0 - eps) * x_fake)
        d_hat = critic_forward(critic, x_hat, tape, rng)
        (grad_hat,) = tape.grad(dc.vsum(d_hat), [x_hat])
        pen = dc.mean(dc.square(dc.sub(dc.row_norm(grad_hat), 1.0)))
        loss = dc.add(loss, dc.mul(pen, float(gp_coeff)))
    return loss


def wgan_generator_loss(critic, x_fake, tape, rng=None):
    """-mean D(fake), with the critic's weights held constant."""
    return dc.neg(dc.mean(critic_forward(critic, x_fake, tape, rng, detach=True)))


# -- reconstruction ----------------------------------------------------------

def mse_loss(x, x_fake):
    """(1/n) * sum of squared differences over rows and columns."""
    tape = dc._tape_of(x, x_fake)
    x, x_fake = tape.lift(x), tape.lift(x_fake)
    n = x.shape[0]
    return dc.mul(dc.vsum(dc.square(dc.sub(x, x_fake))), 1.0 / n)


def nll_loss(x, x_fake):
    """Gaussian negative log-likelihood with unit variance: mse/2 + const."""
    d = dc._tape_of(x, x_fake).lift(x).shape[1]
    return dc.add(dc.mul(mse_loss(x, x_fake), 0.5), 0.5 * d * math.log(2.0 * math.pi))


def kld_loss(x_fake):
    """(1/2n) * sum of squares: KL to a standard normal up to constants."""
    n = x_fake.shape[0]
    return dc.mul(dc.vsum(dc.square(x_fake)), 0.5 / n)


def pnl_loss(g_inv_x, f_x):
    """Mismatch between g^-1(X) and the FCM output f(X)."""
    return mse_loss(g_inv_x, f_x)


# -- MMD -----------------------------------------------------------------------

def median_bandwidth(x):
    """Median pairwise Euclidean distance of the rows of ``x`` (1.0 if zero)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 2:
        return 1.0
    med = float(np.median(pdist(x)))
    return med if med > 0 else 1.0


def _gamma(bandwidth):
    if not bandwidth > 0:
        raise ConfigError(f"kernel bandwidth must be positive, got {bandwidth}")
    return 1.0 / (2.0 * bandwidth * bandwidth)


def kernel_sum(a, b, gamma, exclude_diag=True):
    """Tape op: sum_{i,j} exp(-gamma |a_i - b_j|^2) (pairs i == j skipped)."""
    tape, a, b = dc._pair(a, b)
    need_a, need_b = a.requires_grad, b.requires_grad

    def fwd(x, y):
        return kernels.gaussian_kernel_sum(x, y, gamma, exclude_diag)[0]

    def back(g, out, x, y):
        _, da, db = kernels.gaussian_kernel_sum(x, y, gamma, exclude_diag, need_a, need_b)
        return (g * da if need_a else None, g * db if need_b else None)

    return tape.record("kernel_sum", (a, b), fwd, back)


def kernel_self_sum(a, gamma, exclude_diag=True):
    """Tape op: kernel sum of ``a`` with itself; gradient uses symmetry."""

    def fwd(x):
        return kernels.gaussian_kernel_sum(x, x, gamma, exclude_diag)[0]

    def back(g, out, x):
        _, da, _ = kernels.gaussian_kernel_sum(x, x, gamma, exclude_diag, True, False)
        return (2.0 * g * da,)

    return a.tape.record("kernel_self_sum", (a,), fwd, back)


def mmd_loss(x, x_fake, bandwidth=None, unbiased=False):
    """Gaussian-kernel MMD between real rows ``x`` and generated rows.

    The three kernel sums run over pairs i != j and are scaled by 1/n, or by
    1/(n(n-1)) with ``unbiased=True``. ``bandwidth=None`` uses the median
    heuristic on the real rows.
    """
    tape = dc._tape_of(x, x_fake)
    x, x_fake = tape.lift(x), tape.lift(x_fake)
    if x.shape != x_fake.shape:
        raise ValueError(f"MMD needs equally sized samples, got {x.shape} and {x_fake.shape}")
    n = x.shape[0]
    if bandwidth is None:
        bandwidth = median_bandwidth(x.value)
    gamma = _gamma(bandwidth)
    scale = 1.0 / (n * (n - 1)) if unbiased else 1.0 / n
    xx = kernel_sum(x, x, gamma) if not x.requires_grad else kernel_self_sum(x, gamma)
    yy = kernel_self_sum(x_fake, gamma) if x_fake.requires_grad else kernel_sum(x_fake, x_fake, gamma)
    xy = kernel_sum(x, x_fake, gamma)
    total = dc.add(dc.sub(xx, dc.mul(xy, 2.0)), yy)
    return dc.mul(total, scale)


def mmd_numeric(x, y, bandwidth=None, unbiased=True):
    """MMD value without a tape (same estimator as :func:`mmd_loss`)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"MMD needs equally sized samples, got {x.shape} and {y.shape}")
    n = x.shape[0]
    if bandwidth is None:
        bandwidth = median_bandwidth(x)
    gamma = _gamma(bandwidth)
    ks = kernels.gaussian_kernel_sum
    total = ks(x, x, gamma, True)[0] - 2.0 * ks(x, y, gamma, True)[0] + ks(y, y, gamma, True)[0]
    return total * (1.0 / (n * (n - 1)) if unbiased else 1.0 / n)


# -- composition -------------------------------------------------------------

def lagrangian_terms(h, lam, c):
    """(c/2) h^2 + lambda h."""
    return dc.add(dc.mul(dc.square(h), 0.5 * c), dc.mul(h, lam))


def compose_step1_loss(parts, weights, lam, c, h):
    """Weighted sum of the available loss terms plus the Lagrangian penalty.

    ``parts`` maps term names (``adv``, ``recon``, ``kld``, ``mmd``,
    ``pnl``) to scalar vars; missing terms and zero weights are skipped.
    """
    scale = {"adv": weights.adv, "recon": weights.mse, "kld": weights.kld,
             "mmd": weights.mmd, "pnl": weights.pnl}
    total = lagrangian_terms(h, lam, c)
    for name, var in parts.items():
        if name not in scale:
            raise KeyError(f"unknown loss term {name!r}")
        if var is not None and scale[name]:
            total = dc.add(total, dc.mul(var, float(scale[name])))
    return total
