"""Reference implementations that share no code with the package.

They are deliberately slow and literal: direct DFT sums, scalar loops over
the dyadic profile, dense matrix exponentials and closed-form solutions.
"""
import cmath
import math

import numpy as np
from scipy.linalg import expm
from scipy.optimize import brentq


def direct_coefficient(values, k, period=2 * math.pi):
    """``(1/n^N) sum_j f(x_j) exp(-i k . x_j)`` by explicit summation."""
    values = np.asarray(values)
    n = values.shape[0]
    N = values.ndim
    h = period / n
    omega = 2 * math.pi / period
    total = 0j
    for idx in np.ndindex(values.shape):
        phase = sum(k[a] * idx[a] * h * omega for a in range(N))
        total += values[idx] * cmath.exp(-1j * phase)
    return total / n**N


def chi(r):
    """Scalar smooth step: 1 on [0, 3/4], 0 on [4/3, inf)."""
    t = (r - 0.75) / (4.0 / 3.0 - 0.75)
    if t <= 0:
        return 1.0
    if t >= 1:
        return 0.0
    a = math.exp(-1.0 / (1.0 - t))
    b = math.exp(-1.0 / t)
    return a / (a + b)


def phi(r):
    return chi(r / 2.0) - chi(r)


def block_weight(l, radius):
    """Mask value of block ``l`` at frequency magnitude ``radius``."""
    return phi(2.0**-l * radius)


def acoustic_matrix(xi, delta, nu, kappa=0.0, phi_hat=0.0, kappa_reg=0.0):
    b = xi * (delta - kappa * phi_hat) + kappa_reg * xi**3
    return np.array([[0.0, -xi], [b, -nu * xi**2]])


def acoustic_flow(xi, delta, nu, t, **kw):
    return expm(acoustic_matrix(xi, delta, nu, **kw) * t)


def slowest_rate(xi, delta, nu, **kw):
    ev = np.linalg.eigvals(acoustic_matrix(xi, delta, nu, **kw))
    return float(min(abs(e.real) for e in ev))


def gaussian_hat(xi, sigma):
    return math.exp(-0.5 * sigma**2 * xi**2)


def duhamel_constant_forcing(mu, k2, t):
    """Solution factor of ``u' = -mu k2 u + f`` from zero data, divided by ``f``."""
    return -math.expm1(-mu * k2 * t) / (mu * k2)


def single_block_time(eps, U0, c=1.0, nu=1.0, weight=1.0, rate=1.0):
    """Root of ``weight (1 - exp(-c nu rate t)) / (c nu) = eps nu^2 / (nu + U0)``."""
    target = eps * nu**2 / (nu + U0)

    def g(t):
        return weight * -math.expm1(-c * nu * rate * t) / (c * nu) - target

    if weight / (c * nu) <= target:
        return math.inf
    hi = 1.0
    while g(hi) < 0:
        hi *= 2
    return brentq(g, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps)


def spectral_derivative(values, axis, period=2 * math.pi):
    """Derivative along ``axis`` with numpy's FFT (Nyquist zeroed)."""
    n = values.shape[axis]
    k = np.fft.fftfreq(n, 1.0 / n) * (2 * math.pi / period)
    k[n // 2] = 0.0
    shape = [1] * values.ndim
    shape[axis] = n
    return np.real(np.fft.ifft(1j * k.reshape(shape) * np.fft.fft(values, axis=axis), axis=axis))
