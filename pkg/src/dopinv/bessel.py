"""Modified Bessel function of the second kind for the Matern kernel orders.

Half-integer orders use their elementary closed forms.  Integer orders build
``K_0`` and ``K_1`` (power series with logarithmic terms for ``z <= 2``,
Steed's continued fraction for ``z > 2``) and recur upward.
"""
from __future__ import annotations

import numpy as np

from .exceptions import DomainError

SUPPORTED_ORDERS = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5)

_EULER_GAMMA = 0.57721566490153286061
_SERIES_TERMS = 30
_EPS = 1e-17
_MAX_CF_ITER = 10_000


def modified_bessel_k(nu, z):
    """K_nu(z) for nu in {0, 1/2, 1, 3/2, 2, 5/2} and z > 0.

    Parameters
    ----------
    nu : float
    z : float or array_like
        Strictly positive arguments.

    Returns
    -------
    float or ndarray
        Same shape as ``z``.
    """
    nu = float(nu)
    if nu not in SUPPORTED_ORDERS:
        raise DomainError(f"unsupported Bessel order {nu}; supported: {SUPPORTED_ORDERS}")
    z_arr = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z_arr)) or np.any(z_arr <= 0.0):
        raise DomainError("K_nu(z) requires finite z > 0")
    zz = np.atleast_1d(z_arr).ravel()

    if nu % 1.0 == 0.5:
        out = _half_integer(nu, zz)
    else:
        k0, k1 = _k0_k1(zz)
        if nu == 0.0:
            out = k0
        elif nu == 1.0:
            out = k1
        else:
            out = k0 + (2.0 / zz) * k1
    out = out.reshape(z_arr.shape)
    return float(out) if out.ndim == 0 else out


def _half_integer(nu, z):
    base = np.sqrt(np.pi / (2.0 * z)) * np.exp(-z)
    if nu == 0.5:
        return base
    if nu == 1.5:
        return base * (1.0 + 1.0 / z)
    return base * (1.0 + 3.0 / z + 3.0 / z ** 2)


def _k0_k1(z):
    k0 = np.empty_like(z)
    k1 = np.empty_like(z)
    small = z <= 2.0
    if small.any():
        k0[small], k1[small] = _series(z[small])
    if (~small).any():
        k0[~small], k1[~small] = _steed(z[~small])
    return k0, k1


def _series(z):
    """Ascending series for K_0 and K_1 (convergent for all z, used for z <= 2)."""
    t = 0.25 * z * z
    log_half = np.log(0.5 * z)
    i0 = np.zeros_like(z)
    i1_sum = np.zeros_like(z)
    k0_sum = np.zeros_like(z)
    k1_sum = np.zeros_like(z)
    term0 = np.ones_like(z)          # t^k / (k!)^2
    term1 = np.ones_like(z)          # t^k / (k! (k+1)!)
    harmonic = 0.0                   # H_k
    for k in range(_SERIES_TERMS):
        if k > 0:
            term0 = term0 * t / (k * k)
            term1 = term1 * t / (k * (k + 1))
            harmonic += 1.0 / k
        psi_k1 = -_EULER_GAMMA + harmonic             # psi(k+1)
        psi_k2 = psi_k1 + 1.0 / (k + 1)               # psi(k+2)
        i0 += term0
        i1_sum += term1
        k0_sum += harmonic * term0
        k1_sum += (psi_k1 + psi_k2) * term1
    i1 = 0.5 * z * i1_sum
    k0 = -(log_half + _EULER_GAMMA) * i0 + k0_sum
    k1 = 1.0 / z + log_half * i1 - 0.25 * z * k1_sum
    return k0, k1


def _steed(x):
    """Steed's continued fraction (Temme's CF2) for K_0, K_1 at x > 2."""
    a1 = 0.25                        # 1/4 - mu^2 with mu = 0
    b = 2.0 * (1.0 + x)
    d = 1.0 / b
    h = d.copy()
    delh = d.copy()
    q1 = np.zeros_like(x)
    q2 = np.ones_like(x)
    q = np.full_like(x, a1)
    c = a1
    a = -a1
    s = 1.0 + q * delh
    for i in range(2, _MAX_CF_ITER):
        a -= 2 * (i - 1)
        c = -a * c / i
        qnew = (q1 - b * q2) / a
        q1, q2 = q2, qnew
        q = q + c * qnew
        b = b + 2.0
        d = 1.0 / (b + a * d)
        delh = (b * d - 1.0) * delh
        h = h + delh
        dels = q * delh
        s = s + dels
        if np.all(np.abs(dels / s) < _EPS):
            break
    else:  # pragma: no cover - converges in a few dozen steps for x > 2
        raise ArithmeticError("continued fraction for K_nu did not converge")
    h = a1 * h
    k0 = np.sqrt(np.pi / (2.0 * x)) * np.exp(-x) / s
    k1 = k0 * (x + 0.5 - h) / x
    return k0, k1
